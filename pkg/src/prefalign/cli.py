"""``prefalign`` command line: one subcommand per pipeline stage over a run directory.

Run directory layout::

    config.json           resolved config snapshot (immutable)
    metrics.jsonl         one record per optimizer step, every stage
    data/{train,test}.jsonl
    ckpt/<stage>.mmrl     final weights; ckpt/<stage>-state.mmrl for resume
    candidates.jsonl  rankings.jsonl  pairs.jsonl
    eval/  ablation/  report.json  report.txt
    .done/<stage>         completion markers
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, RunConfig, config_diff, load_config

log = logging.getLogger("prefalign")

STAGES = ("gen-data", "sft", "gen-candidates", "rank", "make-pairs", "train-rm", "ppo", "dpo", "eval", "ablate")


class StageError(RuntimeError):
    def __init__(self, kind: str, message: str, **fields):
        super().__init__(message)
        self.kind = kind
        self.fields = fields


class MissingPrerequisite(StageError):
    def __init__(self, path: Path, producer: str):
        super().__init__(
            "missing_prerequisite",
            f"{path} not found; run `prefalign {producer}` first",
            file=str(path),
            producer=producer,
        )


class Run:
    def __init__(self, root: Path, config: RunConfig):
        self.root = root
        self.config = config

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, rel: str, producer: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingPrerequisite(p, producer)
        return p

    def done(self, stage: str) -> bool:
        return self.path(".done", stage).exists()

    def mark(self, stage: str, info: dict | None = None) -> None:
        p = self.path(".done", stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(info or {}, sort_keys=True) + "\n")

    def metrics(self, stage: str):
        from .runs import MetricsLog

        return MetricsLog(self.path("metrics.jsonl"), stage, self.config.metrics.timing)


def open_run(root: Path, config: RunConfig) -> Run:
    """Create the run directory or check the resolved config against its snapshot."""
    snap = root / "config.json"
    if snap.exists():
        old = json.loads(snap.read_text())
        diff = config_diff(old, config.to_dict())
        if diff:
            raise StageError("config_mismatch", "config differs from run snapshot: " + "; ".join(diff), diff=diff)
    else:
        root.mkdir(parents=True, exist_ok=True)
        snap.write_text(config.to_json())
    return Run(root, config)


# --------------------------------------------------------------------------
# stage helpers
# --------------------------------------------------------------------------


def _vocab():
    from .taskgen import task_vocab

    return task_vocab()


def _train(run: Run):
    from .taskgen import read_jsonl

    return read_jsonl(run.require("data/train.jsonl", "gen-data"))


def _test(run: Run):
    from .taskgen import read_jsonl

    return read_jsonl(run.require("data/test.jsonl", "gen-data"))


def _pref_samples(run: Run):
    """The training-set subset used for candidates, PPO prompts and DPO."""
    from .numerics import RngState

    train = _train(run)
    n = run.config.preference.n_prompts
    if n > len(train):
        log.warning("preference.n_prompts=%d exceeds the %d training samples; using all", n, len(train))
        n = len(train)
    order = RngState(run.config.data.seed).child("preference-prompts").permutation(len(train))
    return [train[i] for i in sorted(order[:n])]


def _load_policy(run: Run, stage: str):
    from .model import load_model

    return load_model(run.require(f"ckpt/{stage}.mmrl", stage))[0]


def _interrupted(stage: str, stop_after: int | None, total: int) -> bool:
    if stop_after is not None and stop_after < total:
        print(f"{stage}: stopped after step {stop_after} of {total}; rerun to resume")
        return True
    return False


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def cmd_gen_data(run: Run, args) -> None:
    from .taskgen import generate_dataset, split, write_jsonl

    d = run.config.data
    samples = generate_dataset(d.seed, d.n, d.clutter)
    sp = split(samples, d.ratio, d.seed)
    write_jsonl(sp.train, run.path("data", "train.jsonl"))
    write_jsonl(sp.test, run.path("data", "test.jsonl"))
    run.mark("gen-data", {"train": len(sp.train), "test": len(sp.test)})
    print(f"gen-data: {len(sp.train)} train / {len(sp.test)} test samples")


def cmd_sft(run: Run, args) -> None:
    from .model import PolicyModel, save_model
    from .numerics import RngState
    from .sft import sft_train

    c = run.config
    train = _train(run)
    vocab = _vocab()
    model = PolicyModel(c.model.model_config(len(vocab)), RngState(c.model.seed).child("init"))
    model = sft_train(model, vocab, train, c.sft, run.metrics("sft"), run.path("ckpt", "sft-state.mmrl"), args.stop_after)
    total = math.ceil(len(train) / c.sft.batch_size) * c.sft.epochs
    if _interrupted("sft", args.stop_after, total):
        return
    if model.adapters:
        model.merge_lora()
    save_model(model, run.path("ckpt", "sft.mmrl"))
    run.mark("sft", {"steps": total})
    print(f"sft: trained {total} steps -> {run.path('ckpt', 'sft.mmrl')}")


def cmd_gen_candidates(run: Run, args) -> None:
    from .model import Sampling
    from .preference import generate_candidates, write_candidates

    p = run.config.preference
    ckpts = [(name, _load_policy(run, name)) for name in p.checkpoints]
    samples = _pref_samples(run)
    report = generate_candidates(
        ckpts,
        _vocab(),
        samples,
        p.K,
        p.seeds,
        run.config.sft.setting,
        Sampling(temperature=p.temperature, top_k=p.top_k),
        p.max_new_tokens,
        p.workers,
    )
    write_candidates(report.sets, run.path("candidates.jsonl"))
    run.mark("gen-candidates", {"sets": len(report.sets), "dropped": report.dropped})
    print(f"gen-candidates: {len(report.sets)} sets x K={p.K}; {len(report.dropped)} dropped")


def cmd_rank(run: Run, args) -> None:
    from .preference import ExternalRanker, RankerConfig, rank_all, read_candidates, write_rankings

    p = run.config.preference
    csets = read_candidates(run.require("candidates.jsonl", "gen-candidates"))
    golds = {s.id: s for s in _train(run)}
    stats = {"ranker": p.ranker, "downgrades": 0}
    if p.ranker == "external":
        with ExternalRanker(RankerConfig(p.endpoint, p.retries, p.timeout, p.concurrency)) as ranker:
            rankings = rank_all(csets, golds, ranker)
            stats["downgrades"] = ranker.downgrades
    else:
        rankings = rank_all(csets, golds)
    write_rankings(zip([c.sample_id for c in csets], rankings), run.path("rankings.jsonl"))
    run.mark("rank", stats)
    print(f"rank: {len(rankings)} sets ranked by {p.ranker}; {stats['downgrades']} fallback(s) to oracle")


def cmd_make_pairs(run: Run, args) -> None:
    from .preference import PreferenceError, build_pairs, read_candidates, read_rankings, write_pairs

    csets = read_candidates(run.require("candidates.jsonl", "gen-candidates"))
    ranked = read_rankings(run.require("rankings.jsonl", "rank"))
    if [c.sample_id for c in csets] != [sid for sid, _ in ranked]:
        raise PreferenceError("rankings.jsonl does not match candidates.jsonl; rerun rank")
    pairs, stats = build_pairs(csets, [r for _, r in ranked])
    write_pairs(pairs, run.path("pairs.jsonl"))
    run.mark("make-pairs", asdict(stats))
    print(f"make-pairs: {stats.emitted} pairs from {stats.samples} sets; {stats.dropped_duplicate} duplicate(s) dropped")


def cmd_train_rm(run: Run, args) -> None:
    from .alignment import RewardModel, pairwise_accuracy, train_reward
    from .preference import read_pairs

    c = run.config
    pairs = read_pairs(run.require("pairs.jsonl", "make-pairs"))
    sft = _load_policy(run, "sft")
    vocab = _vocab()
    rm = train_reward(
        RewardModel.from_policy(sft), vocab, pairs, c.reward, run.metrics("reward"), run.path("ckpt", "rm-state.mmrl"), args.stop_after
    )
    total = math.ceil(len(pairs) / c.reward.batch_size) * c.reward.epochs
    if _interrupted("train-rm", args.stop_after, total):
        return
    rm.save(run.path("ckpt", "rm.mmrl"))
    acc = pairwise_accuracy(rm, vocab, pairs)
    run.mark("train-rm", {"steps": total, "pairwise_accuracy": acc})
    print(f"train-rm: {total} steps, pairwise accuracy {acc:.4f} on {len(pairs)} pairs")


def _aligned_start(run: Run, value_head: bool):
    from .alignment import ReferencePolicy
    from .numerics import RngState

    sft = _load_policy(run, "sft")
    ref = ReferencePolicy(sft)
    policy = sft.clone()
    policy.value_head = value_head
    policy.attach_lora(run.config.model.lora_rank, rng=RngState(run.config.model.seed).child("lora"))
    return policy, ref


def cmd_ppo(run: Run, args) -> None:
    from .alignment import RewardModel, ppo_train
    from .model import save_model
    from .sft import build_prompt, prompt_ids

    c = run.config
    rm_path = run.require("ckpt/rm.mmrl", "train-rm")
    policy, ref = _aligned_start(run, value_head=True)
    rm = RewardModel.load(rm_path)
    rm.freeze()
    vocab = _vocab()
    samples = _pref_samples(run)
    prompts = [prompt_ids(vocab, build_prompt(s, c.sft.setting)) for s in samples]
    images = [s.image for s in samples] if c.sft.setting.has_image else None
    policy = ppo_train(policy, ref, rm, vocab, prompts, images, c.ppo, run.metrics("ppo"), run.path("ckpt", "ppo-state.mmrl"), args.stop_after)
    if _interrupted("ppo", args.stop_after, c.ppo.steps):
        return
    save_model(policy, run.path("ckpt", "ppo.mmrl"))
    run.mark("ppo", {"steps": c.ppo.steps})
    print(f"ppo: {c.ppo.steps} steps -> {run.path('ckpt', 'ppo.mmrl')}")


def cmd_dpo(run: Run, args) -> None:
    from .alignment import dpo_train
    from .model import save_model
    from .preference import read_pairs

    c = run.config
    pairs = read_pairs(run.require("pairs.jsonl", "make-pairs"))
    policy, ref = _aligned_start(run, value_head=False)
    policy = dpo_train(policy, ref, _vocab(), pairs, c.dpo, run.metrics("dpo"), run.path("ckpt", "dpo-state.mmrl"), args.stop_after)
    total = math.ceil(len(pairs) / c.dpo.batch_size) * c.dpo.epochs
    if _interrupted("dpo", args.stop_after, total):
        return
    save_model(policy, run.path("ckpt", "dpo.mmrl"))
    run.mark("dpo", {"steps": total})
    print(f"dpo: {total} steps -> {run.path('ckpt', 'dpo.mmrl')}")


def cmd_eval(run: Run, args) -> None:
    from .evalharness import CellOutcome, emit_report, evaluate

    c = run.config
    name = args.policy
    if name == "auto":
        name = next((s for s in ("ppo", "dpo") if run.path("ckpt", f"{s}.mmrl").exists()), "sft")
    marker = f"eval-{name}"
    if run.done(marker):
        print(f"eval: {name} already complete")
        return
    model = _load_policy(run, name)
    samples = _test(run) if c.eval.split == "test" else _train(run)
    setting = c.sft.setting
    res = evaluate(model, _vocab(), samples, setting, name != "sft", c.eval.constrained, c.eval.max_new_tokens, c.model.seed)
    out = run.path("eval", f"{name}-{setting.short}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(res.to_dict(), sort_keys=True))
    emit_report([CellOutcome(setting.value, name != "sft", c.model.seed, res)], run.path("eval", name))
    run.mark(marker, {"accuracy": res.accuracy, "n": res.n_total})
    print(f"eval: {name} {setting.value} accuracy {res.accuracy:.4f} ({res.n_correct}/{res.n_total}), parse-fail {res.parse_fail_rate:.4f}")


def cmd_ablate(run: Run, args) -> None:
    from .evalharness import emit_report, run_ablation

    outcomes = run_ablation(_train(run), _test(run), _vocab(), run.config, run.path("ablation"))
    emit_report(outcomes, run.root)
    failed = [o for o in outcomes if o.result is None]
    if failed:
        print(f"ablate: {len(failed)} of {len(outcomes)} cells failed; see report.txt")
    else:
        run.mark("ablate", {"cells": len(outcomes)})
    print(run.path("report.txt").read_text(), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "sft": cmd_sft,
    "gen-candidates": cmd_gen_candidates,
    "rank": cmd_rank,
    "make-pairs": cmd_make_pairs,
    "train-rm": cmd_train_rm,
    "ppo": cmd_ppo,
    "dpo": cmd_dpo,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prefalign", description="Desk-scale multimodal preference-alignment pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file (may be empty)")
        sp.add_argument("--run-dir", help="run directory (default runs/<config name>)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--log-level", default="WARNING")
        if name in ("sft", "train-rm", "ppo", "dpo"):
            sp.add_argument("--stop-after", type=int, default=None, help="halt after N optimizer steps (resumable)")
        if name == "eval":
            sp.add_argument("--policy", choices=("auto", "sft", "ppo", "dpo"), default="auto")
    return ap


def _fail(kind: str, message: str, **fields) -> int:
    print(json.dumps({"error": kind, "message": message, **fields}, sort_keys=True), file=sys.stderr)
    return 2


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
    except FileNotFoundError:
        return _fail("config_error", f"config file {args.config} not found")
    except ConfigError as e:
        return _fail("config_error", str(e))
    root = Path(args.run_dir) if args.run_dir else Path("runs") / Path(args.config).stem
    try:
        run = open_run(root, config)
        if args.command != "eval" and run.done(args.command):
            print(f"{args.command}: already complete")
            return 0
        COMMANDS[args.command](run, args)
    except StageError as e:
        return _fail(e.kind, str(e), **e.fields)
    except Exception as e:  # one machine-readable line instead of a traceback
        log.debug("stage failed", exc_info=True)
        return _fail(type(e).__name__, str(e), stage=args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
