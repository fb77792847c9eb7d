"""Candidate sampling, ranking (offline oracle or external judge) and top-vs-rest pairs."""

from __future__ import annotations

import json
import logging
import os
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import httpx

from .evalharness import explanation_of, extract_answer
from .model import PolicyModel, Sampling, Vocab, generate_batch
from .numerics import RngState
from .sft import InputSetting, build_prompt, prompt_ids
from .taskgen import McqSample

log = logging.getLogger(__name__)

DEFAULT_K = 5
RANKER_KEY_ENV = "PREFALIGN_RANKER_KEY"
RUBRIC = (
    "Rank the candidate answers to the multiple-choice physics question from best to worst. "
    "Judge the correctness of the chosen option first, then the coherence of the reasoning "
    "and how closely it follows the prompt. Reply with JSON {\"order\": [...]} listing every "
    "candidate index exactly once, best first."
)


class PreferenceError(ValueError):
    pass


@dataclass
class Candidate:
    text: str
    source: str
    seed: int


@dataclass
class CandidateSet:
    sample_id: str
    prompt: str
    image: list[list[float]] | None
    candidates: list[Candidate]

    def __post_init__(self) -> None:
        self.candidates = [c if isinstance(c, Candidate) else Candidate(**c) for c in self.candidates]
        tags = [c.source for c in self.candidates]
        if len(set(tags)) != len(tags):
            raise PreferenceError(f"{self.sample_id}: candidate source tags are not unique: {tags}")

    @property
    def k(self) -> int:
        return len(self.candidates)

    def texts(self) -> list[str]:
        return [c.text for c in self.candidates]


@dataclass
class Ranking:
    order: list[int]
    ranker_id: str
    rationale: str | None = None
    fallback: bool = False

    def validate(self, k: int) -> "Ranking":
        if sorted(self.order) != list(range(k)):
            raise PreferenceError(f"ranking {self.order} is not a permutation of range({k})")
        return self


@dataclass
class PreferencePair:
    id: str
    prompt: str
    image: list[list[float]] | None
    chosen: str
    rejected: str
    chosen_rank: int
    rejected_rank: int
    chosen_source: str
    rejected_source: str

    def validate(self, where: str = "") -> "PreferencePair":
        if self.chosen == self.rejected:
            raise PreferenceError(f"{where}pair {self.id}: chosen and rejected are identical")
        if self.chosen_rank != 1:
            raise PreferenceError(f"{where}pair {self.id}: chosen_rank must be 1, got {self.chosen_rank}")
        if not self.rejected_rank > self.chosen_rank:
            raise PreferenceError(f"{where}pair {self.id}: rejected_rank {self.rejected_rank} must exceed chosen_rank")
        return self


# --------------------------------------------------------------------------
# candidate generation
# --------------------------------------------------------------------------


@dataclass
class CandidateReport:
    sets: list[CandidateSet]
    dropped: list[str] = field(default_factory=list)  # sample ids with a failed slot


def candidate_slots(checkpoint_names: Sequence[str], seeds: Sequence[int], k: int) -> list[tuple[int, int, str]]:
    """First ``k`` entries of checkpoints x seeds as (checkpoint index, seed, source tag)."""
    if k < 1:
        raise PreferenceError(f"K must be >= 1, got {k}")
    if not checkpoint_names:
        raise PreferenceError("generate_candidates needs at least one checkpoint")
    slots = []
    for ci, name in enumerate(checkpoint_names):
        for s in seeds:
            tag = f"seed-{s}" if len(checkpoint_names) == 1 else f"{name}/seed-{s}"
            slots.append((ci, int(s), tag))
    if len(slots) < k:
        raise PreferenceError(f"{len(checkpoint_names)} checkpoint(s) x {len(seeds)} seed(s) cannot fill K={k} slots")
    return slots[:k]


def generate_candidates(
    checkpoints: Sequence[tuple[str, PolicyModel]],
    vocab: Vocab,
    samples: Sequence[McqSample],
    k: int = DEFAULT_K,
    seeds: Sequence[int] | None = None,
    setting: InputSetting = InputSetting.TEXT_IMAGE_CAPTION,
    sampling: Sampling | None = None,
    max_new_tokens: int = 32,
    workers: int = 1,
) -> CandidateReport:
    """K sampled responses per sample; slot ``j`` of sample ``s`` depends only on (seed_j, s.id)."""
    seeds = list(range(k)) if seeds is None else list(seeds)
    slots = candidate_slots([name for name, _ in checkpoints], seeds, k)
    sampling = sampling or Sampling()
    setting = InputSetting(setting)
    prompts = [build_prompt(s, setting) for s in samples]
    ids = [prompt_ids(vocab, p) for p in prompts]
    images = [s.image for s in samples] if setting.has_image else None

    def run_slot(slot):
        ci, seed, _ = slot
        model = checkpoints[ci][1]
        rngs = [RngState(seed).child("candidate", s.id) for s in samples]
        try:
            gens = generate_batch(model, vocab, ids, images, sampling, rngs, max_new_tokens)
            return [g.text for g in gens]
        except Exception as e:  # isolate the failing samples
            log.warning("candidate slot seed=%d failed as a batch (%s); retrying per sample", seed, e)
        out: list[str | None] = []
        for i, s in enumerate(samples):
            try:
                img = None if images is None else [images[i]]
                g = generate_batch(model, vocab, [ids[i]], img, sampling, [RngState(seed).child("candidate", s.id)], max_new_tokens)
                out.append(g[0].text)
            except Exception as e:
                log.warning("candidate generation failed for %s slot seed=%d: %s", s.id, seed, e)
                out.append(None)
        return out

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_slot = list(pool.map(run_slot, slots))

    report = CandidateReport([])
    for i, s in enumerate(samples):
        texts = [per_slot[j][i] for j in range(len(slots))]
        if any(t is None for t in texts):
            report.dropped.append(s.id)
            continue
        cands = [Candidate(t, tag, seed) for t, (_, seed, tag) in zip(texts, slots)]
        report.sets.append(CandidateSet(s.id, prompts[i].text, images[i] if images else None, cands))
    if report.dropped:
        log.warning("generate_candidates: dropped %d sample(s) with failed slots", len(report.dropped))
    return report


# --------------------------------------------------------------------------
# ranking
# --------------------------------------------------------------------------


def token_overlap(a: str, b: str) -> float:
    """Multiset Jaccard of whitespace tokens; 0 when both are empty."""
    ca, cb = Counter(a.split()), Counter(b.split())
    union = sum((ca | cb).values())
    if union == 0:
        return 0.0
    return sum((ca & cb).values()) / union


def oracle_score(text: str, gold: McqSample) -> float:
    correct = extract_answer(text) == gold.answer
    return 2.0 * correct + token_overlap(explanation_of(text), gold.explanation)


def rank_oracle(cset: CandidateSet, gold: McqSample) -> Ranking:
    if gold.id != cset.sample_id:
        raise PreferenceError(f"rank_oracle: gold {gold.id} does not match candidate set {cset.sample_id}")
    scores = [oracle_score(c.text, gold) for c in cset.candidates]
    order = sorted(range(cset.k), key=lambda i: (-scores[i], i))
    return Ranking(order, "oracle", rationale=json.dumps([round(s, 6) for s in scores]))


@dataclass
class RankerConfig:
    endpoint: str | None = None
    retries: int = 2
    timeout: float = 10.0
    concurrency: int = 4


class ExternalRanker:
    """Client for a remote judge that returns ``{"order": [...]}``.

    Invalid replies and transport errors are retried ``retries`` times, then
    the offline oracle ranks the set and ``downgrades`` is incremented.
    """

    def __init__(self, config: RankerConfig, transport: httpx.BaseTransport | None = None, api_key: str | None = None):
        if not config.endpoint:
            raise PreferenceError("external ranker needs ranker.endpoint to be configured")
        if config.retries < 0:
            raise PreferenceError("ranker retries must be >= 0")
        self.config = config
        key = api_key if api_key is not None else os.environ.get(RANKER_KEY_ENV)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(transport=transport, timeout=config.timeout, headers=headers)
        self._lock = threading.Lock()
        self.downgrades = 0
        self.requests = 0

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _ask(self, cset: CandidateSet) -> list[int]:
        body = {"prompt": cset.prompt, "candidates": cset.texts(), "instruction": RUBRIC}
        with self._lock:
            self.requests += 1
        resp = self._client.post(self.config.endpoint, json=body)
        resp.raise_for_status()
        order = resp.json()["order"]
        if not isinstance(order, list) or not all(isinstance(i, int) for i in order):
            raise PreferenceError(f"reply order is not a list of ints: {order!r}")
        Ranking(order, "external").validate(cset.k)
        return order

    def rank(self, cset: CandidateSet, gold: McqSample) -> Ranking:
        last = None
        for attempt in range(self.config.retries + 1):
            try:
                return Ranking(self._ask(cset), "external")
            except (httpx.HTTPError, PreferenceError, ValueError, KeyError, TypeError) as e:
                last = e
                log.debug("ranker attempt %d for %s failed: %s", attempt + 1, cset.sample_id, e)
        with self._lock:
            self.downgrades += 1
        log.warning("ranker fell back to oracle for %s after %d attempts: %s", cset.sample_id, self.config.retries + 1, last)
        r = rank_oracle(cset, gold)
        r.fallback = True
        r.ranker_id = "oracle-fallback"
        return r


def rank_external(cset: CandidateSet, gold: McqSample, ranker: ExternalRanker) -> Ranking:
    return ranker.rank(cset, gold)


def rank_all(
    csets: Sequence[CandidateSet], golds: dict[str, McqSample], ranker: ExternalRanker | None = None
) -> list[Ranking]:
    """Rank every set, in order; external requests use bounded concurrency."""
    missing = [c.sample_id for c in csets if c.sample_id not in golds]
    if missing:
        raise PreferenceError(f"no gold sample for {len(missing)} candidate set(s), e.g. {missing[0]}")
    if ranker is None:
        return [rank_oracle(c, golds[c.sample_id]) for c in csets]
    with ThreadPoolExecutor(max_workers=max(1, ranker.config.concurrency)) as pool:
        return list(pool.map(lambda c: ranker.rank(c, golds[c.sample_id]), csets))


# --------------------------------------------------------------------------
# pairs
# --------------------------------------------------------------------------


@dataclass
class PairStats:
    samples: int = 0
    emitted: int = 0
    dropped_duplicate: int = 0
    skipped_small: int = 0


def make_pairs(cset: CandidateSet, ranking: Ranking, stats: PairStats | None = None) -> list[PreferencePair]:
    """Pair the top-ranked candidate with each of the others (K-1 pairs minus duplicates)."""
    stats = stats if stats is not None else PairStats()
    stats.samples += 1
    if cset.k < 2:
        log.warning("make_pairs: %s has K=%d < 2 candidates; no pairs", cset.sample_id, cset.k)
        stats.skipped_small += 1
        return []
    ranking.validate(cset.k)
    best = cset.candidates[ranking.order[0]]
    out = []
    for rank, idx in enumerate(ranking.order[1:], start=2):
        other = cset.candidates[idx]
        if other.text == best.text:
            stats.dropped_duplicate += 1
            continue
        out.append(
            PreferencePair(
                id=f"{cset.sample_id}-r{rank}",
                prompt=cset.prompt,
                image=cset.image,
                chosen=best.text,
                rejected=other.text,
                chosen_rank=1,
                rejected_rank=rank,
                chosen_source=best.source,
                rejected_source=other.source,
            )
        )
    stats.emitted += len(out)
    return out


def build_pairs(csets: Sequence[CandidateSet], rankings: Sequence[Ranking]) -> tuple[list[PreferencePair], PairStats]:
    if len(csets) != len(rankings):
        raise PreferenceError(f"{len(csets)} candidate sets but {len(rankings)} rankings")
    stats = PairStats()
    pairs: list[PreferencePair] = []
    for c, r in zip(csets, rankings):
        pairs += make_pairs(c, r, stats)
    return pairs, stats


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------

_PAIR_FIELDS = tuple(PreferencePair.__dataclass_fields__)


def _dump_jsonl(rows: Iterable[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")
    tmp.replace(path)


def _load_jsonl(path) -> Iterable[tuple[int, dict]]:
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise PreferenceError(f"line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise PreferenceError(f"line {lineno}: expected a JSON object")
            yield lineno, obj


def write_pairs(pairs: Iterable[PreferencePair], path) -> None:
    _dump_jsonl((asdict(p) for p in pairs), path)


def read_pairs(path) -> list[PreferencePair]:
    out = []
    for lineno, obj in _load_jsonl(path):
        where = f"line {lineno}: "
        missing = [f for f in _PAIR_FIELDS if f not in obj]
        if missing:
            raise PreferenceError(f"{where}missing field(s) {missing}")
        extra = sorted(set(obj) - set(_PAIR_FIELDS))
        if extra:
            raise PreferenceError(f"{where}unexpected field(s) {extra}")
        for f in ("chosen_rank", "rejected_rank"):
            if not isinstance(obj[f], int):
                raise PreferenceError(f"{where}{f} must be an integer")
        out.append(PreferencePair(**obj).validate(where))
    return out


def write_candidates(csets: Iterable[CandidateSet], path) -> None:
    _dump_jsonl((asdict(c) for c in csets), path)


def read_candidates(path) -> list[CandidateSet]:
    out = []
    for lineno, obj in _load_jsonl(path):
        try:
            out.append(CandidateSet(**obj))
        except TypeError as e:
            raise PreferenceError(f"line {lineno}: {e}") from None
    return out


def write_rankings(rankings: Iterable[tuple[str, Ranking]], path) -> None:
    _dump_jsonl(({"sample_id": sid, **asdict(r)} for sid, r in rankings), path)


def read_rankings(path) -> list[tuple[str, Ranking]]:
    out = []
    for lineno, obj in _load_jsonl(path):
        sid = obj.pop("sample_id", None)
        if sid is None:
            raise PreferenceError(f"line {lineno}: missing sample_id")
        try:
            out.append((sid, Ranking(**obj)))
        except TypeError as e:
            raise PreferenceError(f"line {lineno}: {e}") from None
    return out
