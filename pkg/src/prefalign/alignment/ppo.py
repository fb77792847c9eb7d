"""Token-level PPO against a reward model with a KL leash to a frozen reference."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .. import numerics as nx
from ..model import PolicyModel, Sampling, Vocab, generate_batch
from ..numerics import AdamState, NumericError, RngState
from ..runs import MetricsLog, NullLog, has_state, load_train_state, save_train_state
from ..sft import Batch, TrainingAborted
from .common import ReferencePolicy, sequence_batch, token_logprobs
from .reward import RewardModel

log = logging.getLogger(__name__)

# scorer(rows of (prompt ids, response ids), images) -> rewards
Scorer = Callable[[list[tuple[list[int], list[int]]], object], np.ndarray]


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    kl_coef: float = 0.02
    gamma: float = 1.0
    gae_lambda: float = 0.95
    ppo_epochs: int = 4
    rollout_batch: int = 16
    minibatch: int = 16
    lr: float = 1e-4
    max_new_tokens: int = 24
    steps: int = 300
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    temperature: float = 1.0
    max_grad_norm: float | None = 1.0
    seed: int = 0
    ckpt_every: int = 50

    def __post_init__(self) -> None:
        if not 0 < self.clip_eps < 1:
            raise ValueError(f"ppo.clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.kl_coef < 0:
            raise ValueError(f"ppo.kl_coef must be >= 0, got {self.kl_coef}")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError(f"ppo.gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"ppo.gamma must be in [0, 1], got {self.gamma}")
        for k in ("ppo_epochs", "rollout_batch", "minibatch", "max_new_tokens", "steps"):
            if getattr(self, k) < 1:
                raise ValueError(f"ppo.{k} must be >= 1")
        if not self.lr > 0 or not self.temperature > 0:
            raise ValueError("ppo.lr and ppo.temperature must be > 0")


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns for one trajectory; the value after the last token is 0."""
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nxt = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + gamma * nxt - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + values


def whiten(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    sel = x[mask > 0]
    if sel.size < 2:
        return x * mask
    mu = sel.mean()
    sd = sel.std()
    return np.where(mask > 0, (x - mu) / (sd + 1e-12), 0.0)


def clipped_surrogate(ratio: nx.Tensor, adv: np.ndarray, eps: float) -> nx.Tensor:
    """Elementwise min(rho * A, clip(rho, 1-eps, 1+eps) * A)."""
    return nx.minimum(ratio * adv, nx.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


@dataclass
class Rollout:
    batch: Batch
    mask: np.ndarray  # (B, T) response positions
    logp_old: np.ndarray
    logp_ref: np.ndarray
    values: np.ndarray
    scores: np.ndarray  # terminal reward-model score per row
    advantages: np.ndarray
    returns: np.ndarray
    kl: np.ndarray  # per-row summed KL proxy
    lengths: np.ndarray


def rm_scorer(rm: RewardModel, vocab: Vocab) -> Scorer:
    def score(rows, images):
        return rm.score_tokens(rows, vocab, images)

    return score


def collect_rollout(
    policy: PolicyModel,
    ref: ReferencePolicy,
    scorer: Scorer,
    vocab: Vocab,
    prompts: Sequence[list[int]],
    images,
    config: PpoConfig,
    rngs: Sequence[RngState],
) -> Rollout:
    sampling = Sampling(temperature=config.temperature, top_k=0)
    gens = generate_batch(policy, vocab, prompts, images, sampling, rngs, config.max_new_tokens)
    responses = [g.tokens + ([vocab.eos_id] if g.finished else []) for g in gens]
    rows = [(list(p), r) for p, r in zip(prompts, responses)]
    img_list = None if images is None else list(images)
    batch = sequence_batch(vocab, rows, img_list)
    mask = batch.weights
    with nx.no_grad():
        lp, out = token_logprobs(policy, batch, want_values=True)
        logp_old = lp.data * mask
        values = out.values.data * mask
    logp_ref = ref.token_logprobs(batch) * mask
    scores = np.asarray(scorer(rows, img_list), dtype=np.float64)
    kl_tok = (logp_old - logp_ref) * mask
    adv = np.zeros_like(mask)
    ret = np.zeros_like(mask)
    for i in range(len(rows)):
        s, n = int(batch.resp_start[i]), len(responses[i])
        rew = -config.kl_coef * kl_tok[i, s : s + n]
        rew[-1] += scores[i]
        a, r = gae(rew, values[i, s : s + n], config.gamma, config.gae_lambda)
        adv[i, s : s + n] = a
        ret[i, s : s + n] = r
    return Rollout(
        batch, mask, logp_old, logp_ref, values, scores, whiten(adv, mask), ret, kl_tok.sum(axis=1),
        np.array([len(r) for r in responses]),
    )


def _sub(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(
        batch.inputs[idx], batch.labels[idx], batch.weights[idx],
        None if batch.images is None else batch.images[idx], batch.resp_start[idx], batch.lengths[idx],
    )


def ppo_losses(policy: PolicyModel, ro: Rollout, idx: np.ndarray, config: PpoConfig):
    mb = _sub(ro.batch, idx)
    mask = ro.mask[idx]
    w = mask / mask.sum()
    logp, out = token_logprobs(policy, mb, want_values=True)
    ratio = nx.exp(logp - ro.logp_old[idx])
    pg = -(clipped_surrogate(ratio, ro.advantages[idx], config.clip_eps) * w).sum()
    v_err = out.values - ro.returns[idx]
    v_loss = (v_err * v_err * w).sum()
    logsm = nx.log_softmax(out.logits)
    ent_tok = -(nx.exp(logsm) * logsm).sum(axis=2)
    entropy = (ent_tok * w).sum()
    total = pg + v_loss * config.vf_coef - entropy * config.ent_coef
    clip_frac = float((np.abs(ratio.data - 1.0)[mask > 0] > config.clip_eps).mean())
    return total, {"pg_loss": pg.item(), "value_loss": v_loss.item(), "entropy": entropy.item(), "clip_fraction": clip_frac}


class PpoTrainer:
    """Holds the policy, frozen reference, scorer and optimizer across steps."""

    def __init__(self, policy: PolicyModel, ref: ReferencePolicy, scorer: Scorer, vocab: Vocab, config: PpoConfig):
        if not policy.value_head:
            raise ValueError("ppo: the policy needs its value head enabled")
        self.policy = policy
        self.ref = ref
        self.scorer = scorer
        self.vocab = vocab
        self.config = config
        self.adam = AdamState(lr=config.lr)
        self.step_count = 0
        self._skips = 0

    def step(self, prompts: Sequence[list[int]], images=None, rng: RngState | None = None) -> dict:
        c = self.config
        rng = rng or RngState(c.seed).child("ppo", self.step_count)
        rngs = [rng.child("rollout", i) for i in range(len(prompts))]
        ro = collect_rollout(self.policy, self.ref, self.scorer, self.vocab, prompts, images, c, rngs)
        if self.step_count == 0 and "value_b" in self.policy.params:
            # start the value baseline at the first batch's mean score; a zero baseline makes early
            # advantages track token position instead of sample quality. Sampling ignores the value
            # head, so re-collecting with the same streams gives the same responses.
            self.policy.params["value_b"].data[:] = ro.scores.mean()
            ro = collect_rollout(self.policy, self.ref, self.scorer, self.vocab, prompts, images, c, rngs)
        params = self.policy.trainable()
        n = len(prompts)
        stats: dict[str, list[float]] = {}
        for ep in range(c.ppo_epochs):
            perm = rng.child("minibatch", ep).permutation(n)
            for s in range(0, n, c.minibatch):
                idx = perm[s : s + c.minibatch]
                try:
                    loss, st = ppo_losses(self.policy, ro, idx, c)
                    nx.backward(loss)
                    nx.adam_step(params, self.adam, c.max_grad_norm)
                    self._skips = 0
                except NumericError as e:
                    nx.reset_tape()
                    self._skips += 1
                    log.warning("ppo: skipped minibatch at step %d (%s)", self.step_count, e)
                    if self._skips >= 3:
                        raise TrainingAborted(f"ppo: 3 consecutive non-finite minibatches at step {self.step_count}") from e
                    continue
                finally:
                    nx.zero_grad(params)
                for k, v in st.items():
                    stats.setdefault(k, []).append(v)
        self.step_count += 1
        out = {
            "step": self.step_count,
            "mean_reward": float(ro.scores.mean()),
            "kl_total": float(ro.kl.mean()),
            "response_len": float(ro.lengths.mean()),
        }
        for k, v in stats.items():
            out[k] = float(np.mean(v))
        return out


def ppo_step(
    policy: PolicyModel, ref: ReferencePolicy, rm: RewardModel | Scorer, vocab: Vocab, prompts, images, config: PpoConfig,
    trainer: PpoTrainer | None = None,
) -> dict:
    scorer = rm_scorer(rm, vocab) if isinstance(rm, RewardModel) else rm
    trainer = trainer or PpoTrainer(policy, ref, scorer, vocab, config)
    return trainer.step(prompts, images)


def ppo_train(
    policy: PolicyModel,
    ref: ReferencePolicy,
    rm: RewardModel | Scorer,
    vocab: Vocab,
    prompts: Sequence[list[int]],
    images,
    config: PpoConfig,
    metrics: MetricsLog | None = None,
    state_path=None,
    stop_after: int | None = None,
) -> PolicyModel:
    """Run ``config.steps`` PPO iterations, cycling through shuffled prompt batches."""
    metrics = metrics or NullLog("ppo")
    scorer = rm_scorer(rm, vocab) if isinstance(rm, RewardModel) else rm
    trainer = PpoTrainer(policy, ref, scorer, vocab, config)
    if state_path is not None and has_state(state_path):
        policy, st = load_train_state(state_path)
        trainer.policy = policy
        trainer.adam, trainer.step_count = st.adam, st.step
        metrics.truncate_after(st.step)
        log.info("ppo: resumed at step %d", st.step)
    else:
        metrics.drop_stage()
    n = len(prompts)
    imgs = None if images is None else np.asarray(images, dtype=np.float64)
    root = RngState(config.seed).child("ppo")
    per_cycle = max(1, n // config.rollout_batch)
    while trainer.step_count < config.steps:
        step = trainer.step_count
        cycle, j = divmod(step, per_cycle)
        order = root.child("order", cycle).permutation(n)
        idx = order[j * config.rollout_batch : (j + 1) * config.rollout_batch]
        if len(idx) < config.rollout_batch:  # fewer prompts than one batch
            idx = root.child("fill", step).integers(0, n, config.rollout_batch)
        rec = trainer.step([prompts[i] for i in idx], None if imgs is None else imgs[idx], root.child("step", step))
        metrics.write(**rec)
        if state_path is not None and (trainer.step_count % config.ckpt_every == 0 or trainer.step_count == config.steps):
            save_train_state(state_path, trainer.policy, trainer.adam, trainer.step_count)
        if stop_after is not None and trainer.step_count >= stop_after:
            break
    ref.verify()
    return trainer.policy
