"""Direct preference optimisation on summed response log-probabilities."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..model import PolicyModel, Vocab
from ..numerics import AdamState, NumericError, RngState
from ..preference import PreferencePair
from ..runs import MetricsLog, NullLog, has_state, load_train_state, save_train_state
from ..sft import Batch, TrainingAborted
from .common import ReferencePolicy, sequence_logprob
from .reward import encode_pairs, pair_batch

log = logging.getLogger(__name__)


@dataclass
class DpoConfig:
    beta_dpo: float = 0.1
    lr: float = 1e-4
    epochs: int = 2
    batch_size: int = 8
    seed: int = 0
    ckpt_every: int = 200

    def __post_init__(self) -> None:
        if not self.beta_dpo > 0:
            raise ValueError(f"dpo.beta_dpo must be > 0, got {self.beta_dpo}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("DpoConfig requires epochs >= 1, batch_size >= 1, lr > 0")


def dpo_loss(policy: PolicyModel, ref: ReferencePolicy, batch: Batch, beta: float):
    """Mean -log sigmoid(beta * inner) and the per-pair inner brackets.

    ``batch`` holds chosen rows followed by rejected rows.
    """
    lp = sequence_logprob(policy, batch)
    lr = ref.sequence_logprob(batch)
    n = batch.inputs.shape[0] // 2
    delta = lp - lr
    inner = delta[:n] - delta[n:]
    return -nx.log_sigmoid(inner * beta).mean(), inner.data.copy()


def dpo_train(
    policy: PolicyModel,
    ref: ReferencePolicy,
    vocab: Vocab,
    pairs: Sequence[PreferencePair],
    config: DpoConfig,
    metrics: MetricsLog | None = None,
    state_path=None,
    stop_after: int | None = None,
) -> PolicyModel:
    if not pairs:
        raise ValueError("dpo_train: no preference pairs")
    for p in pairs:
        p.validate()
    metrics = metrics or NullLog("dpo")
    enc = encode_pairs(vocab, pairs)
    adam = AdamState(lr=config.lr)
    step = 0
    if state_path is not None and has_state(state_path):
        policy, st = load_train_state(state_path)
        adam, step = st.adam, st.step
        metrics.truncate_after(step)
        log.info("dpo: resumed at step %d", step)
    else:
        metrics.drop_stage()
    n = len(enc)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    root = RngState(config.seed).child("dpo")
    params = policy.trainable()
    while step < total:
        epoch, b_idx = divmod(step, per_epoch)
        order = root.child("epoch", epoch).permutation(n)
        rows = order[b_idx * config.batch_size : (b_idx + 1) * config.batch_size]
        try:
            loss, inner = dpo_loss(policy, ref, pair_batch(vocab, enc, rows), config.beta_dpo)
            nx.backward(loss)
            nx.adam_step(params, adam)
        except NumericError as e:
            nx.reset_tape()
            bad = [pairs[i].id for i in rows]
            if state_path is not None:
                dump = {"step": step, "pair_ids": bad, "error": str(e)}
                Path(str(state_path) + ".abort.json").write_text(json.dumps(dump, indent=2))
            raise TrainingAborted(f"dpo: non-finite loss at step {step} in pairs {bad}: {e}") from e
        finally:
            nx.zero_grad(params)
        step += 1
        margin = float(config.beta_dpo * inner.mean())
        metrics.write(step=step, epoch=epoch, loss=loss.item(), margin=margin, lr=adam.lr)
        if state_path is not None and (step % config.ckpt_every == 0 or step == total):
            save_train_state(state_path, policy, adam, step)
        if stop_after is not None and step >= stop_after:
            break
    ref.verify()
    return policy


def epoch_margins(records: Sequence[dict]) -> dict[int, float]:
    """Mean logged implicit-reward margin per epoch."""
    by: dict[int, list[float]] = {}
    for r in records:
        by.setdefault(int(r["epoch"]), []).append(float(r["margin"]))
    return {e: float(np.mean(v)) for e, v in sorted(by.items())}
