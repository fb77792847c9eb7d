"""Scalar reward model on a policy-shaped trunk, trained with the pairwise logistic loss."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..model import PolicyModel, Vocab, load_model, save_model
from ..numerics import AdamState, NumericError, RngState, Tensor
from ..preference import PreferencePair
from ..runs import MetricsLog, NullLog, has_state, load_train_state, save_train_state
from ..sft import Batch, TrainingAborted
from .common import encode_prompt, encode_response, sequence_batch

log = logging.getLogger(__name__)


@dataclass
class RewardConfig:
    lr: float = 1e-4
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    ckpt_every: int = 200

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("RewardConfig requires epochs >= 1, batch_size >= 1, lr > 0")


class RewardModel:
    """r(prompt, response) = w . h_last + b, with h_last the final-position hidden state."""

    def __init__(self, backbone: PolicyModel, head_w: np.ndarray | None = None, head_b: np.ndarray | None = None):
        self.backbone = backbone
        d = backbone.config.d_model
        self.head_w = Tensor(np.zeros((d, 1)) if head_w is None else head_w, requires_grad=True, name="reward_w")
        self.head_b = Tensor(np.zeros(1) if head_b is None else head_b, requires_grad=True, name="reward_b")

    @classmethod
    def from_policy(cls, policy: PolicyModel) -> "RewardModel":
        trunk = policy.clone()
        if trunk.adapters:
            trunk.merge_lora()
        trunk.value_head = False
        trunk.unfreeze()
        trunk.freeze(["value_w", "value_b"])
        return cls(trunk)

    def params(self) -> dict[str, Tensor]:
        out = dict(self.backbone.trainable())
        out["reward_w"] = self.head_w
        out["reward_b"] = self.head_b
        return out

    def freeze(self) -> None:
        self.backbone.freeze()
        self.head_w.requires_grad = False
        self.head_b.requires_grad = False

    def score_batch(self, batch: Batch) -> Tensor:
        out = self.backbone.forward(batch.inputs, batch.images, want_hidden=True)
        rows = np.arange(batch.inputs.shape[0])
        last = out.hidden[rows, batch.lengths - 1]
        return (last @ self.head_w + self.head_b).reshape(-1)

    def score_tokens(self, rows: Sequence[tuple[list[int], list[int]]], vocab: Vocab, images=None) -> np.ndarray:
        with nx.no_grad():
            return self.score_batch(sequence_batch(vocab, rows, images)).data.copy()

    def save(self, path) -> None:
        save_model(self.backbone, path, {"reward.w": self.head_w.data, "reward.b": self.head_b.data})

    @classmethod
    def load(cls, path) -> "RewardModel":
        model, rest = load_model(path)
        if "reward.w" not in rest:
            raise ValueError(f"{path} is not a reward-model checkpoint (no reward head)")
        return cls(model, rest["reward.w"], rest["reward.b"])


def rm_score(rm: RewardModel, vocab: Vocab, prompt: str, image, response: str) -> float:
    rows = [(encode_prompt(vocab, prompt), encode_response(vocab, response))]
    return float(rm.score_tokens(rows, vocab, None if image is None else [image])[0])


def encode_pairs(vocab: Vocab, pairs: Sequence[PreferencePair]):
    out = []
    for p in pairs:
        prompt = encode_prompt(vocab, p.prompt)
        out.append((prompt, encode_response(vocab, p.chosen), encode_response(vocab, p.rejected), p.image))
    return out


def pair_batch(vocab: Vocab, enc, rows) -> Batch:
    """Chosen sequences in the first half of the batch, rejected in the second."""
    seqs = [(enc[i][0], enc[i][1]) for i in rows] + [(enc[i][0], enc[i][2]) for i in rows]
    imgs = [enc[i][3] for i in rows] * 2
    return sequence_batch(vocab, seqs, imgs)


def pairwise_loss(rm: RewardModel, batch: Batch) -> tuple[Tensor, np.ndarray]:
    """Mean -log sigmoid(r_chosen - r_rejected) and the per-pair margins."""
    r = rm.score_batch(batch)
    n = r.shape[0] // 2
    margin = r[:n] - r[n:]
    return -nx.log_sigmoid(margin).mean(), margin.data.copy()


def pairwise_accuracy(rm: RewardModel, vocab: Vocab, pairs: Sequence[PreferencePair], batch_size: int = 32) -> float:
    enc = encode_pairs(vocab, pairs)
    wins = 0
    with nx.no_grad():
        for s in range(0, len(enc), batch_size):
            _, m = pairwise_loss(rm, pair_batch(vocab, enc, range(s, min(s + batch_size, len(enc)))))
            wins += int((m > 0).sum())
    return wins / len(enc)


def train_reward(
    rm: RewardModel,
    vocab: Vocab,
    pairs: Sequence[PreferencePair],
    config: RewardConfig,
    metrics: MetricsLog | None = None,
    state_path=None,
    stop_after: int | None = None,
) -> RewardModel:
    if not pairs:
        raise ValueError("train_reward: no preference pairs")
    for p in pairs:
        p.validate()
    metrics = metrics or NullLog("reward")
    enc = encode_pairs(vocab, pairs)
    adam = AdamState(lr=config.lr)
    step = 0
    if state_path is not None and has_state(state_path):
        backbone, st = load_train_state(state_path)
        rm = RewardModel(backbone, st.tensors["reward_w"], st.tensors["reward_b"])
        adam, step = st.adam, st.step
        metrics.truncate_after(step)
        log.info("train_reward: resumed at step %d", step)
    else:
        metrics.drop_stage()

    n = len(enc)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    root = RngState(config.seed).child("reward")
    params = rm.params()
    while step < total:
        epoch, b_idx = divmod(step, per_epoch)
        order = root.child("epoch", epoch).permutation(n)
        rows = order[b_idx * config.batch_size : (b_idx + 1) * config.batch_size]
        try:
            loss, margin = pairwise_loss(rm, pair_batch(vocab, enc, rows))
            nx.backward(loss)
            nx.adam_step(params, adam)
        except NumericError as e:
            nx.reset_tape()
            bad = [pairs[i].id for i in rows]
            if state_path is not None:
                dump = {"step": step, "pair_ids": bad, "error": str(e)}
                Path(str(state_path) + ".abort.json").write_text(json.dumps(dump, indent=2))
            raise TrainingAborted(f"train_reward: non-finite loss at step {step} in pairs {bad}: {e}") from e
        finally:
            nx.zero_grad(params)
        step += 1
        metrics.write(step=step, epoch=epoch, loss=loss.item(), accuracy=float((margin > 0).mean()), lr=adam.lr)
        if state_path is not None and (step % config.ckpt_every == 0 or step == total):
            save_train_state(
                state_path, rm.backbone, adam, step, tensors={"reward_w": rm.head_w.data, "reward_b": rm.head_b.data}
            )
        if stop_after is not None and step >= stop_after:
            break
    return rm
