"""Sequence batching and per-token log-probabilities shared by RM, PPO and DPO."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..model import PolicyModel, Vocab
from ..numerics import Tensor
from ..sft import Batch, make_batch

log = logging.getLogger(__name__)


def encode_prompt(vocab: Vocab, prompt: str) -> list[int]:
    return [vocab.bos_id] + vocab.tokenize(prompt)


def encode_response(vocab: Vocab, response: str, eos: bool = True) -> list[int]:
    return vocab.tokenize(response) + ([vocab.eos_id] if eos else [])


def stack_images(images: Sequence) -> np.ndarray | None:
    """All-or-nothing image batch: every row has an image, or none does."""
    present = [im is not None for im in images]
    if not any(present):
        return None
    if not all(present):
        raise ValueError("a batch mixes rows with and without images")
    return np.asarray(images, dtype=np.float64)


def sequence_batch(vocab: Vocab, rows: Sequence[tuple[list[int], list[int]]], images: Sequence | None = None) -> Batch:
    return make_batch(vocab, rows, None if images is None else stack_images(images))


def token_logprobs(model: PolicyModel, batch: Batch, want_values: bool = False):
    """log pi(label_t | ctx) for every position, plus optional values (B, T)."""
    out = model.forward(batch.inputs, batch.images, want_values=want_values)
    logp = nx.gather(nx.log_softmax(out.logits), batch.labels)
    return logp, out


def sequence_logprob(model: PolicyModel, batch: Batch) -> Tensor:
    """Summed response-token log-probability per row, shape (B,)."""
    logp, _ = token_logprobs(model, batch)
    return (logp * batch.weights).sum(axis=1)


class ReferencePolicy:
    """Frozen copy of a policy whose weights are hash-checked for immutability."""

    def __init__(self, model: PolicyModel):
        self.model = model.clone()
        self.model.freeze()
        for ad in self.model.adapters.values():
            ad.A.requires_grad = False
            ad.B.requires_grad = False
        self.hash = self.model.weight_hash()

    def verify(self) -> None:
        now = self.model.weight_hash()
        if now != self.hash:
            raise RuntimeError(f"reference policy weights changed during alignment ({self.hash[:12]} -> {now[:12]})")

    def token_logprobs(self, batch: Batch) -> np.ndarray:
        with nx.no_grad():
            return token_logprobs(self.model, batch)[0].data

    def sequence_logprob(self, batch: Batch) -> np.ndarray:
        with nx.no_grad():
            return sequence_logprob(self.model, batch).data


@dataclass
class KlEstimate:
    per_token: np.ndarray
    total: float


def kl_estimate(
    policy: PolicyModel, ref: PolicyModel | ReferencePolicy, vocab: Vocab, prompt: list[int], response: list[int], image=None
) -> KlEstimate:
    """Sampled-token KL proxy log pi(t) - log pi_ref(t) along one response."""
    if not response:
        raise ValueError("kl_estimate: empty response")
    ref_model = ref.model if isinstance(ref, ReferencePolicy) else ref
    batch = sequence_batch(vocab, [(list(prompt), list(response))], None if image is None else [image])
    with nx.no_grad():
        lp = token_logprobs(policy, batch)[0].data[0]
        lr = token_logprobs(ref_model, batch)[0].data[0]
    s = int(batch.resp_start[0])
    per = lp[s : s + len(response)] - lr[s : s + len(response)]
    return KlEstimate(per, float(per.sum()))
