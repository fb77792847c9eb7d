"""Supervised fine-tuning: prompt construction and response-span cross-entropy."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import PolicyModel, Vocab
from .numerics import AdamState, NumericError, RngState
from .runs import MetricsLog, NullLog, has_state, load_train_state, save_train_state
from .taskgen import LETTERS, McqSample

log = logging.getLogger(__name__)

ANSWER_MARKER = "Answer: "


class InputSetting(str, enum.Enum):
    TEXT_IMAGE = "TEXT_IMAGE"
    TEXT_CAPTION = "TEXT_CAPTION"
    TEXT_IMAGE_CAPTION = "TEXT_IMAGE_CAPTION"

    @property
    def has_image(self) -> bool:
        return self in (InputSetting.TEXT_IMAGE, InputSetting.TEXT_IMAGE_CAPTION)

    @property
    def has_caption(self) -> bool:
        return self in (InputSetting.TEXT_CAPTION, InputSetting.TEXT_IMAGE_CAPTION)

    @property
    def short(self) -> str:
        return {"TEXT_IMAGE": "TI", "TEXT_CAPTION": "TC", "TEXT_IMAGE_CAPTION": "TIC"}[self.value]


@dataclass
class SftConfig:
    epochs: int = 4
    batch_size: int = 8
    lr: float = 3e-4
    setting: InputSetting = InputSetting.TEXT_IMAGE_CAPTION
    lora_rank: int | None = None
    seed: int = 0
    ckpt_every: int = 200

    def __post_init__(self) -> None:
        self.setting = InputSetting(self.setting)
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("SftConfig requires epochs >= 1, batch_size >= 1, lr > 0")
        if self.lora_rank is not None and self.lora_rank < 1:
            raise ValueError("SftConfig.lora_rank must be >= 1 when set")


@dataclass
class Prompt:
    text: str
    image: list[list[float]] | None
    target: str  # response text; EOS is appended at encode time


def build_prompt(sample: McqSample, setting: InputSetting) -> Prompt:
    setting = InputSetting(setting)
    lines = [f"Question: {sample.question}"]
    lines += [f"{letter}) {opt}" for letter, opt in zip(LETTERS, sample.options)]
    if setting.has_caption:
        lines.append(f"Caption: {sample.caption}")
    text = "\n".join(lines) + "\n"
    target = f"{ANSWER_MARKER}{sample.answer}. {sample.explanation}"
    return Prompt(text, sample.image if setting.has_image else None, target)


def loss_mask(prompt_len: int, total_len: int) -> np.ndarray:
    if not 0 <= prompt_len < total_len:
        raise ValueError(f"loss_mask: need 0 <= prompt_len < total_len, got ({prompt_len}, {total_len})")
    m = np.ones(total_len)
    m[:prompt_len] = 0.0
    return m


def prompt_ids(vocab: Vocab, prompt: Prompt) -> list[int]:
    return [vocab.bos_id] + vocab.tokenize(prompt.text)


def response_ids(vocab: Vocab, text: str, eos: bool = True) -> list[int]:
    return vocab.tokenize(text) + ([vocab.eos_id] if eos else [])


@dataclass
class Batch:
    inputs: np.ndarray  # (B, T) ids
    labels: np.ndarray  # (B, T) next-token ids
    weights: np.ndarray  # (B, T) loss mask
    images: np.ndarray | None  # (B, 8, 8)
    resp_start: np.ndarray  # (B,) label index of first response token
    lengths: np.ndarray  # (B,) number of real input positions


def make_batch(vocab: Vocab, pairs: Sequence[tuple[list[int], list[int]]], images=None) -> Batch:
    """Right-padded teacher-forcing batch from (prompt ids, response ids) pairs."""
    seqs = [p + r for p, r in pairs]
    t_len = max(len(s) for s in seqs) - 1
    b = len(seqs)
    inputs = np.full((b, t_len), vocab.pad_id, dtype=np.int64)
    labels = np.full((b, t_len), vocab.pad_id, dtype=np.int64)
    weights = np.zeros((b, t_len))
    starts = np.zeros(b, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    for i, (p, r) in enumerate(pairs):
        s = seqs[i]
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        labels[i, :n] = s[1:]
        weights[i, :n] = loss_mask(len(p) - 1, n)
        starts[i] = len(p) - 1
        lengths[i] = n
    imgs = None if images is None else np.asarray(images, dtype=np.float64)
    return Batch(inputs, labels, weights, imgs, starts, lengths)


def encode_samples(vocab: Vocab, samples: Sequence[McqSample], setting: InputSetting):
    out = []
    for s in samples:
        p = build_prompt(s, setting)
        out.append((prompt_ids(vocab, p), response_ids(vocab, p.target), p.image))
    return out


def sft_loss(model: PolicyModel, batch: Batch) -> nx.Tensor:
    logits = model.forward(batch.inputs, batch.images).logits
    b, t, v = logits.shape
    return nx.cross_entropy(logits.reshape(b * t, v), batch.labels.reshape(-1), batch.weights.reshape(-1))


class TrainingAborted(RuntimeError):
    pass


def _check_lengths(model: PolicyModel, encoded, setting: InputSetting) -> None:
    prefix = model.config.image_prefix_len if setting.has_image else 0
    worst = max(len(p) + len(r) - 1 for p, r, _ in encoded) + prefix
    if worst > model.config.max_seq_len:
        raise ValueError(f"sft_train: longest example needs {worst} positions > max_seq_len={model.config.max_seq_len}")


def sft_train(
    model: PolicyModel,
    vocab: Vocab,
    train: Sequence[McqSample],
    config: SftConfig,
    metrics: MetricsLog | None = None,
    state_path=None,
    stop_after: int | None = None,
) -> PolicyModel:
    """Train ``model`` in place; returns it.

    With ``state_path`` set, training state is checkpointed every
    ``config.ckpt_every`` steps and resumed from there if present.
    ``stop_after`` halts after that many optimizer steps (used to exercise
    resume).
    """
    metrics = metrics or NullLog("sft")
    encoded = encode_samples(vocab, train, config.setting)
    _check_lengths(model, encoded, config.setting)
    if config.lora_rank:
        model.attach_lora(config.lora_rank, rng=RngState(config.seed).child("lora"), train_also=("img_w", "img_b"))
    adam = AdamState(lr=config.lr)
    step = 0
    if state_path is not None and has_state(state_path):
        model, st = load_train_state(state_path)
        adam, step = st.adam, st.step
        metrics.truncate_after(step)
        log.info("sft: resumed at step %d", step)
    elif state_path is None or step == 0:
        metrics.drop_stage()

    n = len(encoded)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    root = RngState(config.seed).child("sft")
    params = model.trainable()
    while step < total:
        epoch, b_idx = divmod(step, per_epoch)
        order = root.child("epoch", epoch).permutation(n)
        rows = order[b_idx * config.batch_size : (b_idx + 1) * config.batch_size]
        batch = make_batch(
            vocab,
            [(encoded[i][0], encoded[i][1]) for i in rows],
            [encoded[i][2] for i in rows] if config.setting.has_image else None,
        )
        try:
            loss = sft_loss(model, batch)
            nx.backward(loss)
            nx.adam_step(params, adam)
        except NumericError as e:
            nx.reset_tape()
            dump = {"step": step, "epoch": epoch, "sample_ids": [train[i].id for i in rows], "error": str(e)}
            if state_path is not None:
                Path(str(state_path) + ".abort.json").write_text(json.dumps(dump, indent=2))
            raise TrainingAborted(f"sft: non-finite value at step {step}: {e}") from e
        finally:
            nx.zero_grad(params)
        step += 1
        metrics.write(step=step, epoch=epoch, loss=loss.item(), lr=adam.lr)
        if state_path is not None and (step % config.ckpt_every == 0 or step == total):
            save_train_state(state_path, model, adam, step)
        if stop_after is not None and step >= stop_after:
            break
    return model
