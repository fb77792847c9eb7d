"""Tiny multimodal decoder: image prefix + causal transformer + LoRA + value head."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .. import numerics as nx
from ..numerics import RngState, Tensor
from .vocab import Vocab

log = logging.getLogger(__name__)

IMAGE_CELLS = 64


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 0
    max_seq_len: int = 160
    image_prefix_len: int = 4
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for k in ("n_layers", "d_model", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, k) < 1:
                raise ValueError(f"ModelConfig.{k} must be >= 1")
        if self.image_prefix_len < 0:
            raise ValueError("ModelConfig.image_prefix_len must be >= 0")


@dataclass
class LoraAdapter:
    target: str
    rank: int
    alpha: float
    A: Tensor  # (rank, d_in)
    B: Tensor  # (d_out, rank)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Update in the stored (d_in, d_out) weight layout."""
        return self.scale * (self.B.data @ self.A.data).T

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size


DEFAULT_LORA_TARGETS = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass
class ForwardOut:
    logits: Tensor  # (B, T, V)
    values: Tensor | None = None  # (B, T)
    hidden: Tensor | None = None  # (B, T, d) after final layer norm


class PolicyModel:
    """Weights live in ``self.params`` (name -> Tensor)."""

    def __init__(self, config: ModelConfig, rng: RngState | None = None, value_head: bool = False):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.adapters: dict[str, LoraAdapter] = {}
        self.value_head = value_head
        rng = rng or RngState(0)
        c = config
        std = c.init_std

        def p(name, shape, kind="normal"):
            if kind == "normal":
                arr = rng.child(name).normal(shape, std)
            elif kind == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        p("tok_emb", (c.vocab_size, c.d_model))
        p("pos_emb", (c.max_seq_len, c.d_model))
        p("img_w", (IMAGE_CELLS, c.image_prefix_len * c.d_model))
        p("img_b", (c.image_prefix_len * c.d_model,))
        for i in range(c.n_layers):
            h = f"h{i}."
            p(h + "ln1.g", (c.d_model,), "ones")
            p(h + "ln1.b", (c.d_model,), "zeros")
            for w in ("wq", "wk", "wv", "wo"):
                p(h + w, (c.d_model, c.d_model))
            p(h + "ln2.g", (c.d_model,), "ones")
            p(h + "ln2.b", (c.d_model,), "zeros")
            p(h + "w1", (c.d_model, c.d_ff))
            p(h + "b1", (c.d_ff,), "zeros")
            p(h + "w2", (c.d_ff, c.d_model))
            p(h + "b2", (c.d_model,), "zeros")
        p("ln_f.g", (c.d_model,), "ones")
        p("ln_f.b", (c.d_model,), "zeros")
        p("lm_head", (c.d_model, c.vocab_size))
        p("value_w", (c.d_model, 1), "zeros")
        p("value_b", (1,), "zeros")

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------
    def base_param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def all_params(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, ad in self.adapters.items():
            out[f"lora.{name}.A"] = ad.A
            out[f"lora.{name}.B"] = ad.B
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.all_params().items() if t.requires_grad}

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable().values())

    def freeze(self, names: Iterable[str] | None = None) -> None:
        for k in names if names is not None else list(self.params):
            self.params[k].requires_grad = False

    def unfreeze(self, names: Iterable[str] | None = None) -> None:
        for k in names if names is not None else list(self.params):
            self.params[k].requires_grad = True

    def clone(self) -> "PolicyModel":
        return copy.deepcopy(self)

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.all_params()):
            h.update(k.encode())
            h.update(self.all_params()[k].data.tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    # LoRA
    # ------------------------------------------------------------------
    def attach_lora(
        self,
        rank: int,
        alpha: float | None = None,
        targets: Sequence[str] = DEFAULT_LORA_TARGETS,
        rng: RngState | None = None,
        freeze_base: bool = True,
        train_also: Sequence[str] = ("value_w", "value_b"),
    ) -> None:
        """Wrap each targeted matrix in every layer with a zero-initialised adapter."""
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        alpha = float(2 * rank if alpha is None else alpha)
        rng = rng or RngState(0).child("lora")
        for i in range(self.config.n_layers):
            for t in targets:
                name = f"h{i}.{t}"
                d_in, d_out = self.params[name].shape
                A = Tensor(rng.child(name).normal((rank, d_in), 1.0 / np.sqrt(d_in)), requires_grad=True)
                B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
                self.adapters[name] = LoraAdapter(name, rank, alpha, A, B)
        if freeze_base:
            self.freeze()
            self.unfreeze([k for k in train_also if k in self.params])

    def adapter_param_count(self) -> int:
        return sum(a.n_params for a in self.adapters.values())

    def merge_lora(self) -> "PolicyModel":
        """Fold every adapter into its base matrix and drop the adapters (in place)."""
        if not self.adapters:
            log.warning("merge_lora: model has no adapters; nothing to merge")
            return self
        for name, ad in self.adapters.items():
            self.params[name].data = self.params[name].data + ad.delta()
        self.adapters = {}
        self.unfreeze()
        return self

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------
    def _lin(self, x2: Tensor, name: str) -> Tensor:
        y = x2 @ self.params[name]
        ad = self.adapters.get(name)
        if ad is not None:
            y = y + ((x2 @ ad.A.transpose()) @ ad.B.transpose()) * ad.scale
        return y

    def encode_image(self, images) -> Tensor:
        """(B, 8, 8) grids in [0, 1] -> (B, image_prefix_len, d_model) embeddings."""
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1:] != (8, 8):
            raise nx.ShapeError(f"encode_image: expected 8x8 grids, got shape {arr.shape[1:]}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("encode_image: grid values must lie in [0, 1]")
        b = arr.shape[0]
        c = self.config
        flat = Tensor(arr.reshape(b, IMAGE_CELLS))
        out = flat @ self.params["img_w"] + self.params["img_b"]
        return out.reshape(b, c.image_prefix_len, c.d_model)

    def forward(self, tokens, images=None, want_values: bool = False, want_hidden: bool = False) -> ForwardOut:
        """Logits for every token position of a (B, T) id batch.

        Image prefix embeddings, when given, occupy the first
        ``image_prefix_len`` positions; outputs cover token positions only.
        """
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        bsz, t_len = tokens.shape
        prefix = c.image_prefix_len if images is not None else 0
        total = prefix + t_len
        if total > c.max_seq_len:
            raise ValueError(f"forward: sequence length {total} exceeds max_seq_len={c.max_seq_len}")
        x = nx.embedding(self.params["tok_emb"], tokens)
        if images is not None:
            img = self.encode_image(images)
            if img.shape[0] != bsz:
                raise nx.ShapeError(f"forward: {img.shape[0]} images for a batch of {bsz}")
            x = nx.concat([img, x], axis=1)
        x = x + self.params["pos_emb"][:total]
        hd = c.d_model // c.n_heads
        for i in range(c.n_layers):
            h = f"h{i}."
            a = nx.layer_norm(x, self.params[h + "ln1.g"], self.params[h + "ln1.b"]).reshape(bsz * total, c.d_model)
            q = self._lin(a, h + "wq").reshape(bsz, total, c.n_heads, hd).transpose(0, 2, 1, 3)
            k = self._lin(a, h + "wk").reshape(bsz, total, c.n_heads, hd).transpose(0, 2, 3, 1)
            v = self._lin(a, h + "wv").reshape(bsz, total, c.n_heads, hd).transpose(0, 2, 1, 3)
            att = nx.causal_softmax((q @ k) * (1.0 / np.sqrt(hd)))
            o = (att @ v).transpose(0, 2, 1, 3).reshape(bsz * total, c.d_model)
            x = x + self._lin(o, h + "wo").reshape(bsz, total, c.d_model)
            m = nx.layer_norm(x, self.params[h + "ln2.g"], self.params[h + "ln2.b"]).reshape(bsz * total, c.d_model)
            m = nx.gelu(self._lin(m, h + "w1") + self.params[h + "b1"])
            m = self._lin(m, h + "w2") + self.params[h + "b2"]
            x = x + m.reshape(bsz, total, c.d_model)
        x = nx.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        if prefix:
            x = x[:, prefix:]
        x2 = x.reshape(bsz * t_len, c.d_model)
        logits = (x2 @ self.params["lm_head"]).reshape(bsz, t_len, c.vocab_size)
        values = None
        if want_values or self.value_head:
            # value regression reads detached features so it cannot drag the shared trunk
            values = (x2.detach() @ self.params["value_w"] + self.params["value_b"]).reshape(bsz, t_len)
        return ForwardOut(logits, values, x if want_hidden else None)

    __call__ = forward

    def config_dict(self) -> dict:
        return {"config": asdict(self.config), "value_head": self.value_head}


# ----------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------


@dataclass
class Sampling:
    temperature: float = 0.8
    top_k: int = 20
    greedy: bool = False

    def __post_init__(self) -> None:
        if not self.greedy and self.temperature <= 0:
            raise ValueError("sampling temperature must be > 0 unless greedy")


@dataclass
class Generation:
    tokens: list[int]  # response ids, EOS excluded
    text: str
    finished: bool  # hit EOS
    logprobs: list[float] = field(default_factory=list)  # sampling-policy log-probs of each emitted token


def _pick(logits_row: np.ndarray, sampling: Sampling, rng: RngState | None, allowed: np.ndarray | None):
    z = logits_row.copy()
    if allowed is not None:
        keep = np.full_like(z, -np.inf)
        keep[allowed] = z[allowed]
        z = keep
    if sampling.greedy:
        tok = int(np.argmax(z))
        return tok, 0.0
    z = z / sampling.temperature
    if sampling.top_k and sampling.top_k < z.size:
        kth = np.partition(z, -sampling.top_k)[-sampling.top_k]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    if rng is None:
        raise ValueError("sampling requires an RngState")
    tok = rng.choice(p.size, p)
    return tok, float(np.log(p[tok]))


def generate_batch(
    model: PolicyModel,
    vocab: Vocab,
    prompts: Sequence[Sequence[int]],
    images=None,
    sampling: Sampling | None = None,
    rngs: Sequence[RngState] | None = None,
    max_new_tokens: int = 32,
    forced_prefix: Sequence[int] = (),
    constrain: dict[int, Sequence[int]] | None = None,
) -> list[Generation]:
    """Autoregressive decoding for prompts of any lengths.

    Prompts are grouped by length so each forward is an unpadded batch.
    ``forced_prefix`` ids are appended to every prompt and reported as part
    of the response; ``constrain`` maps a response position to the token ids
    allowed there.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    sampling = sampling or Sampling(greedy=True)
    n = len(prompts)
    if rngs is not None and len(rngs) != n:
        raise ValueError("one RngState per prompt is required")
    imgs = None if images is None else np.asarray(images, dtype=np.float64)
    results: list[Generation | None] = [None] * n
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    allowed = {k: np.asarray(v, dtype=np.int64) for k, v in (constrain or {}).items()}
    with nx.no_grad():
        for _, idx in sorted(groups.items()):
            seqs = np.array([list(prompts[i]) + list(forced_prefix) for i in idx], dtype=np.int64)
            out = [list(forced_prefix) for _ in idx]
            lps: list[list[float]] = [[] for _ in idx]
            done = np.zeros(len(idx), dtype=bool)
            g_imgs = None if imgs is None else imgs[idx]
            prefix_len = 0 if g_imgs is None else model.config.image_prefix_len
            for step in range(len(forced_prefix), max_new_tokens):
                if done.all() or prefix_len + seqs.shape[1] >= model.config.max_seq_len:
                    break
                logits = model.forward(seqs, g_imgs).logits.data[:, -1]
                nxt = np.full(len(idx), vocab.pad_id, dtype=np.int64)
                for r, i in enumerate(idx):
                    if done[r]:
                        continue
                    tok, lp = _pick(logits[r], sampling, None if rngs is None else rngs[i], allowed.get(step))
                    nxt[r] = tok
                    if tok == vocab.eos_id:
                        done[r] = True
                    else:
                        out[r].append(tok)
                        lps[r].append(lp)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            for r, i in enumerate(idx):
                results[i] = Generation(out[r], vocab.detokenize(out[r]), bool(done[r]), lps[r])
    return results  # type: ignore[return-value]


def generate(
    model: PolicyModel,
    vocab: Vocab,
    prompt: Sequence[int],
    image=None,
    sampling: Sampling | None = None,
    rng: RngState | None = None,
    max_new_tokens: int = 32,
) -> Generation:
    imgs = None if image is None else np.asarray(image, dtype=np.float64)[None]
    return generate_batch(
        model, vocab, [prompt], imgs, sampling, None if rng is None else [rng], max_new_tokens
    )[0]
