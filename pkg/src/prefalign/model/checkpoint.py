"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"MMRL" | u32 version | u32 n_tensors
    repeated n_tensors times:
        u32 name_len | name (utf-8) | u32 rank | u64 dims[rank] | f64 values (row-major)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..numerics import RngState, Tensor
from .transformer import LoraAdapter, ModelConfig, PolicyModel

MAGIC = b"MMRL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    tmp.replace(path)


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
            off += 8 * n
            out[name] = arr
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt tensor table ({e})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_model(model: PolicyModel, path, extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write weights (and adapters) to ``path`` plus a ``<path>.json`` sidecar."""
    path = Path(path)
    tensors = {k: t.data for k, t in model.all_params().items()}
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors)
    meta = model.config_dict()
    meta["adapters"] = {k: {"rank": a.rank, "alpha": a.alpha} for k, a in model.adapters.items()}
    meta["trainable"] = sorted(k for k, t in model.all_params().items() if t.requires_grad)
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path) -> tuple[PolicyModel, dict[str, np.ndarray]]:
    """Returns the model and any non-model tensors stored alongside it."""
    path = Path(path)
    meta = json.loads(_meta_path(path).read_text())
    tensors = load_tensors(path)
    model = PolicyModel(ModelConfig(**meta["config"]), RngState(0), value_head=meta.get("value_head", False))
    for k in model.params:
        if k not in tensors:
            raise CheckpointError(f"{path}: missing tensor {k!r}")
        model.params[k].data = tensors.pop(k)
    for name, spec in meta.get("adapters", {}).items():
        A = Tensor(tensors.pop(f"lora.{name}.A"), requires_grad=True)
        B = Tensor(tensors.pop(f"lora.{name}.B"), requires_grad=True)
        model.adapters[name] = LoraAdapter(name, spec["rank"], spec["alpha"], A, B)
    trainable = set(meta.get("trainable", []))
    if trainable:
        for k, t in model.all_params().items():
            t.requires_grad = k in trainable
    return model, tensors
