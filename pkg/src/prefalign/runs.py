"""Run-directory plumbing shared by every training stage.

A stage that can be interrupted writes ``ckpt/<stage>-state.mmrl`` (model
weights, adapters and Adam moments) with a JSON sidecar holding the step
counter, Adam scalars and any rng states.  Resuming reloads that file and
truncates the stage's metric lines past the saved step, so an interrupted
and resumed run writes the same metrics as an uninterrupted one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import PolicyModel, load_model, save_model
from .numerics import AdamState


class MetricsLog:
    """Append-only JSONL metrics shared by all stages of one run."""

    def __init__(self, path, stage: str, timing: bool = False):
        self.path = Path(path)
        self.stage = stage
        self.timing = timing
        self._t0 = time.perf_counter()

    def truncate_after(self, step: int) -> None:
        """Drop this stage's records with ``step > step`` (resume)."""
        if not self.path.exists():
            return
        keep = []
        for line in self.path.read_text().splitlines():
            rec = json.loads(line)
            if rec.get("stage") == self.stage and rec.get("step", 0) > step:
                continue
            keep.append(line)
        self.path.write_text("".join(k + "\n" for k in keep))

    def drop_stage(self) -> None:
        self.truncate_after(-1)

    def write(self, **rec: Any) -> dict:
        out = {"stage": self.stage, **rec}
        if self.timing:
            out["wall_ms"] = round((time.perf_counter() - self._t0) * 1000.0, 3)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(out, sort_keys=True) + "\n")
        return out

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [r for r in map(json.loads, self.path.read_text().splitlines()) if r.get("stage") == self.stage]


class NullLog(MetricsLog):
    def __init__(self, stage: str = ""):
        super().__init__("/dev/null", stage)
        self.records: list[dict] = []

    def truncate_after(self, step: int) -> None:
        self.records = [r for r in self.records if r.get("step", 0) <= step]

    def write(self, **rec: Any) -> dict:
        out = {"stage": self.stage, **rec}
        self.records.append(out)
        return out

    def read(self) -> list[dict]:
        return list(self.records)


@dataclass
class TrainState:
    step: int
    adam: AdamState
    extra: dict
    tensors: dict = field(default_factory=dict)  # non-model tensors saved alongside


def save_train_state(
    path, model: PolicyModel, adam: AdamState, step: int, extra: dict | None = None, tensors: dict | None = None
) -> None:
    path = Path(path)
    moments = {f"extra.{k}": np.asarray(v) for k, v in (tensors or {}).items()}
    for k in adam.m:
        moments[f"adam.m.{k}"] = adam.m[k]
        moments[f"adam.v.{k}"] = adam.v[k]
    save_model(model, path, moments)
    info = {
        "step": step,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t},
        "extra": extra or {},
    }
    path.with_name(path.name + ".state.json").write_text(json.dumps(info, sort_keys=True))


def load_train_state(path) -> tuple[PolicyModel, TrainState]:
    path = Path(path)
    model, rest = load_model(path)
    info = json.loads(path.with_name(path.name + ".state.json").read_text())
    adam = AdamState(**info["adam"])
    tensors = {}
    for k, arr in rest.items():
        if k.startswith("extra."):
            tensors[k[6:]] = np.array(arr)
        if k.startswith("adam.m."):
            adam.m[k[7:]] = np.array(arr)
        elif k.startswith("adam.v."):
            adam.v[k[7:]] = np.array(arr)
    return model, TrainState(info["step"], adam, info["extra"], tensors)


def has_state(path) -> bool:
    path = Path(path)
    return path.exists() and path.with_name(path.name + ".state.json").exists()
