"""Run configuration: typed sections, JSON file + ``--set`` overrides, snapshot diffs."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .alignment import DpoConfig, PpoConfig, RewardConfig
from .evalharness import AblationConfig
from .model import ModelConfig
from .sft import SftConfig
from .taskgen import PRESETS


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    seed: int = 0
    n: int = PRESETS["total"]
    ratio: float = 0.7
    clutter: float = 0.3

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError("data.n must be >= 2")
        if not 0 < self.ratio < 1:
            raise ValueError("data.ratio must be in (0, 1)")
        if not 0 <= self.clutter <= 1:
            raise ValueError("data.clutter must be in [0, 1]")


@dataclass
class ModelSection:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 160
    image_prefix_len: int = 4
    init_std: float = 0.02
    seed: int = 0
    lora_rank: int = 4  # adapters used by the alignment stages

    def __post_init__(self) -> None:
        if self.lora_rank < 1:
            raise ValueError(f"model.lora_rank must be >= 1, got {self.lora_rank}")
        self.model_config(1)

    def model_config(self, vocab_size: int) -> ModelConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size"}
        return ModelConfig(vocab_size=vocab_size, **kw)


@dataclass
class PreferenceSection:
    K: int = 5
    n_prompts: int = PRESETS["preference_prompts"]
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    checkpoints: list[str] = field(default_factory=lambda: ["sft"])
    temperature: float = 0.8
    top_k: int = 20
    max_new_tokens: int = 32
    workers: int = 1
    ranker: str = "oracle"
    endpoint: str | None = None
    retries: int = 2
    timeout: float = 10.0
    concurrency: int = 4

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("preference.K must be >= 1")
        if self.ranker not in ("oracle", "external"):
            raise ValueError(f"preference.ranker must be 'oracle' or 'external', got {self.ranker!r}")
        if self.ranker == "external" and not self.endpoint:
            raise ValueError("preference.endpoint is required when preference.ranker is 'external'")
        if self.n_prompts < 1 or self.max_new_tokens < 1 or self.workers < 1 or self.concurrency < 1:
            raise ValueError("preference.n_prompts, max_new_tokens, workers and concurrency must be >= 1")
        if set(self.checkpoints) - {"sft", "ppo", "dpo"} or not self.checkpoints:
            raise ValueError("preference.checkpoints must name stages among sft, ppo, dpo")


@dataclass
class EvalSection:
    # used by the ablation grid; the eval subcommand scores the policy under sft.setting
    settings: list[str] = field(default_factory=lambda: ["TEXT_IMAGE", "TEXT_CAPTION", "TEXT_IMAGE_CAPTION"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    constrained: bool = True
    max_new_tokens: int = 24
    split: str = "test"

    def __post_init__(self) -> None:
        from .sft import InputSetting

        self.settings = [InputSetting(s).value for s in self.settings]
        if not self.settings or not self.seeds:
            raise ValueError("eval.settings and eval.seeds must be non-empty")
        if self.max_new_tokens < 2:
            raise ValueError("eval.max_new_tokens must be >= 2")
        if self.split not in ("train", "test"):
            raise ValueError("eval.split must be 'train' or 'test'")


@dataclass
class MetricsSection:
    timing: bool = False  # add wall_ms to every metrics record (breaks byte-identical replays)


SECTIONS: dict[str, type] = {
    "data": DataSection,
    "model": ModelSection,
    "sft": SftConfig,
    "preference": PreferenceSection,
    "reward": RewardConfig,
    "ppo": PpoConfig,
    "dpo": DpoConfig,
    "eval": EvalSection,
    "ablation": AblationConfig,
    "metrics": MetricsSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    sft: SftConfig = field(default_factory=SftConfig)
    preference: PreferenceSection = field(default_factory=PreferenceSection)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            for k, v in d.items():
                if hasattr(v, "value"):  # enums
                    d[k] = v.value
            out[name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str or (isinstance(tp, type) and issubclass(tp, str)):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp!r}")


def _build_section(name: str, raw: dict) -> Any:
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"{name}.{k}: unknown key")
        kwargs[k] = _coerce(v, hints[k], f"{name}.{k}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{name}: {e}") from None


def parse_override(item: str) -> tuple[str, str, Any]:
    """``section.key=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in item:
        raise ConfigError(f"--set {item!r}: expected section.key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"--set {item!r}: key must look like section.key")
    if parts[0] not in SECTIONS:
        raise ConfigError(f"{key}: unknown section {parts[0]!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts[0], parts[1], value


def config_from_dict(doc: dict, overrides: list[str] | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    merged = {name: dict(doc.get(name, {}) or {}) for name in SECTIONS}
    for item in overrides or []:
        sec, key, value = parse_override(item)
        merged[sec][key] = value
    return RunConfig(**{name: _build_section(name, merged[name]) for name in SECTIONS})


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the JSON file (an empty file is allowed), then ``--set`` overrides."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return config_from_dict(doc, overrides)


def config_diff(old: dict, new: dict) -> list[str]:
    """Human-readable ``section.key: old -> new`` lines for every differing leaf."""
    out = []
    for sec in sorted(set(old) | set(new)):
        a, b = old.get(sec, {}), new.get(sec, {})
        for k in sorted(set(a) | set(b)):
            if a.get(k, "<absent>") != b.get(k, "<absent>"):
                out.append(f"{sec}.{k}: {json.dumps(a.get(k))} -> {json.dumps(b.get(k))}")
    return out
