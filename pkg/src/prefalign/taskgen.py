"""Synthetic multimodal physics MCQs, a deterministic captioner, and JSONL I/O.

Each sample is a one-step computation whose two integer parameters (1-9)
live only in the 8x8 image: parameter blocks hold ``value / 10`` in a fixed
2x2 block, and a third block holds ``(template_id + 1) / 10``.  The rest of
the grid carries low-intensity clutter so the vision channel has to learn
where to look.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import RngState

GRID = 8
LETTERS = ("A", "B", "C", "D")

# (row, col) of the top-left cell of each 2x2 block
P1_BLOCK = (1, 1)
P2_BLOCK = (1, 5)
TEMPLATE_BLOCK = (5, 3)
_BLOCK_CELLS = {
    (r + dr, c + dc) for (r, c) in (P1_BLOCK, P2_BLOCK, TEMPLATE_BLOCK) for dr in (0, 1) for dc in (0, 1)
}


@dataclass(frozen=True)
class Template:
    id: int
    question: str
    symbol: str
    formula: str  # right-hand side in symbols, e.g. "m*a"
    op: str  # "mul" or "add"
    names: tuple[str, str]
    units: tuple[str, str]
    unit: str

    def apply(self, a: int, b: int) -> int:
        return a * b if self.op == "mul" else a + b

    def explanation(self, a: int, b: int) -> str:
        sign = "*" if self.op == "mul" else "+"
        return f"{self.symbol} = {self.formula} = {a}{sign}{b} = {self.apply(a, b)} {self.unit}"


TEMPLATES: tuple[Template, ...] = (
    Template(0, "Find the force on the block.", "F", "m*a", "mul", ("mass", "acceleration"), ("kg", "m/s^2"), "N"),
    Template(1, "Find the voltage across the resistor.", "V", "I*R", "mul", ("current", "resistance"), ("A", "ohm"), "V"),
    Template(2, "Find the momentum of the cart.", "p", "m*v", "mul", ("mass", "velocity"), ("kg", "m/s"), "kg m/s"),
    Template(3, "Find the work done on the box.", "W", "F*d", "mul", ("force", "distance"), ("N", "m"), "J"),
    Template(4, "Find the distance travelled by the car.", "d", "v*t", "mul", ("velocity", "time"), ("m/s", "s"), "m"),
    Template(5, "Find the total resistance of the circuit.", "R", "R1+R2", "add", ("resistance", "resistance"), ("ohm", "ohm"), "ohm"),
    Template(6, "Find the net force on the sled.", "F", "F1+F2", "add", ("force", "force"), ("N", "N"), "N"),
)

# Dataset size presets: total count and the separately reported train/test counts.
PRESETS = {
    "total": 4500,
    "reported_train": 3700,
    "reported_test": 676,
    "preference_prompts": 2000,
}


@dataclass
class McqSample:
    id: str
    question: str
    options: list[str]
    answer: str
    explanation: str
    image: list[list[float]]
    caption: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @property
    def template_id(self) -> int:
        return decode_image(self.image)[2]


@dataclass
class DatasetSplit:
    train: list[McqSample]
    test: list[McqSample]
    seed: int
    ratio: float


class DatasetError(ValueError):
    pass


def task_pieces() -> tuple[str, ...]:
    """Multi-character tokens covering the fixed phrases of every template."""
    pieces: list[str] = ["Answer: ", ". ", " = ", " and ", "\nCaption: The diagram shows "]
    pieces += [f"\n{letter}) " for letter in LETTERS]
    for t in TEMPLATES:
        pieces.append(f"Question: {t.question}")
        pieces.append(f"{t.symbol} = {t.formula} = ")
        pieces += [f"{name} " for name in t.names]
        pieces += [f" {u}" for u in (*t.units, t.unit)]
    return tuple(dict.fromkeys(p for p in pieces if len(p) > 1))


def task_vocab():
    from .model.vocab import Vocab

    return Vocab(task_pieces())


# --------------------------------------------------------------------------
# image encode / decode
# --------------------------------------------------------------------------


def _fill(grid: np.ndarray, block: tuple[int, int], value: float) -> None:
    r, c = block
    grid[r : r + 2, c : c + 2] = value


def _read(grid: np.ndarray, block: tuple[int, int]) -> int:
    r, c = block
    return int(round(float(grid[r : r + 2, c : c + 2].mean()) * 10))


def render_image(a: int, b: int, template_id: int, rng: RngState | None = None, clutter: float = 0.0) -> np.ndarray:
    grid = np.zeros((GRID, GRID))
    if rng is not None and clutter > 0:
        grid = rng.uniform((GRID, GRID)) * clutter
        for cell in _BLOCK_CELLS:
            grid[cell] = 0.0
    _fill(grid, P1_BLOCK, a / 10)
    _fill(grid, P2_BLOCK, b / 10)
    _fill(grid, TEMPLATE_BLOCK, (template_id + 1) / 10)
    return np.round(grid, 4)


def decode_image(image) -> tuple[int, int, int]:
    """Read (param1, param2, template_id) back out of a grid."""
    g = np.asarray(image, dtype=np.float64)
    return _read(g, P1_BLOCK), _read(g, P2_BLOCK), _read(g, TEMPLATE_BLOCK) - 1


def caption_of(image, template_id: int) -> str:
    if not 0 <= template_id < len(TEMPLATES):
        raise DatasetError(f"unknown template id {template_id}")
    t = TEMPLATES[template_id]
    a, b, _ = decode_image(image)
    return f"The diagram shows {t.names[0]} {a} {t.units[0]} and {t.names[1]} {b} {t.units[1]}."


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _options(value: int, rng: RngState) -> tuple[list[int], int]:
    step = int(rng.integers(1, 4))
    feasible = [k for k in range(4) if value - k * step >= 1]
    k = feasible[int(rng.integers(0, len(feasible)))]
    return [value + step * (i - k) for i in range(4)], k


def make_sample(idx: int, rng: RngState, clutter: float = 0.3, id_prefix: str = "q") -> McqSample:
    t = TEMPLATES[int(rng.integers(0, len(TEMPLATES)))]
    a, b = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    value = t.apply(a, b)
    opts, k = _options(value, rng)
    image = render_image(a, b, t.id, rng, clutter)
    return McqSample(
        id=f"{id_prefix}{idx:05d}",
        question=t.question,
        options=[f"{o} {t.unit}" for o in opts],
        answer=LETTERS[k],
        explanation=t.explanation(a, b),
        image=image.tolist(),
        caption=caption_of(image, t.id),
    )


def generate_dataset(seed: int, n: int, clutter: float = 0.3) -> list[McqSample]:
    """``n`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if n <= 0:
        raise DatasetError(f"generate_dataset: n must be >= 1, got {n}")
    root = RngState(seed).child("taskgen")
    return [make_sample(i, root.child(i), clutter) for i in range(n)]


def split(samples: Sequence[McqSample], ratio: float, seed: int) -> DatasetSplit:
    if not samples:
        raise DatasetError("split: no samples")
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"split: ratio must be in (0, 1), got {ratio}")
    n = len(samples)
    n_train = int(math.floor(ratio * n + 0.5))
    order = RngState(seed).child("split").permutation(n)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return DatasetSplit(train, test, seed, ratio)


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------

_FIELDS = ("id", "question", "options", "answer", "explanation", "image", "caption")


def validate_sample(obj: dict, where: str = "") -> McqSample:
    missing = [f for f in _FIELDS if f not in obj]
    if missing:
        raise DatasetError(f"{where}missing field(s) {missing}")
    extra = sorted(set(obj) - set(_FIELDS))
    if extra:
        raise DatasetError(f"{where}unexpected field(s) {extra}")
    for f in ("id", "question", "answer", "explanation", "caption"):
        if not isinstance(obj[f], str):
            raise DatasetError(f"{where}field {f!r} must be a string")
    opts = obj["options"]
    if not isinstance(opts, list) or len(opts) != 4 or not all(isinstance(o, str) for o in opts):
        raise DatasetError(f"{where}options must be a list of exactly 4 strings")
    if obj["answer"] not in LETTERS:
        raise DatasetError(f"{where}answer must be one of A/B/C/D, got {obj['answer']!r}")
    img = obj["image"]
    try:
        arr = np.asarray(img, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetError(f"{where}image must be an {GRID}x{GRID} grid of numbers") from None
    if arr.shape != (GRID, GRID):
        raise DatasetError(f"{where}image must be {GRID}x{GRID}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise DatasetError(f"{where}image values must lie in [0, 1]")
    return McqSample(**{f: obj[f] for f in _FIELDS})


def write_jsonl(samples: Iterable[McqSample], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_jsonl(path) -> list[McqSample]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            out.append(validate_sample(obj, f"line {lineno}: "))
    return out
