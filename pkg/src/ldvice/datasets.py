"""Deterministic toy video tasks.

* moving shapes (classification): a square or disc drifts at constant speed in
  one of four directions; the label is the direction.
* pulsating disc (regression): a grey disc whose area oscillates once per clip;
  the label is a toy ejection fraction ``100 * (A_max - A_min) / A_max``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensors import SeedSpec, archive_load, archive_save

DIRECTIONS = ("up", "down", "left", "right")
# (d_row, d_col) per frame for unit speed
_STEP = {0: (-1.0, 0.0), 1: (1.0, 0.0), 2: (0.0, -1.0), 3: (0.0, 1.0)}
SUPERSAMPLE = 8


@dataclass(frozen=True)
class DatasetConfig:
    task: str = "classification"
    n_train: int = 256
    n_val: int = 64
    n_test: int = 64
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int | None = None  # 3 for classification, 1 for regression
    num_classes: int = 4
    ef_range: tuple[float, float] = (10.0, 90.0)
    shape_size: float = 7.0
    speed: float = 1.0
    noise: float = 0.02
    r_max_range: tuple[float, float] = (9.0, 12.0)
    seed: int = 0
    # explicit {split: [start, stop)} ranges; derived from the counts when empty
    split_ranges: dict = field(default_factory=dict)

    @property
    def n_channels(self) -> int:
        if self.channels is not None:
            return self.channels
        return 3 if self.task == "classification" else 1

    def ranges(self) -> dict[str, tuple[int, int]]:
        if self.split_ranges:
            out = {k: (int(a), int(b)) for k, (a, b) in self.split_ranges.items()}
        else:
            sizes = {"train": self.n_train, "val": self.n_val, "test": self.n_test}
            if any(n < 0 for n in sizes.values()):
                raise ConfigError(f"split sizes must be non-negative, got {sizes}")
            out, start = {}, 0
            for name, n in sizes.items():
                out[name] = (start, start + n)
                start += n
        spans = sorted(out.values())
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 < b0:
                raise ConfigError(f"overlapping split ranges {out}")
        for name, (a, b) in out.items():
            if a < 0 or b < a:
                raise ConfigError(f"invalid range for split {name!r}: {(a, b)}")
        return out

    def total(self) -> int:
        return max((b for _, b in self.ranges().values()), default=0)

    def seed_spec(self) -> SeedSpec:
        return SeedSpec(self.seed, f"dataset/{self.task}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ef_range"] = list(self.ef_range)
        d["r_max_range"] = list(self.r_max_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        for key in ("ef_range", "r_max_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class MovingShapeSample:
    video: np.ndarray
    label: int


@dataclass
class PulseSample:
    video: np.ndarray
    ef: float


def _coverage(height, width, inside) -> np.ndarray:
    """Fractional pixel coverage of the region ``inside(rows, cols)``."""
    s = SUPERSAMPLE
    r = (np.arange(height * s) + 0.5) / s
    c = (np.arange(width * s) + 0.5) / s
    mask = inside(r[:, None], c[None, :]).astype(np.float64)
    return mask.reshape(height, s, width, s).mean(axis=(1, 3))


def _check_index(config: DatasetConfig, index: int):
    if not 0 <= index < config.total():
        raise IndexError(f"index {index} outside configured range [0, {config.total()})")


def _class_label(config: DatasetConfig, index: int) -> int:
    # labels are a fresh random permutation within every block of K indices
    k = config.num_classes
    perm = config.seed_spec().child(f"labels/{index // k}").generator().permutation(k)
    return int(perm[index % k])


def _add_noise(frames: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    if amplitude > 0:
        frames = frames + rng.uniform(-amplitude, amplitude, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def gen_moving_shape(config: DatasetConfig, index: int) -> MovingShapeSample:
    if config.num_classes != 4:
        raise ConfigError("moving-shape task has exactly 4 direction classes")
    if config.speed <= 0:
        raise ConfigError("speed must be positive: zero speed makes classes indistinguishable")
    F, H, W, C = config.frames, config.height, config.width, config.n_channels
    half = config.shape_size / 2.0
    travel = config.speed * (F - 1)
    if config.shape_size + travel > min(H, W) - 2:
        raise ConfigError(
            f"shape_size {config.shape_size} + travel {travel:.2f} does not fit in a {H}x{W} frame"
        )
    _check_index(config, index)

    label = _class_label(config, index)
    rng = config.seed_spec().child(f"sample/{index}").generator()
    kind = int(rng.integers(2))  # 0 square, 1 disc
    color = rng.uniform(0.55, 1.0, size=C)
    background = rng.uniform(0.0, 0.25, size=C)

    d_row, d_col = _STEP[label]
    # centre range so that the whole trajectory stays inside the frame
    def start_range(extent, d):
        low = half + 1.0 + (travel if d < 0 else 0.0)
        high = extent - half - 1.0 - (travel if d > 0 else 0.0)
        return low, high

    r_lo, r_hi = start_range(H, d_row)
    c_lo, c_hi = start_range(W, d_col)
    row0 = rng.uniform(r_lo, r_hi)
    col0 = rng.uniform(c_lo, c_hi)

    frames = np.empty((F, H, W, C), dtype=np.float64)
    for f in range(F):
        cr = row0 + d_row * config.speed * f
        cc = col0 + d_col * config.speed * f
        if kind == 0:
            cov = _coverage(H, W, lambda r, c: (np.abs(r - cr) <= half) & (np.abs(c - cc) <= half))
        else:
            cov = _coverage(H, W, lambda r, c: (r - cr) ** 2 + (c - cc) ** 2 <= half**2)
        frames[f] = background + cov[..., None] * (color - background)
    return MovingShapeSample(_add_noise(frames, config.noise, rng), label)


PULSE_FG = 0.85
PULSE_BG = 0.1


def pulse_radii(r_max: float, ef: float, frames: int) -> np.ndarray:
    t = np.arange(frames)
    return r_max * np.sqrt(1.0 - (ef / 100.0) * (1.0 - np.cos(2.0 * np.pi * t / frames)) / 2.0)


def gen_pulse(config: DatasetConfig, index: int) -> PulseSample:
    lo, hi = config.ef_range
    if not 0.0 <= lo <= hi < 100.0:
        raise ConfigError(f"ef_range must lie inside [0, 100), got {config.ef_range}")
    r_lo, r_hi = config.r_max_range
    if r_lo * math.sqrt(1.0 - hi / 100.0) < 1.0:
        raise ConfigError("smallest disc radius would drop below 1 pixel")
    F, H, W, C = config.frames, config.height, config.width, config.n_channels
    if 2 * r_hi + 2 > min(H, W):
        raise ConfigError(f"r_max up to {r_hi} does not fit in a {H}x{W} frame")
    _check_index(config, index)

    rng = config.seed_spec().child(f"sample/{index}").generator()
    ef = float(rng.uniform(lo, hi))
    r_max = float(rng.uniform(r_lo, r_hi))
    cy = rng.uniform(r_max + 1.0, H - r_max - 1.0)
    cx = rng.uniform(r_max + 1.0, W - r_max - 1.0)
    frames = np.empty((F, H, W, C), dtype=np.float64)
    for f, r in enumerate(pulse_radii(r_max, ef, F)):
        cov = _coverage(H, W, lambda y, x: (y - cy) ** 2 + (x - cx) ** 2 <= r * r)
        frames[f] = (PULSE_BG + cov * (PULSE_FG - PULSE_BG))[..., None]
    return PulseSample(_add_noise(frames, config.noise, rng), ef)


def generate(config: DatasetConfig, index: int):
    if config.task == "classification":
        s = gen_moving_shape(config, index)
        return s.video, s.label
    if config.task == "regression":
        s = gen_pulse(config, index)
        return s.video, s.ef
    raise ConfigError(f"unknown task {config.task!r}")


@dataclass
class Split:
    name: str
    indices: np.ndarray
    videos: np.ndarray  # (n, F, H, W, C)
    labels: np.ndarray  # int64 class ids or float64 ef values

    def __len__(self):
        return len(self.indices)


def make_split(config: DatasetConfig, name: str) -> Split:
    start, stop = config.ranges()[name]
    idx = np.arange(start, stop)
    F, H, W, C = config.frames, config.height, config.width, config.n_channels
    videos = np.empty((len(idx), F, H, W, C), dtype=np.float32)
    labels = []
    for j, i in enumerate(idx):
        videos[j], y = generate(config, int(i))
        labels.append(y)
    dtype = np.int64 if config.task == "classification" else np.float64
    return Split(name, idx, videos, np.asarray(labels, dtype=dtype))


def make_splits(config: DatasetConfig, out_dir=None) -> dict[str, Split]:
    """Generate every split; optionally persist ``<split>.ldvt`` + ``<split>.json``."""
    splits = {name: make_split(config, name) for name in config.ranges()}
    if out_dir is not None:
        save_splits(splits, config, out_dir)
    return splits


def save_splits(splits: dict[str, Split], config: DatasetConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in splits.items():
        archive_save({"videos": split.videos}, out / f"{name}.ldvt")
        key = "label" if config.task == "classification" else "ef"
        sidecar = {
            "split": name,
            "config": config.to_dict(),
            "labels": {str(int(i)): (int(y) if key == "label" else float(y)) for i, y in zip(split.indices, split.labels)},
            "label_kind": key,
        }
        (out / f"{name}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_split(directory, name: str) -> Split:
    d = Path(directory)
    if not (d / f"{name}.ldvt").exists():
        raise FileNotFoundError(str(d / f"{name}.ldvt"))
    videos = archive_load(d / f"{name}.ldvt")["videos"]
    meta = json.loads((d / f"{name}.json").read_text())
    items = sorted(((int(k), v) for k, v in meta["labels"].items()))
    idx = np.array([k for k, _ in items], dtype=np.int64)
    dtype = np.int64 if meta["label_kind"] == "label" else np.float64
    return Split(name, idx, videos, np.array([v for _, v in items], dtype=dtype))


def load_dataset_config(directory) -> DatasetConfig:
    d = Path(directory)
    meta = json.loads(next(iter(sorted(d.glob("*.json")))).read_text())
    return DatasetConfig.from_dict(meta["config"])
