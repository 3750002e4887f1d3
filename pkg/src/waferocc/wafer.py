"""Wafer maps: representation, nearest-neighbour resizing, one-hot encoding,
a synthetic pattern generator, and the normal-only train/valid/test split."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MARGIN, NORMAL, DEFECT = 0, 1, 2


class Label(enum.IntEnum):
    """Pattern label; values are the on-disk label codes."""

    NONE = 0
    LOC = 1
    EDGE_LOC = 2
    EDGE_RING = 3
    CENTER = 4
    SCRATCH = 5
    RANDOM = 6
    NEAR_FULL = 7
    DONUT = 8
    UNLABELED = 255

    @classmethod
    def parse(cls, text: str | int | "Label") -> "Label":
        if isinstance(text, Label):
            return text
        if isinstance(text, (int, np.integer)):
            return cls(int(text))
        key = text.strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        try:
            return _LABEL_ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown wafer label {text!r}") from None

    @property
    def pretty(self) -> str:
        return _PRETTY[self]


_PRETTY = {
    Label.NONE: "None", Label.LOC: "Loc", Label.EDGE_LOC: "Edge-Loc",
    Label.EDGE_RING: "Edge-Ring", Label.CENTER: "Center", Label.SCRATCH: "Scratch",
    Label.RANDOM: "Random", Label.NEAR_FULL: "Near-full", Label.DONUT: "Donut",
    Label.UNLABELED: "Unlabeled",
}
_LABEL_ALIASES = {name.lower().replace("-", ""): lab for lab, name in _PRETTY.items()}
_LABEL_ALIASES.update({lab.name.lower().replace("_", ""): lab for lab in Label})
_LABEL_ALIASES[""] = Label.UNLABELED


@dataclass(eq=False)
class WaferMap:
    cells: np.ndarray
    label: Label = Label.UNLABELED

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValueError(f"wafer map must be a non-empty 2-D grid, got shape {cells.shape}")
        if cells.dtype != np.uint8:
            if not np.all(np.isin(cells, (0, 1, 2))):
                raise ValueError("wafer cells must be 0 (margin), 1 (normal) or 2 (defect)")
            cells = cells.astype(np.uint8)
        elif cells.max() > DEFECT:
            raise ValueError("wafer cells must be 0 (margin), 1 (normal) or 2 (defect)")
        if not cells.any():
            raise ValueError("wafer map has no dies")
        self.cells = cells
        self.label = Label.parse(self.label)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def is_defect(self) -> bool:
        return self.label != Label.NONE

    def __eq__(self, other):
        if not isinstance(other, WaferMap):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.cells, other.cells)

    def __repr__(self):
        return f"WaferMap({self.height}x{self.width}, label={self.label.pretty})"


def resize_nearest(wmap: WaferMap, h: int, w: int) -> WaferMap:
    """Nearest-neighbour resize: output (i, j) reads input (i*H//h, j*W//w)."""
    if h < 1 or w < 1:
        raise ValueError("target size must be positive")
    H, W = wmap.cells.shape
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return WaferMap(wmap.cells[np.ix_(rows, cols)], wmap.label)


def encode_one_hot(wmap: WaferMap, target_size: int = 64, dtype=np.float32) -> np.ndarray:
    """Resize to a square grid, then one-hot expand into (margin, normal, defect) channels.

    Returns an array of shape (3, target_size, target_size).
    """
    cells = resize_nearest(wmap, target_size, target_size).cells
    return (cells[None, :, :] == np.arange(3, dtype=np.uint8)[:, None, None]).astype(dtype)


def encode_batch(maps: Sequence[WaferMap], target_size: int = 64) -> np.ndarray:
    """Flattened one-hot encodings, shape (n, 3*size*size), dtype uint8."""
    out = np.empty((len(maps), 3 * target_size * target_size), dtype=np.uint8)
    for i, m in enumerate(maps):
        out[i] = encode_one_hot(m, target_size, dtype=np.uint8).reshape(-1)
    return out


# ---------------------------------------------------------------------------
# synthetic generator

SYNTHETIC_PATTERNS = (Label.NONE, Label.CENTER, Label.EDGE_RING, Label.SCRATCH,
                      Label.DONUT, Label.RANDOM)

CENTER_MAX_FRACTION = 0.35
EDGE_RING_WIDTH = 0.1
DONUT_INNER = (0.3, 0.45)
DONUT_WIDTH = 0.2

_DEFAULT_RATE = {Label.NONE: 0.01, Label.RANDOM: 0.4}
_STRUCTURED_FILL = 0.9


def disk_geometry(h: int, w: int) -> tuple[np.ndarray, float]:
    """Per-cell distance from the grid centre and the wafer disk radius."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dist = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
    return dist, min(h, w) / 2.0


def generate_synthetic(pattern, h: int = 32, w: int = 32, seed: int = 0,
                       defect_rate: float | None = None) -> WaferMap:
    """Draw a synthetic wafer map with the given defect pattern.

    ``defect_rate`` is the per-die Bernoulli rate for None (at most 0.02) and
    Random (at least 0.25) maps, and the fill density inside the pattern
    region for the structured patterns.
    """
    label = Label.parse(pattern)
    if label not in SYNTHETIC_PATTERNS:
        raise ValueError(f"no synthetic generator for pattern {label.pretty!r}")
    if h < 3 or w < 3:
        raise ValueError("synthetic maps need at least 3x3 cells")
    rate = _DEFAULT_RATE.get(label, _STRUCTURED_FILL) if defect_rate is None else float(defect_rate)
    if not 0.0 <= rate <= 1.0:
        raise ValueError("defect_rate must lie in [0, 1]")
    if label == Label.NONE and rate > 0.02:
        raise ValueError("None maps take a defect_rate of at most 0.02")
    if label == Label.RANDOM and rate < 0.25:
        raise ValueError("Random maps take a defect_rate of at least 0.25")

    rng = np.random.default_rng([int(seed), int(label), h, w])
    dist, radius = disk_geometry(h, w)
    disk = dist <= radius
    cells = np.where(disk, NORMAL, MARGIN).astype(np.uint8)

    if label in (Label.NONE, Label.RANDOM):
        region = disk
    elif label == Label.CENTER:
        r = radius * rng.uniform(0.15, CENTER_MAX_FRACTION)
        region = dist <= r
    elif label == Label.EDGE_RING:
        region = disk & (dist > radius * (1.0 - EDGE_RING_WIDTH))
    elif label == Label.DONUT:
        inner = radius * rng.uniform(*DONUT_INNER)
        region = (dist >= inner) & (dist <= inner + radius * DONUT_WIDTH)
    else:
        region = _scratch_region(rng, h, w, radius) & disk

    hits = region & (rng.random((h, w)) < rate)
    cells[hits] = DEFECT
    return WaferMap(cells, label)


def _scratch_region(rng: np.random.Generator, h: int, w: int, radius: float) -> np.ndarray:
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r0 = radius * 0.6 * math.sqrt(rng.random())
    a0 = rng.uniform(0, 2 * math.pi)
    y0, x0 = cy + r0 * math.sin(a0), cx + r0 * math.cos(a0)
    theta = rng.uniform(0, math.pi)
    length = 2 * radius * rng.uniform(0.4, 0.9)
    width = int(rng.integers(1, 3))
    t = np.arange(-length / 2, length / 2, 0.25)
    ys = y0 + t * math.sin(theta)
    xs = x0 + t * math.cos(theta)
    region = np.zeros((h, w), dtype=bool)
    # second pass offsets by one cell along the dominant normal direction
    offsets = [(0.0, 0.0)]
    if width == 2:
        ny, nx = math.cos(theta), -math.sin(theta)
        offsets.append((1.0, 0.0) if abs(ny) >= abs(nx) else (0.0, 1.0))
    for dy, dx in offsets:
        iy = np.rint(ys + dy).astype(int)
        ix = np.rint(xs + dx).astype(int)
        ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        region[iy[ok], ix[ok]] = True
    return region


def generate_dataset(counts: dict, sizes: Sequence[tuple[int, int]] = ((32, 32),),
                     seed: int = 0) -> list[WaferMap]:
    """Synthetic maps for ``{pattern: count}``; sizes are drawn per map from ``sizes``."""
    rng = np.random.default_rng(seed)
    maps = []
    for pattern, n in counts.items():
        label = Label.parse(pattern)
        for _ in range(int(n)):
            h, w = sizes[int(rng.integers(len(sizes)))]
            maps.append(generate_synthetic(label, h, w, seed=int(rng.integers(2**31))))
    return maps


# ---------------------------------------------------------------------------
# splitting

TRAIN_NORMAL_FRACTION = 0.8
VALID_NORMAL_FRACTION = 0.1
VALID_DEFECT_FRACTION = 0.5


@dataclass
class DatasetSplit:
    train: list[WaferMap]
    valid: list[WaferMap]
    test: list[WaferMap]
    seed: int
    ratios: dict = field(default_factory=lambda: {
        "train_normal": TRAIN_NORMAL_FRACTION,
        "valid_normal": VALID_NORMAL_FRACTION,
        "valid_defect": VALID_DEFECT_FRACTION,
    })


def split_counts(label: Label, n: int) -> tuple[int, int, int]:
    """(train, valid, test) counts for one class: floor rounding, remainder to test."""
    if label == Label.NONE:
        n_train = math.floor(n * TRAIN_NORMAL_FRACTION)
        n_valid = math.floor(n * VALID_NORMAL_FRACTION)
    else:
        n_train = 0
        n_valid = math.floor(n * VALID_DEFECT_FRACTION)
    return n_train, n_valid, n - n_train - n_valid


def split_dataset(maps: Sequence[WaferMap], seed: int = 0) -> DatasetSplit:
    """Normal-only training split; validation and test hold normals and defects."""
    by_label: dict[Label, list[int]] = {}
    for i, m in enumerate(maps):
        if m.label == Label.UNLABELED:
            raise ValueError(f"map {i} is unlabeled; splitting needs labelled maps")
        by_label.setdefault(m.label, []).append(i)
    if not by_label.get(Label.NONE):
        raise ValueError("cannot split: no None (normal) maps")

    rng = np.random.default_rng(seed)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for label in sorted(by_label):
        idx = np.asarray(by_label[label])
        idx = idx[rng.permutation(len(idx))]
        n_train, n_valid, _ = split_counts(label, len(idx))
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_valid])
        parts[2].extend(idx[n_train + n_valid:])
    out = []
    for part in parts:
        order = rng.permutation(len(part))
        out.append([maps[part[k]] for k in order])
    return DatasetSplit(out[0], out[1], out[2], seed=seed)


def label_counts(maps: Iterable[WaferMap]) -> dict[Label, int]:
    counts: dict[Label, int] = {}
    for m in maps:
        counts[m.label] = counts.get(m.label, 0) + 1
    return dict(sorted(counts.items()))
