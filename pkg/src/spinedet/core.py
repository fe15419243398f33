"""Domain types shared across the package.

Coordinate conventions
----------------------
Volumes are indexed ``(X, Y, Z)`` with ``Z`` the axial axis; larger ``Z`` is
more superior. Centroids are continuous voxel-index coordinates. Boxes are
half-open ``[lo, hi)`` intervals in the same index space, so a single voxel
``i`` occupies ``[i, i + 1)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LEVEL_NAMES = (
    [f"C{i}" for i in range(1, 8)]
    + [f"T{i}" for i in range(1, 14)]
    + [f"L{i}" for i in range(1, 7)]
)
NUM_LEVELS = len(LEVEL_NAMES)

VertebraLevel = enum.IntEnum("VertebraLevel", [(n, i) for i, n in enumerate(LEVEL_NAMES)])
VertebraLevel.__doc__ = "The 26 vertebral levels, ordered superior to inferior (C1=0 ... L6=25)."


class UnknownLevelError(ValueError):
    pass


class DegenerateBoxError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


def level_of(name: str) -> VertebraLevel:
    try:
        return VertebraLevel[name]
    except KeyError:
        raise UnknownLevelError(f"unknown vertebral level {name!r}") from None


@dataclass(frozen=True)
class Spacing:
    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        for v in (self.sx, self.sy, self.sz):
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"spacing components must be finite and > 0, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.sz], dtype=float)

    @classmethod
    def isotropic(cls, s: float) -> "Spacing":
        return cls(s, s, s)


@dataclass
class ImageVolume:
    values: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing(1.0, 1.0, 1.0))
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"volume must be 3D with positive shape, got {self.values.shape}")
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape)


@dataclass
class LabelVolume(ImageVolume):
    """Per-voxel labels: 0 is background, ``level + 1`` marks a vertebra."""

    def __post_init__(self):
        super().__post_init__()
        self.values = self.values.astype(np.int16, copy=False)
        bad = np.setdiff1d(np.unique(self.values), np.arange(NUM_LEVELS + 1))
        if bad.size:
            raise UnknownLevelError(f"label values outside 0..{NUM_LEVELS}: {bad.tolist()}")

    def levels(self) -> list[VertebraLevel]:
        vals = np.unique(self.values)
        return [VertebraLevel(int(v) - 1) for v in vals if v > 0]

    def mask(self, level: int) -> np.ndarray:
        return self.values == int(level) + 1


@dataclass(frozen=True)
class Centroid3:
    level: VertebraLevel
    x: float
    y: float
    z: float

    def __post_init__(self):
        object.__setattr__(self, "level", VertebraLevel(int(self.level)))

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def moved(self, xyz: Sequence[float]) -> "Centroid3":
        return Centroid3(self.level, float(xyz[0]), float(xyz[1]), float(xyz[2]))


@dataclass(frozen=True)
class BBox3:
    x0: float
    x1: float
    y0: float
    y1: float
    z0: float
    z1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1 and self.z0 < self.z1):
            raise DegenerateBoxError(f"box has a non-positive extent: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.x1, self.y0, self.y1, self.z0, self.z1], dtype=float)

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.z0], dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.z1], dtype=float)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def scaled(self, f: float) -> "BBox3":
        return BBox3(*(self.as_array() * f))

    @classmethod
    def from_lohi(cls, lo, hi) -> "BBox3":
        return cls(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])


@dataclass(frozen=True)
class BoxSizes:
    """Extents from the centroid to each face: left, right, posterior, anterior, inferior, superior."""

    s_l: float
    s_r: float
    s_p: float
    s_a: float
    s_i: float
    s_s: float

    def __post_init__(self):
        if min(self.as_array()) < 0:
            raise ValueError(f"box sizes must be non-negative: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.s_l, self.s_r, self.s_p, self.s_a, self.s_i, self.s_s], dtype=float)


def bbox_from_sizes(c: Centroid3, s: BoxSizes) -> BBox3:
    x0, x1 = c.x - s.s_l, c.x + s.s_r
    y0, y1 = c.y - s.s_p, c.y + s.s_a
    z0, z1 = c.z - s.s_i, c.z + s.s_s
    if x1 <= x0 or y1 <= y0 or z1 <= z0:
        raise DegenerateBoxError(f"sizes {s} give a zero-extent box at {c}")
    return BBox3(x0, x1, y0, y1, z0, z1)


def sizes_from_mask(labels: np.ndarray, c: Centroid3) -> BoxSizes:
    """Tight half-open box of ``c.level`` voxels, as extents relative to ``c``.

    ``labels`` holds internal label values (level + 1). Extents on the far
    side of a centroid lying outside its own mask are clipped to zero.
    """
    idx = np.argwhere(np.asarray(labels) == int(c.level) + 1)
    if idx.size == 0:
        raise EmptyMaskError(f"no voxels for level {c.level.name}")
    lo = idx.min(axis=0).astype(float)
    hi = idx.max(axis=0).astype(float) + 1.0
    xyz = c.xyz
    below = np.maximum(xyz - lo, 0.0)
    above = np.maximum(hi - xyz, 0.0)
    return BoxSizes(below[0], above[0], below[1], above[1], below[2], above[2])


def bbox_iou(a: BBox3, b: BBox3) -> float:
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def rasterize_box(box: BBox3, shape: Sequence[int], value: int = 1) -> np.ndarray:
    """Integer mask of voxels whose centres fall inside ``box``."""
    out = np.zeros(tuple(shape), dtype=np.int16)
    lo = np.clip(np.ceil(box.lo - 0.5), 0, None).astype(int)
    hi = np.minimum(np.ceil(box.hi - 0.5).astype(int), shape)
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = value
    return out


def center_of_mass(mask: np.ndarray) -> np.ndarray:
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise EmptyMaskError("center of mass of an empty mask")
    return idx.mean(axis=0)
