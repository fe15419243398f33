"""Synthetic spines: stacked ellipsoidal bodies with a posterior process block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import NUM_LEVELS, Centroid3, ImageVolume, LabelVolume, Spacing, VertebraLevel
from .sample import Sample

SOFT_TISSUE_HU = 40.0
BODY_HU = 450.0
PROCESS_HU = 650.0
NOISE_HU = 25.0


class PhantomOverflowError(ValueError):
    pass


@dataclass
class PhantomSpec:
    n_vertebrae: int = 6
    start_level: VertebraLevel = VertebraLevel.T10
    grid_shape: tuple = (64, 64, 128)
    spacing: Spacing = Spacing(1.75, 1.75, 1.75)
    jitter_seed: int = 0
    body_radius: float = 7.0
    body_half_height: float = 4.5
    disc_gap: float = 4.0
    process_size: tuple = (1.5, 4.0, 2.0)  # half extents (x, y, z)
    jitter: float = 0.75

    def __post_init__(self):
        self.start_level = VertebraLevel(int(self.start_level))
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        if self.n_vertebrae < 1:
            raise ValueError("need at least one vertebra")
        if int(self.start_level) + self.n_vertebrae > NUM_LEVELS:
            raise PhantomOverflowError("start_level + n_vertebrae runs past L6")

    @property
    def pitch(self) -> float:
        return 2 * self.body_half_height * 1.1 + self.disc_gap


def _radius(spec: PhantomSpec, level: int) -> float:
    # bodies widen caudally, which gives each level a weak size cue
    return spec.body_radius * (0.85 + 0.3 * level / (NUM_LEVELS - 1))


def generate_phantom(spec: PhantomSpec, sample_id: str | None = None) -> Sample:
    X, Y, Z = spec.grid_shape
    rng = np.random.default_rng(spec.jitter_seed)
    r_max = spec.body_radius * 1.15 * 1.1
    px, py, pz = spec.process_size
    span = spec.n_vertebrae * spec.pitch
    margin = 2.0
    if span + 2 * margin > Z or 2 * (r_max + margin) > X or 2 * r_max + 2 * py + 2 * margin + 2 > Y:
        raise PhantomOverflowError(f"{spec.n_vertebrae} vertebrae do not fit in {spec.grid_shape}")

    gx, gy, gz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij", sparse=True)
    labels = np.zeros(spec.grid_shape, dtype=np.int16)
    image = np.full(spec.grid_shape, SOFT_TISSUE_HU, dtype=np.float32)
    cx0 = (X - 1) / 2.0
    cy0 = (Y - 1) / 2.0 + py  # leave room posteriorly for the process
    z_top = (Z - 1) / 2.0 + span / 2.0 - spec.pitch / 2.0
    centroids = []
    for i in range(spec.n_vertebrae):
        level = int(spec.start_level) + i
        j = rng.uniform(-spec.jitter, spec.jitter, size=3)
        size = rng.uniform(0.92, 1.08)
        cx, cy, cz = cx0 + j[0], cy0 + j[1], z_top - i * spec.pitch + j[2]
        r = _radius(spec, level) * size
        h = spec.body_half_height * size
        body = ((gx - cx) / r) ** 2 + ((gy - cy) / r) ** 2 + ((gz - cz) / h) ** 2 <= 1.0
        proc = (np.abs(gx - cx) <= px) & (gy >= cy - r - 2 * py) & (gy <= cy - r + 1.0) & (np.abs(gz - cz) <= pz)
        free = labels == 0
        labels[body & free] = level + 1
        image[body & free] = BODY_HU
        labels[proc & free & ~body] = level + 1
        image[proc & free & ~body] = PROCESS_HU
        centroids.append(Centroid3(VertebraLevel(level), cx, cy, cz))
    image += rng.normal(0.0, NOISE_HU, size=image.shape).astype(np.float32)
    sid = sample_id or f"phantom_{spec.jitter_seed:04d}"
    return Sample(ImageVolume(image, spec.spacing), LabelVolume(labels, spec.spacing), centroids, sid)
