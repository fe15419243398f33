"""Spatial conditioning and augmentation that keep labels and centroids in step with the image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..core import ImageVolume, LabelVolume, Spacing
from .sample import Sample, reconcile_centroids

HU_MIN, HU_MAX = -1000.0, 2000.0


def normalize_intensity(values: np.ndarray) -> np.ndarray:
    """Clamp to the CT bone window and map it linearly onto [-1, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float32), HU_MIN, HU_MAX)
    return (2.0 * (v - HU_MIN) / (HU_MAX - HU_MIN) - 1.0).astype(np.float32)


def _with_geometry(sample: Sample, image: np.ndarray, labels: np.ndarray, spacing: Spacing, origin,
                   centroids, truncated: bool | None = None) -> Sample:
    lab = LabelVolume(labels, spacing, origin)
    return Sample(
        ImageVolume(image, spacing, origin), lab, reconcile_centroids(lab, centroids), sample.id,
        sample.truncated if truncated is None else truncated,
    )


def resample_to(sample: Sample, spacing: Spacing) -> Sample:
    """Trilinear image / nearest-neighbour labels onto a new voxel spacing (origin kept)."""
    old = sample.image.spacing.as_array()
    new = spacing.as_array()
    if np.array_equal(old, new):
        return _with_geometry(sample, sample.image.values.copy(), sample.labels.values.copy(), spacing,
                              sample.image.origin, sample.centroids)
    shape = np.maximum(np.round(np.asarray(sample.shape) * old / new).astype(int), 1)
    scale = new / old  # output index -> input index
    img = ndimage.affine_transform(sample.image.values.astype(np.float32), np.diag(scale), output_shape=tuple(shape),
                                   order=1, mode="nearest")
    lab = ndimage.affine_transform(sample.labels.values, np.diag(scale), output_shape=tuple(shape), order=0,
                                   mode="constant", cval=0)
    cents = [c.moved(c.xyz / scale) for c in sample.centroids]
    return _with_geometry(sample, img, lab, spacing, sample.image.origin, cents)


def _window_starts(sample: Sample, target) -> np.ndarray:
    shape = np.asarray(sample.shape)
    target = np.asarray(target)
    idx = np.argwhere(sample.labels.values > 0)
    if idx.size == 0:
        return (shape - target) // 2
    lo, hi = idx.min(axis=0), idx.max(axis=0)
    start = np.round((lo + hi) / 2.0 - (target - 1) / 2.0).astype(int)
    # stay inside the image when it is large enough, otherwise keep the image inside the window
    start = np.clip(start, np.minimum(0, shape - target), np.maximum(0, shape - target))
    fits = hi - lo + 1 <= target
    start = np.where(fits, np.clip(start, hi + 1 - target, lo), start)
    return start


def extract_window(values: np.ndarray, start, target, fill) -> np.ndarray:
    out = np.full(tuple(int(t) for t in target), fill, dtype=values.dtype)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(np.asarray(start) + target, values.shape)
    if np.any(src_hi <= src_lo):
        return out
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    out[tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))] = values[tuple(slice(a, b) for a, b in zip(src_lo, src_hi))]
    return out


def pad_crop(sample: Sample, target_shape) -> Sample:
    """Fixed-size window placed over the labelled extent; pads with the image minimum."""
    target = np.asarray([int(t) for t in target_shape])
    if np.any(target < 1):
        raise ValueError("target_shape must be positive")
    start = _window_starts(sample, target)
    img = extract_window(sample.image.values, start, target, sample.image.values.min())
    lab = extract_window(sample.labels.values, start, target, 0)
    lost = int((sample.labels.values > 0).sum()) - int((lab > 0).sum())
    origin = np.asarray(sample.image.origin) + start * sample.image.spacing.as_array()
    cents = [c.moved(c.xyz - start) for c in sample.centroids]
    cents = [c for c in cents if np.all(c.xyz >= 0) and np.all(c.xyz < target)]
    return _with_geometry(sample, img, lab, sample.image.spacing, tuple(origin), cents,
                          truncated=sample.truncated or lost > 0)


@dataclass
class AugmentParams:
    max_translation: float = 10.0  # voxels per axis
    max_rotation_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    flip_probability: float = 0.5
    elastic_grid: int = 3  # control points per axis
    elastic_max: float = 3.0  # voxels

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0, 3, 0.0)


def _rotation(angles) -> np.ndarray:
    ax, ay, az = angles
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _random_transform(shape, params: AugmentParams, rng: np.random.Generator):
    """Output->input map ``q = A (p + e(p) - c) + c + t``; returns (A, t, elastic field or None)."""
    angles = np.deg2rad(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg, 3))
    scale = rng.uniform(*params.scale_range, 3)
    t = rng.uniform(-params.max_translation, params.max_translation, 3)
    flip = rng.random() < params.flip_probability
    a = _rotation(angles) @ np.diag(1.0 / scale)
    if flip:
        a = a @ np.diag([-1.0, 1.0, 1.0])  # left-right
    field = None
    if params.elastic_max > 0:
        g = params.elastic_grid
        coarse = rng.uniform(-params.elastic_max, params.elastic_max, size=(3, g, g, g))
        zoom = [s / g for s in shape]
        field = np.stack([ndimage.zoom(c, zoom, order=1, mode="nearest", grid_mode=True) for c in coarse])
        field = field[(slice(None),) + tuple(slice(0, s) for s in shape)]
    return a, t, field


def _sample_coords(shape, a, t, field):
    c = (np.asarray(shape) - 1) / 2.0
    grid = np.indices(shape, dtype=np.float64)
    if field is not None:
        grid = grid + field
    q = np.einsum("ij,j...->i...", a, grid - c[:, None, None, None])
    return q + (c + t)[:, None, None, None]


def _forward_point(p_in, shape, a, t, field, iters: int = 20) -> np.ndarray:
    """Invert the output->input map for one point by fixed-point iteration."""
    c = (np.asarray(shape) - 1) / 2.0
    base = np.linalg.solve(a, np.asarray(p_in) - c - t) + c
    p = base.copy()
    if field is None:
        return p
    for _ in range(iters):
        e = np.array([ndimage.map_coordinates(f, p[:, None], order=1, mode="nearest")[0] for f in field])
        p = base - e
    return p


def augment(sample: Sample, seed: int, params: AugmentParams | None = None) -> Sample:
    """Random affine (translate/rotate/scale/flip) composed with a smooth elastic warp.

    Image (trilinear) and labels (nearest) share one transform; centroids follow it analytically.
    """
    params = params or AugmentParams()
    rng = np.random.default_rng(seed)
    shape = sample.shape
    a, t, field = _random_transform(shape, params, rng)
    if np.allclose(a, np.eye(3)) and not np.any(t) and (field is None or not np.any(field)):
        return _with_geometry(sample, sample.image.values.copy(), sample.labels.values.copy(),
                              sample.image.spacing, sample.image.origin, sample.centroids)
    coords = _sample_coords(shape, a, t, field)
    fill = float(sample.image.values.min())
    img = ndimage.map_coordinates(sample.image.values.astype(np.float32), coords, order=1, mode="constant", cval=fill)
    lab = ndimage.map_coordinates(sample.labels.values, coords, order=0, mode="constant", cval=0)
    cents = [c.moved(_forward_point(c.xyz, shape, a, t, field)) for c in sample.centroids]
    cents = [c for c in cents if np.all(c.xyz >= 0) and np.all(c.xyz < np.asarray(shape))]
    return _with_geometry(sample, img.astype(np.float32), lab, sample.image.spacing, sample.image.origin, cents)
