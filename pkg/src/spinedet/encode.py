"""Training targets (heatmaps, offsets) and the trilinear crop-resample primitive."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import NUM_LEVELS, BBox3, Centroid3, bbox_from_sizes, sizes_from_mask


class DuplicateLevelError(ValueError):
    pass


class OutOfGridError(ValueError):
    pass


def downsampled_voxel(c: Centroid3, n: int) -> tuple[int, int, int]:
    return tuple(int(v) for v in np.floor(c.xyz / n))


def gaussian_heatmap(centroids: Sequence[Centroid3], ds_shape: Sequence[int], n: int,
                     sigma: float, num_levels: int = NUM_LEVELS) -> np.ndarray:
    """Per-level Gaussian targets on the downsampled grid, shape ``(C, *ds_shape)``.

    Each Gaussian peaks at 1.0 on the voxel ``floor(c / n)``, the same voxel the
    offset in :func:`encode_offset` is measured from.
    """
    if n < 1 or sigma <= 0:
        raise ValueError("need n >= 1 and sigma > 0")
    ds_shape = tuple(int(s) for s in ds_shape)
    out = np.zeros((num_levels,) + ds_shape, dtype=np.float32)
    seen = set()
    axes = [np.arange(s, dtype=np.float64) for s in ds_shape]
    for c in centroids:
        if c.level in seen:
            raise DuplicateLevelError(f"level {c.level.name} given twice")
        seen.add(c.level)
        center = downsampled_voxel(c, n)
        if any(v < 0 or v >= s for v, s in zip(center, ds_shape)):
            raise OutOfGridError(f"centroid {c} falls outside the downsampled grid {ds_shape}")
        # separable: exp(-(dx²+dy²+dz²)/2σ²) = gx·gy·gz
        gx, gy, gz = (np.exp(-((a - v) ** 2) / (2.0 * sigma**2)) for a, v in zip(axes, center))
        out[int(c.level)] = (gx[:, None, None] * gy[None, :, None] * gz[None, None, :]).astype(np.float32)
    return out


def encode_offset(c: Centroid3, n: int) -> tuple[float, float, float]:
    q = c.xyz / n
    o = q - np.floor(q)
    return float(o[0]), float(o[1]), float(o[2])


def decode_centroid(ds_coord: Sequence[int], offset: Sequence[float], n: int) -> tuple[float, float, float]:
    return tuple(float(n * (d + o)) for d, o in zip(ds_coord, offset))


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def roi_grid(boxes: torch.Tensor, field_shape: Sequence[int], out_shape: Sequence[int]) -> torch.Tensor:
    """Sampling grid for ``grid_sample`` (align_corners=False), one lattice per box.

    ``boxes`` is ``(N, 6)`` as ``[x0, x1, y0, y1, z0, z1]``. Output samples sit at
    the cell centres of a regular ``out_shape`` lattice spanning each box.
    """
    boxes = boxes.to(torch.float64)
    coords = []
    for ax in range(3):
        m = int(out_shape[ax])
        lo, hi = boxes[:, 2 * ax], boxes[:, 2 * ax + 1]
        t = (torch.arange(m, dtype=torch.float64) + 0.5) / m
        p = lo[:, None] + t[None, :] * (hi - lo)[:, None]
        coords.append(2.0 * p / field_shape[ax] - 1.0)
    n = boxes.shape[0]
    ox, oy, oz = (int(s) for s in out_shape)
    gx = coords[0][:, :, None, None].expand(n, ox, oy, oz)
    gy = coords[1][:, None, :, None].expand(n, ox, oy, oz)
    gz = coords[2][:, None, None, :].expand(n, ox, oy, oz)
    # grid_sample wants (W, H, D) order in the last dim: our (Z, Y, X)
    return torch.stack([gz, gy, gx], dim=-1)


def crop_resample_many(field, boxes, out_shape: Sequence[int], padding: str = "zeros") -> torch.Tensor:
    """Crop ``(C, X, Y, Z)`` at each of ``(N, 6)`` boxes; returns ``(N, C, *out_shape)``."""
    field = _as_tensor(field)
    boxes = _as_tensor(boxes).reshape(-1, 6)
    n = boxes.shape[0]
    if n == 0:
        return field.new_zeros((0, field.shape[0]) + tuple(int(s) for s in out_shape))
    grid = roi_grid(boxes, field.shape[1:], out_shape).to(field.dtype)
    inp = field.unsqueeze(0).expand(n, *field.shape)
    return F.grid_sample(inp, grid, mode="bilinear", padding_mode=padding, align_corners=False)


def crop_resample(field, box: BBox3, out_shape: Sequence[int], padding: str = "zeros"):
    """Trilinear crop of a 3D ``(X, Y, Z)`` or 4D ``(C, X, Y, Z)`` field over ``box``.

    Numpy in, numpy out; tensors stay tensors (and stay differentiable).
    """
    is_np = not isinstance(field, torch.Tensor)
    t = _as_tensor(field)
    if not t.is_floating_point():
        t = t.float()
    squeeze = t.dim() == 3
    if squeeze:
        t = t.unsqueeze(0)
    b = torch.as_tensor(box.as_array()).reshape(1, 6)
    out = crop_resample_many(t, b, out_shape, padding)[0]
    if squeeze:
        out = out[0]
    return out.numpy() if is_np else out


def box_footprint(box: BBox3, full_shape: Sequence[int]):
    """Index range of full-grid voxels whose centres lie inside ``box`` (clipped to the grid)."""
    a = np.clip(np.ceil(box.lo - 0.5), 0, None).astype(int)
    b = np.minimum(np.ceil(box.hi - 0.5).astype(int), np.asarray(full_shape))
    return a, b


def paste_probability(mask_logits, box: BBox3, full_shape: Sequence[int]):
    """Sigmoid of mask logits resampled onto the footprint of ``box``.

    Returns ``(probs, slices)`` where ``probs`` covers ``full[slices]``; ``None``
    when the box misses the grid.
    """
    logits = _as_tensor(mask_logits).detach().to(torch.float64)
    a, b = box_footprint(box, full_shape)
    if np.any(b <= a):
        return None
    m = np.asarray(logits.shape, dtype=float)
    lo, hi = box.lo, box.hi
    inner = BBox3.from_lohi((a - lo) * m / (hi - lo), (b - lo) * m / (hi - lo))
    probs = crop_resample(torch.sigmoid(logits), inner, tuple(b - a), padding="border")
    slices = tuple(slice(int(i), int(j)) for i, j in zip(a, b))
    return probs.numpy(), slices


def paste_mask(mask_logits, box: BBox3, full_shape: Sequence[int], threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    out = np.zeros(tuple(int(s) for s in full_shape), dtype=bool)
    pasted = paste_probability(mask_logits, box, full_shape)
    if pasted is not None:
        probs, slices = pasted
        out[slices] = probs > threshold
    return out


@dataclass
class Targets:
    """Dense and per-level ground truth for one volume (rows indexed by level)."""

    heatmap: np.ndarray  # (C, *ds_shape)
    active: np.ndarray  # (C,) bool
    centroids: np.ndarray  # (C, 3) full-res, NaN when inactive
    ds_coords: np.ndarray  # (C, 3) int, -1 when inactive
    offsets: np.ndarray  # (C, 3)
    boxes: np.ndarray  # (C, 6) full-res, NaN when inactive
    labels: np.ndarray  # full-res internal label values

    @property
    def levels(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.active)]


def build_targets(centroids: Sequence[Centroid3], labels: np.ndarray, n: int, sigma: float,
                  num_levels: int = NUM_LEVELS) -> Targets:
    labels = np.asarray(labels)
    ds_shape = tuple(s // n for s in labels.shape)
    active = np.zeros(num_levels, dtype=bool)
    cen = np.full((num_levels, 3), np.nan)
    ds = np.full((num_levels, 3), -1, dtype=np.int64)
    off = np.zeros((num_levels, 3))
    boxes = np.full((num_levels, 6), np.nan)
    kept = []
    for c in centroids:
        if not np.any(labels == int(c.level) + 1):
            continue
        lv = int(c.level)
        active[lv] = True
        cen[lv] = c.xyz
        ds[lv] = downsampled_voxel(c, n)
        off[lv] = encode_offset(c, n)
        boxes[lv] = bbox_from_sizes(c, sizes_from_mask(labels, c)).as_array()
        kept.append(c)
    heat = gaussian_heatmap(kept, ds_shape, n, sigma, num_levels)
    return Targets(heat, active, cen, ds, off, boxes, labels)
