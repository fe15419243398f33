"""Network heads that read the stride-2 pyramid level."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..encode import crop_resample_many

HEAT_PRIOR = 0.1


def conv3(i, o):
    return nn.Conv3d(i, o, 3, padding=1)


class DetectionHead(nn.Module):
    """Shared 3-conv stem, then heatmap / offset / box-size blocks (C, 3, 6 channels)."""

    def __init__(self, in_ch: int, hidden: int, num_levels: int, size_init: float = 8.0):
        super().__init__()
        self.stem = nn.Sequential(
            conv3(in_ch, hidden), nn.ReLU(inplace=True),
            conv3(hidden, hidden), nn.ReLU(inplace=True),
            nn.Conv3d(hidden, hidden, 1), nn.ReLU(inplace=True),
        )
        self.heat = self._block(hidden, num_levels)
        self.offset = self._block(hidden, 3)
        self.size = self._block(hidden, 6)
        nn.init.constant_(self.heat[-1].bias, -math.log((1 - HEAT_PRIOR) / HEAT_PRIOR))
        nn.init.constant_(self.offset[-1].bias, 0.5)
        # softplus(x) ~= x for x >> 1, so this starts boxes near size_init voxels per side
        nn.init.constant_(self.size[-1].bias, size_init)

    @staticmethod
    def _block(hidden, out):
        return nn.Sequential(
            conv3(hidden, hidden), nn.ReLU(inplace=True),
            conv3(hidden, hidden), nn.ReLU(inplace=True),
            nn.Conv3d(hidden, out, 1),
        )

    def forward(self, p1, heat_only: bool = False):
        x = self.stem(p1)
        heat = self.heat(x)
        if heat_only:
            return heat, None, None
        return heat, self.offset(x), F.softplus(self.size(x))


def normalized_adjacency(adj: torch.Tensor, self_loops: bool = True) -> torch.Tensor:
    """Symmetric normalisation ``D^-1/2 (A + I) D^-1/2``."""
    a = adj + torch.eye(adj.shape[0], dtype=adj.dtype) if self_loops else adj
    d = a.sum(dim=1)
    inv = torch.where(d > 0, d.rsqrt(), torch.zeros_like(d))
    return inv[:, None] * a * inv[None, :]


def path_adjacency(n: int) -> torch.Tensor:
    a = torch.zeros(n, n)
    i = torch.arange(n - 1)
    a[i, i + 1] = 1.0
    a[i + 1, i] = 1.0
    return a


class GCNLayer(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, activation: bool = True):
        super().__init__()
        self.linear = nn.Linear(in_features, out_features, bias=bias)
        self.activation = activation

    def forward(self, x, adj_norm):
        x = self.linear(adj_norm @ x)
        return F.relu(x) if self.activation else x


class ClassificationBranch(nn.Module):
    """Per-level RoI features plus a position embedding, mixed by a GCN over the level chain."""

    def __init__(self, in_ch: int, hidden: int, num_levels: int, roi_shape=(7, 7, 7),
                 roi_extent: float = 15.0, gcn_layers: int = 3, level_embedding: bool = False):
        super().__init__()
        self.roi_shape = tuple(roi_shape)
        self.roi_extent = float(roi_extent)
        self.conv = nn.Sequential(
            nn.Conv3d(in_ch, hidden, self.roi_shape), nn.ReLU(inplace=True),
            nn.Conv3d(hidden, hidden, 1), nn.ReLU(inplace=True),
        )
        self.position = nn.Linear(3, hidden)
        # shared convs cannot tell which level a node stands for; this lets each node learn its own prior
        self.level_embed = nn.Parameter(torch.zeros(num_levels, hidden)) if level_embedding else None
        dims = [hidden] * gcn_layers + [1]
        self.gcn = nn.ModuleList(
            GCNLayer(dims[i], dims[i + 1], activation=i < gcn_layers - 1) for i in range(gcn_layers)
        )
        self.register_buffer("adj", normalized_adjacency(path_adjacency(num_levels)), persistent=False)

    def forward(self, p1: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        """``p1`` is ``(d, X, Y, Z)``; ``candidates`` ``(C, 3)`` downsampled voxel coords."""
        half = self.roi_extent / 2.0
        centre = candidates.to(p1.dtype) + 0.5
        boxes = torch.stack([centre - half, centre + half], dim=2).reshape(-1, 6)
        rois = crop_resample_many(p1, boxes, self.roi_shape)
        x = self.conv(rois).flatten(1)
        grid = torch.tensor(p1.shape[1:], dtype=p1.dtype)
        x = x + self.position(candidates.to(p1.dtype) / grid)
        if self.level_embed is not None:
            x = x + self.level_embed
        for layer in self.gcn:
            x = layer(x, self.adj.to(x.dtype))
        return x[:, 0]


def conv_in(i, o):
    return nn.Sequential(conv3(i, o), nn.InstanceNorm3d(o, affine=True), nn.ReLU(inplace=True))


class SegmentationBranch(nn.Module):
    """Two-path mask decoder: P1 crop (upsampled x2) joined with an image + Gaussian-prior crop."""

    def __init__(self, in_ch: int, ch: int, p1_shape=(24, 24, 16), img_shape=(48, 48, 32), sigma: float = 4.0,
                 n: int = 2):
        super().__init__()
        self.p1_shape, self.img_shape = tuple(p1_shape), tuple(img_shape)
        self.sigma, self.n = float(sigma), n
        self.p1_path = nn.Sequential(
            conv_in(in_ch, ch),
            nn.ConvTranspose3d(ch, ch, 2, stride=2), nn.InstanceNorm3d(ch, affine=True), nn.ReLU(inplace=True),
        )
        self.img_path = nn.Sequential(conv_in(2, ch), conv_in(ch, ch))
        self.fuse = nn.Sequential(conv_in(2 * ch, ch), conv_in(ch, ch), nn.Conv3d(ch, 1, 1))

    def prior_crops(self, centroids: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """Unnormalised Gaussian about each centroid, evaluated on its crop lattice."""
        axes = []
        for ax in range(3):
            m = self.img_shape[ax]
            lo, hi = boxes[:, 2 * ax], boxes[:, 2 * ax + 1]
            t = (torch.arange(m, dtype=boxes.dtype) + 0.5) / m
            idx = lo[:, None] + t[None, :] * (hi - lo)[:, None] - 0.5  # voxel-index coordinate
            axes.append(torch.exp(-((idx - centroids[:, ax:ax + 1]) ** 2) / (2 * self.sigma**2)))
        g = axes[0][:, :, None, None] * axes[1][:, None, :, None] * axes[2][:, None, None, :]
        return g.unsqueeze(1)

    def forward(self, image: torch.Tensor, p1: torch.Tensor, centroids: torch.Tensor, boxes: torch.Tensor):
        """``image`` ``(1, X, Y, Z)``; ``centroids`` ``(N, 3)`` and ``boxes`` ``(N, 6)`` at full resolution."""
        if boxes.shape[0] == 0:
            return image.new_zeros((0,) + self.img_shape)
        boxes = boxes.to(image.dtype)
        img = crop_resample_many(image, boxes, self.img_shape)
        prior = self.prior_crops(centroids.to(image.dtype), boxes).to(image.dtype)
        a = self.img_path(torch.cat([img, prior], dim=1))
        b = self.p1_path(crop_resample_many(p1, boxes / self.n, self.p1_shape))
        return self.fuse(torch.cat([b, a], dim=1))[:, 0]


def gaussian_prior(shape, centroid, sigma: float = 4.0) -> torch.Tensor:
    """Full-grid unnormalised Gaussian (peak 1 at ``centroid``)."""
    axes = [torch.arange(s, dtype=torch.float64) for s in shape]
    g = [torch.exp(-((a - float(c)) ** 2) / (2 * sigma**2)) for a, c in zip(axes, centroid)]
    return g[0][:, None, None] * g[1][None, :, None] * g[2][None, None, :]
