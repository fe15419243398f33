from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from ..core import NUM_LEVELS
from ..decode import DecodeConfig, decode_detections
from ..encode import Targets
from .backbone import ResNetFPN
from .heads import ClassificationBranch, DetectionHead, SegmentationBranch

CHECKPOINT_FORMAT = "spinedet-checkpoint/1"
MODES = ("self_init", "gt_box", "pred_box", "inference")


class MissingTargetsError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Network hyper-parameters. Channel widths are multiplied by ``scale_factor``.

    Crop shapes are in ``(X, Y, Z)`` order; the short side of the segmentation
    crops is the axial one.
    """

    base_filters: int = 64
    fpn_channels: int = 256
    num_levels: int = NUM_LEVELS
    input_shape: tuple = (128, 128, 384)
    downsample: int = 2
    head_hidden: int = 128
    roi_class_shape: tuple = (7, 7, 7)
    roi_class_extent: float = 15.0
    roi_seg_p1_shape: tuple = (24, 24, 16)
    roi_seg_img_shape: tuple = (48, 48, 32)
    seg_channels: int = 64
    seg_gaussian_sigma: float = 4.0
    gcn_layers: int = 3
    use_gcn: bool = True
    level_embedding: bool = True  # learned per-level vector added to classifier nodes
    scale_factor: float = 1.0
    stage_depths: tuple = (3, 4, 6, 3)

    def __post_init__(self):
        for name in ("input_shape", "roi_class_shape", "roi_seg_p1_shape", "roi_seg_img_shape", "stage_depths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        stride = 2 ** len(self.stage_depths)
        if self.downsample != 2:
            raise ValueError("the backbone's finest pyramid level is fixed at stride 2")
        if any(s % stride for s in self.input_shape):
            raise ValueError(f"input_shape {self.input_shape} must be divisible by the total stride {stride}")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        if min(self.roi_class_shape + self.roi_seg_p1_shape + self.roi_seg_img_shape) < 1:
            raise ValueError("RoI shapes must be positive")

    def width(self, c: int) -> int:
        return max(1, int(round(c * self.scale_factor)))

    @property
    def ds_shape(self) -> tuple:
        return tuple(s // self.downsample for s in self.input_shape)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class NetworkOutputs:
    heatmap_logits: torch.Tensor  # (B, C, *ds)
    offsets: Optional[torch.Tensor] = None  # (B, 3, *ds)
    bbox_sizes: Optional[torch.Tensor] = None  # (B, 6, *ds)
    class_logits: Optional[torch.Tensor] = None  # (B, C)
    mask_logits: Optional[list] = None  # per sample (N_i, *roi_seg_img_shape)
    seg_levels: Optional[list] = None  # per sample [level, ...]
    seg_boxes: Optional[list] = None  # per sample (N_i, 6) full-res
    detections: Optional[list] = None  # per sample [Detection, ...] (inference only)
    candidates: Optional[list] = None  # per sample (C, 3) ds coords fed to the classifier


def heatmap_argmax(heat: torch.Tensor) -> torch.Tensor:
    """``(C, X, Y, Z)`` -> ``(C, 3)`` integer voxel of each channel's maximum."""
    c = heat.shape[0]
    flat = heat.reshape(c, -1).argmax(dim=1)
    dims = heat.shape[1:]
    z = flat % dims[2]
    y = (flat // dims[2]) % dims[1]
    x = flat // (dims[1] * dims[2])
    return torch.stack([x, y, z], dim=1)


class SpineDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width(cfg.fpn_channels)
        self.backbone = ResNetFPN(cfg.width(cfg.base_filters), d, cfg.stage_depths)
        self.detection = DetectionHead(d, cfg.width(cfg.head_hidden), cfg.num_levels)
        self.classification = None
        if cfg.use_gcn:
            self.classification = ClassificationBranch(
                d, cfg.width(cfg.head_hidden), cfg.num_levels, cfg.roi_class_shape, cfg.roi_class_extent,
                cfg.gcn_layers, level_embedding=cfg.level_embedding,
            )
        self.segmentation = SegmentationBranch(
            d, cfg.width(cfg.seg_channels), cfg.roi_seg_p1_shape, cfg.roi_seg_img_shape, cfg.seg_gaussian_sigma,
            cfg.downsample,
        )

    def backbone_forward(self, image: torch.Tensor) -> list:
        if tuple(image.shape[2:]) != self.cfg.input_shape or image.shape[1] != 1:
            raise ValueError(f"expected (B, 1, *{self.cfg.input_shape}) input, got {tuple(image.shape)}")
        return self.backbone(image)

    def forward(self, image: torch.Tensor, mode: str = "inference", targets: list[Targets] | None = None,
                decode_cfg: DecodeConfig | None = None) -> NetworkOutputs:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode in ("gt_box", "pred_box") and targets is None:
            raise MissingTargetsError(f"mode {mode!r} needs ground truth")
        p1 = self.backbone_forward(image)[0]
        heat, off, size = self.detection(p1, heat_only=mode == "self_init")
        out = NetworkOutputs(heat, off, size)
        if mode == "self_init":
            return out

        n = self.cfg.downsample
        cls_logits, cands = [], []
        masks, seg_levels, seg_boxes, dets = [], [], [], []
        for b in range(image.shape[0]):
            t = targets[b] if targets is not None else None
            cand = heatmap_argmax(heat[b].detach())
            if mode == "gt_box":
                act = torch.as_tensor(t.active)
                cand[act] = torch.as_tensor(t.ds_coords[t.active])
            cands.append(cand)
            if self.classification is not None:
                cls_logits.append(self.classification(p1[b], cand))

            if mode == "gt_box":
                levels = t.levels
                centroids = torch.as_tensor(t.centroids[levels])
                boxes = torch.as_tensor(t.boxes[levels])
            elif mode == "pred_box":
                levels = t.levels
                centroids, boxes = self._predicted_boxes(cand[levels], off[b].detach(), size[b].detach())
            else:
                cl = cls_logits[-1].detach().numpy() if cls_logits else None
                found = decode_detections(
                    heat[b].detach().numpy(), off[b].detach().numpy(), size[b].detach().numpy(), cl, n,
                    decode_cfg or DecodeConfig(),
                )
                dets.append(found)
                levels = [int(d.level) for d in found]
                centroids = torch.tensor(np.array([d.centroid.xyz for d in found]).reshape(-1, 3))
                boxes = torch.tensor(np.array([d.box.as_array() for d in found]).reshape(-1, 6))
            seg_levels.append(levels)
            seg_boxes.append(boxes)
            masks.append(self.segmentation(image[b], p1[b], centroids, boxes))

        out.class_logits = torch.stack(cls_logits) if cls_logits else None
        out.candidates = cands
        out.mask_logits, out.seg_levels, out.seg_boxes = masks, seg_levels, seg_boxes
        out.detections = dets if mode == "inference" else None
        return out

    def _predicted_boxes(self, coords: torch.Tensor, off: torch.Tensor, size: torch.Tensor):
        n = self.cfg.downsample
        x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
        o = off[:, x, y, z].T.clamp(0.0, 1.0 - 1e-6)
        s = size[:, x, y, z].T.clamp(min=0.5)
        cen = n * (coords.to(o.dtype) + o)
        lo, hi = cen - s[:, 0::2], cen + s[:, 1::2]
        boxes = torch.stack([lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1], lo[:, 2], hi[:, 2]], dim=1)
        return cen.to(torch.float64), boxes.to(torch.float64)


def save_checkpoint(path, model: SpineDetector, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": CHECKPOINT_FORMAT, "model_config": asdict(model.cfg), "state_dict": model.state_dict()}
    payload.update(extra)
    torch.save(payload, path)
    return path


def load_checkpoint(path, map_location="cpu") -> tuple[SpineDetector, dict]:
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise IncompatibleCheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    model = SpineDetector(ModelConfig.from_dict(payload["model_config"]))
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise IncompatibleCheckpointError(str(e)) from e
    model.eval()
    return model, payload
