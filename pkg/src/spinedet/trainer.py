"""Phased training loop with validation-based checkpoint selection."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from . import losses as L
from .core import BBox3, Centroid3, Spacing
from .data.sample import Sample
from .data.transforms import AugmentParams, augment, extract_window, normalize_intensity, pad_crop, resample_to
from .decode import DecodeConfig, Detection
from .encode import Targets, build_targets, crop_resample_many, paste_probability
from .evaluate import label_matched_dsc
from .model import ModelConfig, SpineDetector, heatmap_argmax, save_checkpoint

log = logging.getLogger(__name__)

SELF_INIT, GT_BOX, PRED_BOX = "self_init", "gt_box", "pred_box"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainingSchedule:
    self_init_epochs: int = 500
    gt_box_epochs_after_init: int = 100
    heat_loss_switch_threshold: float = 1.0
    sigma_initial: float = 3.0
    sigma_after_init: float = 2.0
    epsilon_prime: int = 100
    epsilon_origin: str = "start"  # or "self_init_end"
    total_epochs: int = 1500
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    eval_interval: int = 5
    heat_ema_decay: float = 0.9
    use_gcn: bool = True
    use_dist_loss: bool = True
    use_self_init: bool = True
    heat_mode: str = "scheduled"
    alpha: float = 2.0
    beta: float = 4.0
    gamma: float = 1e-4
    lambda_form: str = "repaired"
    dist_form: str = "residual"
    augment: bool = True
    loss_weights: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.self_init_epochs < 0 or self.gt_box_epochs_after_init < 0:
            raise ConfigurationError("epoch counts must be >= 0")
        if self.heat_loss_switch_threshold <= 0 or self.learning_rate <= 0:
            raise ConfigurationError("thresholds and learning rate must be positive")
        if self.eval_interval < 1:
            raise ConfigurationError("eval_interval must be >= 1")
        if self.epsilon_origin not in ("start", "self_init_end"):
            raise ConfigurationError(f"unknown epsilon_origin {self.epsilon_origin!r}")

    @property
    def init_epochs(self) -> int:
        return self.self_init_epochs if self.use_self_init else 0

    def heat_epoch(self, epoch: int) -> int:
        """Epoch index fed to the MSE/focal mixing schedule."""
        return epoch - self.init_epochs if self.epsilon_origin == "self_init_end" else epoch

    def heat_config(self) -> L.HeatLossConfig:
        mode = {"scheduled": "scheduled", "focal": "focal_only", "focal_only": "focal_only",
                "mse": "mse_only", "mse_only": "mse_only"}.get(self.heat_mode)
        if mode is None:
            raise ConfigurationError(f"unknown heat mode {self.heat_mode!r}")
        return L.HeatLossConfig(self.alpha, self.beta, self.epsilon_prime, self.gamma, mode, self.lambda_form)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSchedule":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def desk_model_config(**kw) -> ModelConfig:
    return ModelConfig(**{"input_shape": (64, 64, 128), "scale_factor": 0.25, **kw})


def desk_schedule(**kw) -> TrainingSchedule:
    # 400 optimiser steps in total, so a faster lr; augmentation only fights an overfit check
    base = dict(total_epochs=200, self_init_epochs=50, gt_box_epochs_after_init=20, eval_interval=5,
                learning_rate=3e-4, augment=False)
    base.update(kw)
    return TrainingSchedule(**base)


@dataclass
class TrainState:
    epoch: int = 0
    switched_to_pred_boxes: bool = False
    best_validation_dsc: float = -1.0
    best_epoch: int = -1
    heat_ema: float | None = None
    step: int = 0


def phase_for_epoch(state: TrainState, last_heat_loss: float | None, schedule: TrainingSchedule) -> str:
    """Phase for ``state.epoch``; the switch to predicted boxes latches on ``state``."""
    init = schedule.init_epochs
    if state.epoch < init:
        return SELF_INIT
    if state.switched_to_pred_boxes:
        return PRED_BOX
    if (state.epoch >= init + schedule.gt_box_epochs_after_init and last_heat_loss is not None
            and last_heat_loss < schedule.heat_loss_switch_threshold):
        state.switched_to_pred_boxes = True
        return PRED_BOX
    return GT_BOX


def sigma_for_epoch(state: TrainState, schedule: TrainingSchedule) -> float:
    return schedule.sigma_initial if state.epoch < schedule.init_epochs else schedule.sigma_after_init


def prepare_sample(sample: Sample, cfg: ModelConfig, spacing: Spacing | None = None) -> Sample:
    """Bring a sample onto the network grid and normalise its intensities."""
    if spacing is not None:
        sample = resample_to(sample, spacing)
    sample = pad_crop(sample, cfg.input_shape)
    sample.image.values = normalize_intensity(sample.image.values)
    return sample


def image_tensor(sample: Sample) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.image.values, dtype=np.float32))[None, None]


def soft_centroids(heat_logits: torch.Tensor, levels: Sequence[int], radius: int = 2) -> torch.Tensor:
    """Differentiable per-level peak positions: probability-weighted mean in a window around the argmax."""
    peaks = heatmap_argmax(heat_logits.detach())
    out = heat_logits.new_zeros((heat_logits.shape[0], 3))
    shape = heat_logits.shape[1:]
    for lv in levels:
        lo = [max(int(p) - radius, 0) for p in peaks[lv]]
        hi = [min(int(p) + radius + 1, s) for p, s in zip(peaks[lv], shape)]
        win = torch.sigmoid(heat_logits[lv, lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]])
        grids = torch.meshgrid(*[torch.arange(a, b, dtype=win.dtype) for a, b in zip(lo, hi)], indexing="ij")
        w = win / win.sum()
        out[lv] = torch.stack([(w * g).sum() for g in grids])
    return out


def gt_mask_crops(t: Targets, levels, boxes: torch.Tensor, out_shape) -> torch.Tensor:
    if len(levels) == 0:
        return torch.zeros((0,) + tuple(out_shape))
    masks = torch.stack([torch.from_numpy((t.labels == lv + 1).astype(np.float32)) for lv in levels])
    crops = []
    for i in range(len(levels)):
        crops.append(crop_resample_many(masks[i:i + 1], boxes[i:i + 1].to(torch.float32), out_shape)[0, 0])
    return (torch.stack(crops) > 0.5).float()


def compute_losses(model: SpineDetector, out, targets: list[Targets], phase: str, epoch: int,
                   schedule: TrainingSchedule) -> dict:
    heat_gt = torch.from_numpy(np.stack([t.heatmap for t in targets]))
    terms = {"heat": L.heatmap_loss(out.heatmap_logits, heat_gt, schedule.heat_epoch(epoch),
                                    schedule.heat_config())}
    if phase == SELF_INIT:
        return terms
    off_p, off_g, size_p, box_g, cen_g = [], [], [], [], []
    cls_terms, dist_terms, seg_p, seg_g = [], [], [], []
    for b, t in enumerate(targets):
        lv = t.levels
        x, y, z = (torch.as_tensor(t.ds_coords[lv][:, i]) for i in range(3))
        off_p.append(out.offsets[b][:, x, y, z].T)
        off_g.append(torch.as_tensor(t.offsets[lv], dtype=torch.float32))
        size_p.append(out.bbox_sizes[b][:, x, y, z].T)
        box_g.append(torch.as_tensor(t.boxes[lv], dtype=torch.float32))
        cen_g.append(torch.as_tensor(t.centroids[lv], dtype=torch.float32))
        if out.class_logits is not None:
            cls_terms.append(L.class_loss(out.class_logits[b], torch.as_tensor(t.active)))
        if schedule.use_dist_loss:
            pred = soft_centroids(out.heatmap_logits[b], lv)
            gt = torch.as_tensor(np.where(t.active[:, None], t.ds_coords, 0), dtype=pred.dtype)
            dist_terms.append(L.dist_loss(pred, gt, torch.as_tensor(t.active), out.heatmap_logits.shape[2:],
                                          schedule.dist_form))
        seg_p.append(out.mask_logits[b])
        seg_g.append(gt_mask_crops(t, out.seg_levels[b], out.seg_boxes[b], model.cfg.roi_seg_img_shape))
    terms["offset"] = L.offset_loss(torch.cat(off_p), torch.cat(off_g))
    terms["bbox"] = L.bbox_loss(torch.cat(size_p), torch.cat(box_g), torch.cat(cen_g))
    if cls_terms:
        terms["class"] = torch.stack(cls_terms).mean()
    if dist_terms:
        terms["dist"] = torch.stack(dist_terms).mean()
    terms["seg"] = L.seg_loss(torch.cat(seg_p), torch.cat(seg_g))
    return terms


def train_step(model: SpineDetector, optimizer, batch: list[tuple[torch.Tensor, Targets]], state: TrainState,
               schedule: TrainingSchedule, phase: str) -> dict:
    """One optimisation step; returns the loss terms (floats) including ``total``."""
    model.train()
    images = torch.cat([img for img, _ in batch])
    targets = [t for _, t in batch]
    out = model(images, mode=phase, targets=targets)
    terms = compute_losses(model, out, targets, phase, state.epoch, schedule)
    for name, v in terms.items():
        if not torch.isfinite(v):
            raise NonFiniteLossError(name, float(v.detach()))
    total = L.total_loss(terms, weights=schedule.loss_weights)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    state.step += 1
    report = {k: float(v.detach()) for k, v in terms.items()}
    report["total"] = float(total.detach())
    return report


def make_optimizer(model, schedule: TrainingSchedule):
    return torch.optim.AdamW(model.parameters(), lr=schedule.learning_rate, weight_decay=schedule.weight_decay)


@torch.no_grad()
def predict(model: SpineDetector, image: torch.Tensor, decode_cfg: DecodeConfig | None = None,
            threshold: float = 0.5):
    """Label grid (internal values) and detections for one prepared ``(1, 1, X, Y, Z)`` image."""
    model.eval()
    out = model(image, mode="inference", decode_cfg=decode_cfg)
    shape = tuple(image.shape[2:])
    best = np.zeros(shape, dtype=np.float32)
    labels = np.zeros(shape, dtype=np.int16)
    dets = out.detections[0]
    for det, logits in zip(dets, out.mask_logits[0]):
        pasted = paste_probability(logits, det.box, shape)
        if pasted is None:
            continue
        probs, sl = pasted
        win_best, win_lab = best[sl], labels[sl]
        take = (probs > threshold) & (probs > win_best)
        win_best[take] = probs[take]
        win_lab[take] = int(det.level) + 1
    return labels, dets


def validation_dsc(model: SpineDetector, samples: Sequence[Sample], decode_cfg: DecodeConfig) -> float:
    scores = []
    for s in samples:
        pred, _ = predict(model, image_tensor(s), decode_cfg)
        d = label_matched_dsc(pred, s.labels)
        scores.append(float(np.mean(list(d.values()))) if d else 0.0)
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class FitResult:
    best_checkpoint: Path | None
    best_validation_dsc: float
    best_epoch: int
    state: TrainState
    log_path: Path


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def fit(model: SpineDetector, train: Sequence[Sample], val: Sequence[Sample], schedule: TrainingSchedule,
        out_dir, decode_cfg: DecodeConfig | None = None, max_epochs: int | None = None,
        augment_params: AugmentParams | None = None, checkpoint_extra: dict | None = None) -> FitResult:
    """Train on prepared samples, validating (without label ordering) every ``eval_interval`` epochs.

    Writes ``metrics.jsonl``, ``best.pt`` and ``last.pt`` under ``out_dir``.
    """
    if not val:
        raise ConfigurationError("validation set is empty")
    if not train:
        raise ConfigurationError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    log_path.write_text("")
    val_cfg = DecodeConfig(**{**asdict(decode_cfg or DecodeConfig()), "postprocess": False,
                              "use_class_logits": schedule.use_gcn})
    optimizer = make_optimizer(model, schedule)
    extra = dict(checkpoint_extra or {})
    state = TrainState()
    rng = np.random.default_rng(schedule.seed)
    n = model.cfg.downsample
    last_epoch = schedule.total_epochs if max_epochs is None else min(max_epochs, schedule.total_epochs)
    best_path = None
    for epoch in range(last_epoch):
        state.epoch = epoch
        phase = phase_for_epoch(state, state.heat_ema, schedule)
        sigma = sigma_for_epoch(state, schedule)
        sums: dict = {}
        for idx in rng.permutation(len(train)):
            s = train[idx]
            if schedule.augment:
                s = augment(s, int(rng.integers(2**31)), augment_params)
            t = build_targets(s.centroids, s.labels.values, n, sigma, model.cfg.num_levels)
            terms = train_step(model, optimizer, [(image_tensor(s), t)], state, schedule, phase)
            d = schedule.heat_ema_decay
            state.heat_ema = terms["heat"] if state.heat_ema is None else d * state.heat_ema + (1 - d) * terms["heat"]
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
        record = {"epoch": epoch, "phase": phase, "sigma": sigma}
        record.update({k: v / len(train) for k, v in sums.items()})
        record["heat_ema"] = state.heat_ema
        if (epoch + 1) % schedule.eval_interval == 0 or epoch == last_epoch - 1:
            dsc = 0.0 if phase == SELF_INIT else validation_dsc(model, val, val_cfg)
            record["val_dsc"] = dsc
            if dsc > state.best_validation_dsc:
                state.best_validation_dsc, state.best_epoch = dsc, epoch
                best_path = save_checkpoint(out_dir / "best.pt", model, schedule=asdict(schedule),
                                            train_state=asdict(state), **extra)
        with open(log_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        log.info("epoch %d %s %s", epoch, phase, {k: round(v, 4) for k, v in record.items() if isinstance(v, float)})
    state.epoch = last_epoch
    save_checkpoint(out_dir / "last.pt", model, schedule=asdict(schedule), train_state=asdict(state),
                    optimizer=optimizer.state_dict(), **extra)
    return FitResult(best_path, state.best_validation_dsc, state.best_epoch, state, log_path)


def build_model(cfg: ModelConfig, seed: int = 0) -> SpineDetector:
    torch.manual_seed(seed)
    return SpineDetector(cfg)


@dataclass
class VolumePrediction:
    labels: np.ndarray  # internal label values on the input grid
    detections: list  # Detection objects in input-grid voxel coordinates


def infer_volume(model: SpineDetector, values: np.ndarray, spacing: Spacing, target_spacing: Spacing | None = None,
                 decode_cfg: DecodeConfig | None = None) -> VolumePrediction:
    """Predict on an unlabelled volume of any size and map the result back onto its grid."""
    values = np.asarray(values, dtype=np.float32)
    in_shape = np.asarray(values.shape)
    scale = np.ones(3)
    work = values
    if target_spacing is not None and not np.allclose(spacing.as_array(), target_spacing.as_array()):
        scale = target_spacing.as_array() / spacing.as_array()  # working index -> input index
        shape = np.maximum(np.round(in_shape / scale).astype(int), 1)
        work = ndimage.affine_transform(values, np.diag(scale), output_shape=tuple(shape), order=1, mode="nearest")
    target = np.asarray(model.cfg.input_shape)
    start = (np.asarray(work.shape) - target) // 2
    window = extract_window(work, start, target, float(work.min()))
    image = torch.from_numpy(normalize_intensity(window))[None, None]
    pred, dets = predict(model, image, decode_cfg)

    full = extract_window(pred, -start, np.asarray(work.shape), 0)
    if not np.allclose(scale, 1.0):
        full = ndimage.affine_transform(full, np.diag(1.0 / scale), output_shape=tuple(in_shape), order=0, mode="constant",
                                        cval=0)
    mapped = []
    for d in dets:
        xyz = (d.centroid.xyz + start) * scale
        lo = (d.box.lo + start) * scale
        hi = (d.box.hi + start) * scale
        box = BBox3.from_lohi(lo, hi)
        mapped.append(Detection(d.level, Centroid3(d.level, *xyz), box, d.score, d.ds_coord))
    return VolumePrediction(full.astype(np.int16), mapped)
