"""Label-matched Dice with bootstrap intervals, plus report files."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Centroid3, LabelVolume, Spacing, VertebraLevel


class GridMismatchError(ValueError):
    pass


class TooFewSamplesError(ValueError):
    pass


def _values(v):
    return v.values if isinstance(v, LabelVolume) else np.asarray(v)


def label_matched_dsc(pred, gt, levels: Sequence[int] | None = None) -> dict:
    """Dice per level, computed only between voxels carrying the same label.

    Defaults to the levels present in ``gt``. A level absent from both volumes
    is skipped. Keys are :class:`VertebraLevel`.
    """
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise GridMismatchError(f"prediction grid {p.shape} != ground truth grid {g.shape}")
    if levels is None:
        values = [int(v) for v in np.unique(g) if v > 0]
    else:
        values = [int(lv) + 1 for lv in levels]
    # one pass of bincount instead of a mask per level
    k = int(max(p.max(initial=0), g.max(initial=0))) + 1
    inter = np.bincount(p[p == g].ravel().astype(np.int64), minlength=k)
    cp = np.bincount(p.ravel().astype(np.int64), minlength=k)
    cg = np.bincount(g.ravel().astype(np.int64), minlength=k)
    out = {}
    for v in values:
        if v >= k:
            continue
        denom = cp[v] + cg[v]
        if denom:
            out[VertebraLevel(v - 1)] = 2.0 * inter[v] / denom
    return out


def false_positive_levels(pred, gt) -> list:
    p, g = set(np.unique(_values(pred)).tolist()), set(np.unique(_values(gt)).tolist())
    return [VertebraLevel(v - 1) for v in sorted(p - g) if v > 0]


def centroid_error(pred: Sequence[Centroid3], gt: Sequence[Centroid3], spacing: Spacing):
    """Physical distances (mm) per level found in both sets, plus the missed gt levels."""
    sp = spacing.as_array()
    by_level = {c.level: c for c in pred}
    dist, missed = {}, []
    for c in gt:
        if c.level in by_level:
            dist[c.level] = float(np.linalg.norm((by_level[c.level].xyz - c.xyz) * sp))
        else:
            missed.append(c.level)
    return dist, missed


def bootstrap_ci(values, confidence: float = 0.95, n_resamples: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise TooFewSamplesError("bootstrap needs at least two values")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    tail = (1.0 - confidence) / 2.0 * 100.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    per_sample: dict = field(default_factory=dict)  # id -> {level name: dsc}
    false_positives: dict = field(default_factory=dict)  # id -> [level names]
    centroid_mm: dict = field(default_factory=dict)  # id -> {level name: mm}
    missed: dict = field(default_factory=dict)  # id -> [level names]
    variant: str = "w/ PP"
    ci_method: str = "percentile bootstrap"
    seed: int = 0

    def sample_means(self) -> dict:
        return {sid: float(np.mean(list(d.values()))) if d else 0.0 for sid, d in self.per_sample.items()}

    @property
    def mean_dsc(self) -> float:
        m = list(self.sample_means().values())
        return float(np.mean(m)) if m else 0.0

    def ci(self, n_resamples: int = 2000):
        m = list(self.sample_means().values())
        if len(m) < 2:
            return (self.mean_dsc, self.mean_dsc)
        return bootstrap_ci(m, n_resamples=n_resamples, seed=self.seed)

    @property
    def identification_rate(self) -> float:
        found = sum(len(d) for d in self.centroid_mm.values())
        total = found + sum(len(v) for v in self.missed.values())
        return found / total if total else 0.0

    def summary(self) -> dict:
        lo, hi = self.ci()
        dists = [v for d in self.centroid_mm.values() for v in d.values()]
        return {
            "variant": self.variant,
            "mean_dsc": self.mean_dsc,
            "ci_low": lo,
            "ci_high": hi,
            "ci_method": self.ci_method,
            "n_samples": len(self.per_sample),
            "mean_centroid_mm": float(np.mean(dists)) if dists else None,
            "identification_rate": self.identification_rate,
        }


def add_sample(report: EvalReport, sid: str, pred: LabelVolume, gt: LabelVolume,
               pred_centroids=None, gt_centroids=None) -> None:
    dsc = label_matched_dsc(pred, gt)
    report.per_sample[sid] = {lv.name: float(v) for lv, v in dsc.items()}
    report.false_positives[sid] = [lv.name for lv in false_positive_levels(pred, gt)]
    if pred_centroids is not None and gt_centroids is not None:
        dist, missed = centroid_error(pred_centroids, gt_centroids, gt.spacing)
        report.centroid_mm[sid] = {lv.name: v for lv, v in dist.items()}
        report.missed[sid] = [lv.name for lv in missed]


CSV_COLUMNS = ["sample", "level", "dsc", "centroid_mm"]


def emit_report(report: EvalReport, path, fmt: str | None = None) -> Path:
    """Write ``report`` as JSON (structured text) or CSV, picked from ``fmt`` or the suffix."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        doc = {"summary": report.summary() if report.per_sample else None, **asdict(report)}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for sid in sorted(report.per_sample):
                mm = report.centroid_mm.get(sid, {})
                for lv in sorted(report.per_sample[sid], key=lambda n: VertebraLevel[n]):
                    w.writerow([sid, lv, repr(report.per_sample[sid][lv]), repr(mm[lv]) if lv in mm else ""])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> EvalReport:
    path = Path(path)
    if path.suffix == ".csv":
        rep = EvalReport()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rep.per_sample.setdefault(row["sample"], {})[row["level"]] = float(row["dsc"])
                if row["centroid_mm"]:
                    rep.centroid_mm.setdefault(row["sample"], {})[row["level"]] = float(row["centroid_mm"])
        return rep
    doc = json.loads(path.read_text())
    doc.pop("summary", None)
    return EvalReport(**doc)


def summarize_many(reports: Mapping[str, EvalReport]) -> list[dict]:
    return [r.summary() for r in reports.values()]
