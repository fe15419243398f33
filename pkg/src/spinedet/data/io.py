"""NIfTI volume I/O and the JSON files that accompany it.

On disk, label values follow the VerSe numbering (1-7 cervical, 8-19
thoracic, 20-25 lumbar incl. L6, 28 = T13). In memory, labels are
``level index + 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import nibabel as nib
import numpy as np

from ..core import Centroid3, ImageVolume, LabelVolume, Spacing, UnknownLevelError, VertebraLevel
from .sample import Sample, mass_centroids

T13_VERSE = 28


class MalformedSidecarError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def verse_to_level(value: int) -> VertebraLevel:
    v = int(value)
    if 1 <= v <= 19:
        return VertebraLevel(v - 1)
    if v == T13_VERSE:
        return VertebraLevel.T13
    if 20 <= v <= 25:
        return VertebraLevel(int(VertebraLevel.L1) + v - 20)
    raise UnknownLevelError(f"label value {v} is not a vertebral level")


def level_to_verse(level) -> int:
    lv = VertebraLevel(int(level))
    if lv == VertebraLevel.T13:
        return T13_VERSE
    if lv >= VertebraLevel.L1:
        return 20 + int(lv) - int(VertebraLevel.L1)
    return int(lv) + 1


def _verse_lut(to_internal: bool) -> np.ndarray:
    if to_internal:
        lut = np.full(256, -1, dtype=np.int16)
        lut[0] = 0
        for v in list(range(1, 26)) + [T13_VERSE]:
            lut[v] = int(verse_to_level(v)) + 1
    else:
        lut = np.zeros(27, dtype=np.int16)
        for lv in VertebraLevel:
            lut[int(lv) + 1] = level_to_verse(lv)
    return lut


def verse_labels_to_internal(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values)
    if v.size and (v.min() < 0 or v.max() > 255):
        bad = np.unique(v[(v < 0) | (v > 255)])
        raise UnknownLevelError(f"label values {bad.tolist()} are not vertebral levels")
    out = _verse_lut(True)[v.astype(np.int64)]
    if np.any(out < 0):
        bad = np.unique(v[out < 0])
        raise UnknownLevelError(f"label values {bad.tolist()} are not vertebral levels")
    return out


def internal_labels_to_verse(values: np.ndarray) -> np.ndarray:
    return _verse_lut(False)[np.asarray(values).astype(np.int64)]


@dataclass
class Orientation:
    """How a file's voxel grid maps onto the internal RAS-ordered grid."""

    transform: np.ndarray  # nibabel orientation transform, file -> RAS
    file_shape: tuple
    affine: np.ndarray  # original file affine

    def to_internal(self, data: np.ndarray) -> np.ndarray:
        return nib.orientations.apply_orientation(data, self.transform)

    def to_file(self, data: np.ndarray) -> np.ndarray:
        inv = nib.orientations.ornt_transform(
            nib.orientations.axcodes2ornt(("R", "A", "S")), nib.orientations.io_orientation(self.affine)
        )
        return nib.orientations.apply_orientation(data, inv)

    def point_to_internal(self, ijk) -> np.ndarray:
        # inv_ornt_aff maps internal voxel coords back to file voxel coords
        back = nib.orientations.inv_ornt_aff(self.transform, self.file_shape)
        return (np.linalg.inv(back) @ np.r_[np.asarray(ijk, dtype=float), 1.0])[:3]


def read_volume(path):
    """Load a NIfTI file reoriented to RAS voxel order; returns (data, spacing, origin, Orientation)."""
    img = nib.load(str(path))
    ornt = nib.orientations.io_orientation(img.affine)
    transform = nib.orientations.ornt_transform(ornt, nib.orientations.axcodes2ornt(("R", "A", "S")))
    orient = Orientation(transform, tuple(img.shape[:3]), img.affine)
    data = orient.to_internal(np.asanyarray(img.dataobj))
    ras = img.as_reoriented(transform)
    zooms = ras.header.get_zooms()[:3]
    return data, Spacing(*(float(z) for z in zooms)), tuple(float(v) for v in ras.affine[:3, 3]), orient


def write_volume(path, data: np.ndarray, spacing: Spacing, origin=(0.0, 0.0, 0.0), orientation: Orientation | None = None):
    """Write an internal (RAS-ordered) grid, optionally back in a source file's orientation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if orientation is not None:
        img = nib.Nifti1Image(orientation.to_file(data), orientation.affine)
    else:
        affine = np.diag(list(spacing.as_array()) + [1.0])
        affine[:3, 3] = origin
        img = nib.Nifti1Image(data, affine)
    img.set_qform(img.affine, code=1)
    img.set_sform(img.affine, code=1)
    nib.save(img, str(path))
    return path


def read_sidecar(path, orientation: Orientation | None = None) -> list[Centroid3]:
    """VerSe-style JSON list of ``{label, X, Y, Z}`` records in file voxel coordinates.

    A leading ``{"direction": ...}`` record (as VerSe ships) is skipped.
    """
    try:
        records = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedSidecarError(f"cannot read centroid sidecar {path}: {e}") from e
    if not isinstance(records, list):
        raise MalformedSidecarError(f"{path}: expected a list of records")
    out = []
    for rec in records:
        if isinstance(rec, dict) and "direction" in rec and "label" not in rec:
            continue
        try:
            level = verse_to_level(rec["label"])
            ijk = np.array([float(rec["X"]), float(rec["Y"]), float(rec["Z"])])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedSidecarError(f"{path}: bad record {rec!r}") from e
        if orientation is not None:
            ijk = orientation.point_to_internal(ijk)
        out.append(Centroid3(level, *ijk))
    return out


def write_sidecar(path, centroids, extra: dict | None = None) -> Path:
    path = Path(path)
    records = []
    for c in centroids:
        rec = {"label": level_to_verse(c.level), "X": float(c.x), "Y": float(c.y), "Z": float(c.z)}
        if extra and c.level in extra:
            rec.update(extra[c.level])
        records.append(rec)
    path.write_text(json.dumps(records, indent=1))
    return path


def load_sample(image_path, labels_path, centroid_path=None, sample_id: str | None = None) -> Sample:
    img, spacing, origin, orient = read_volume(image_path)
    lab, lspacing, lorigin, _ = read_volume(labels_path)
    if img.shape != lab.shape:
        raise ValueError(f"image {img.shape} and labels {lab.shape} differ in shape")
    labels = LabelVolume(verse_labels_to_internal(np.rint(lab).astype(np.int64)), spacing, origin)
    image = ImageVolume(np.asarray(img, dtype=np.float32), spacing, origin)
    if centroid_path:
        present = set(labels.levels())
        cents = [c for c in read_sidecar(centroid_path, orient) if c.level in present]
        have = {c.level for c in cents}
        cents += [c for c in mass_centroids(labels) if c.level not in have]
    else:
        cents = mass_centroids(labels)
    sid = sample_id or Path(image_path).name.split(".")[0]
    return Sample(image, labels, cents, sid)


def save_sample(sample: Sample, directory) -> dict:
    """Write ``<id>_ct.nii.gz``, ``<id>_seg.nii.gz`` and ``<id>_ctd.json``; returns a manifest entry."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entry = {"id": sample.id, "image": f"{sample.id}_ct.nii.gz", "labels": f"{sample.id}_seg.nii.gz",
             "centroids": f"{sample.id}_ctd.json"}
    write_volume(d / entry["image"], sample.image.values.astype(np.float32), sample.image.spacing, sample.image.origin)
    write_volume(d / entry["labels"], internal_labels_to_verse(sample.labels.values).astype(np.int16),
                 sample.labels.spacing, sample.labels.origin)
    write_sidecar(d / entry["centroids"], sample.centroids)
    return entry


def read_manifest(path) -> dict:
    """``{split: [{id, image, labels, centroids?}, ...]}`` with paths resolved against the manifest."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must map split names to sample lists")
    out = {}
    for split, entries in doc.items():
        if not isinstance(entries, list):
            raise ManifestError(f"{path}: split {split!r} is not a list")
        resolved = []
        for e in entries:
            if not isinstance(e, dict) or not {"id", "image", "labels"} <= set(e):
                raise ManifestError(f"{path}: bad entry {e!r}")
            r = dict(e)
            for k in ("image", "labels", "centroids"):
                if r.get(k):
                    r[k] = str((path.parent / r[k]).resolve())
            resolved.append(r)
        out[split] = resolved
    return out


def write_manifest(path, splits: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(splits, indent=1))
    return path


def load_split(manifest: dict, split: str) -> list[Sample]:
    return [load_sample(e["image"], e["labels"], e.get("centroids"), e["id"]) for e in manifest.get(split, [])]
