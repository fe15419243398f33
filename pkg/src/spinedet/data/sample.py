from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import Centroid3, ImageVolume, LabelVolume, center_of_mass


class InconsistentSampleError(ValueError):
    pass


@dataclass
class Sample:
    image: ImageVolume
    labels: LabelVolume
    centroids: list = field(default_factory=list)
    id: str = ""
    truncated: bool = False

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise InconsistentSampleError(f"image {self.image.shape} and labels {self.labels.shape} differ")
        if self.image.spacing != self.labels.spacing or not np.allclose(self.image.origin, self.labels.origin):
            raise InconsistentSampleError("image and labels disagree on spacing/origin")
        present = {int(lv) for lv in self.labels.levels()}
        levels = [int(c.level) for c in self.centroids]
        if len(set(levels)) != len(levels):
            raise InconsistentSampleError("duplicate centroid levels")
        if set(levels) - present:
            raise InconsistentSampleError(f"centroids without labels: {sorted(set(levels) - present)}")
        if present - set(levels):
            raise InconsistentSampleError(f"labels without centroids: {sorted(present - set(levels))}")
        self.centroids = sorted(self.centroids, key=lambda c: int(c.level))

    @property
    def shape(self):
        return self.image.shape

    def centroid(self, level) -> Centroid3 | None:
        return next((c for c in self.centroids if c.level == level), None)


def mass_centroids(labels: LabelVolume) -> list[Centroid3]:
    return [Centroid3(lv, *center_of_mass(labels.mask(lv))) for lv in labels.levels()]


def reconcile_centroids(labels: LabelVolume, centroids) -> list[Centroid3]:
    """Keep centroids whose level survives in ``labels``; fill missing ones from centres of mass."""
    present = set(labels.levels())
    kept = {c.level: c for c in centroids if c.level in present}
    for lv in present - set(kept):
        kept[lv] = Centroid3(lv, *center_of_mass(labels.mask(lv)))
    return sorted(kept.values(), key=lambda c: int(c.level))
