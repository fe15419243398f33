from .io import (load_sample, load_split, read_manifest, read_sidecar, read_volume, save_sample, verse_to_level,
                 level_to_verse, write_manifest, write_sidecar, write_volume)
from .phantom import PhantomOverflowError, PhantomSpec, generate_phantom
from .sample import InconsistentSampleError, Sample, mass_centroids
from .transforms import AugmentParams, augment, normalize_intensity, pad_crop, resample_to
