from .backbone import ResNetFPN
from .heads import (ClassificationBranch, DetectionHead, GCNLayer, SegmentationBranch, gaussian_prior,
                    normalized_adjacency, path_adjacency)
from .network import (IncompatibleCheckpointError, MissingTargetsError, ModelConfig, NetworkOutputs,
                      SpineDetector, heatmap_argmax, load_checkpoint, save_checkpoint)
