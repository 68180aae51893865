"""Two-stage semi-supervised segmentation of vertebral bodies and discs in 3D spine MR.

Stage one runs a pair of 2D encoder-decoder networks on downsampled slice
triplets, cross-supervised on unlabeled data, and emits per-slice confidence
maps plus fused decoder features.  Stage two crops aligned full-resolution /
quarter-resolution 3D patches, runs a z-preserving 3D network, fuses the two
paths with inter-slice / intra-slice / channel attention, and stitches patch
predictions back into whole volumes.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, compact_config
from .preprocess import (
    LabelMap,
    Provenance,
    Volume,
    load_volume,
    preprocess_subject,
    restore_labels_to_original,
)

__all__ = [
    "ExperimentConfig",
    "LabelMap",
    "Provenance",
    "Volume",
    "compact_config",
    "load_volume",
    "preprocess_subject",
    "restore_labels_to_original",
    "__version__",
]
