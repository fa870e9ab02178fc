"""edgeforest: random-forest boundary detection over oriented edge labels."""

__version__ = "0.1.0"

from .label_space import LabelSpaceConfig, bin_params, decode, labels_for_orientation

__all__ = [
    "LabelSpaceConfig",
    "bin_params",
    "decode",
    "labels_for_orientation",
    "__version__",
]
