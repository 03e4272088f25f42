"""Weakly supervised segmentation by reconstruction from a mask-weighted image decomposition."""

from decompseg.core import (
    LossWeights,
    TagLabel,
    average_mask_score,
    check_decomposition,
    check_image_batch,
    check_mask_stack,
    component_images,
    recompose,
)
from decompseg.errors import (
    ConfigurationError,
    DimensionError,
    InputError,
    LoadError,
    NumericError,
    ResourceError,
    SpecMismatchError,
)
from decompseg.losses import (
    LossReport,
    loss_classifier,
    loss_cls,
    loss_mask,
    loss_recon,
    loss_total,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "InputError",
    "LoadError",
    "LossReport",
    "LossWeights",
    "NumericError",
    "ResourceError",
    "SpecMismatchError",
    "TagLabel",
    "average_mask_score",
    "check_decomposition",
    "check_image_batch",
    "check_mask_stack",
    "component_images",
    "loss_classifier",
    "loss_cls",
    "loss_mask",
    "loss_recon",
    "loss_total",
    "recompose",
]
