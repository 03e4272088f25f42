"""Domain types and the recomposition math shared by every other module.

Tensors follow the layout

* images        ``(B, 3, H, W)``, values in ``[0, 1]``
* masks         ``(B, K, H, W)``, a categorical distribution per pixel
* decomposition ``(B, K, 3, H, W)``, unbounded reals

Class index ``K - 1`` (the last one) is always the background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from decompseg.errors import DimensionError, InputError

MASK_SUM_TOL = 1e-5
SOFT_SUM_TOL = 1e-6


def check_image_batch(image: torch.Tensor) -> torch.Tensor:
    if image.dim() != 4:
        raise DimensionError(f"image batch must be 4-D (B, C, H, W), got shape {tuple(image.shape)}")
    if image.shape[1] != 3:
        raise DimensionError(f"axis C: expected 3 channels, got {image.shape[1]}")
    if image.shape[0] < 1:
        raise DimensionError("axis B: empty batch")
    if not torch.isfinite(image).all():
        raise InputError("image batch contains non-finite values")
    if image.min() < 0 or image.max() > 1:
        raise InputError("image values must lie in [0, 1]")
    return image


def check_mask_stack(m: torch.Tensor, tol: float = MASK_SUM_TOL) -> torch.Tensor:
    if m.dim() != 4:
        raise DimensionError(f"mask stack must be 4-D (B, K, H, W), got shape {tuple(m.shape)}")
    if not torch.isfinite(m).all():
        raise InputError("mask stack contains non-finite values")
    if m.min() < 0 or m.max() > 1:
        raise InputError("mask values must lie in [0, 1]")
    err = (m.sum(dim=1) - 1).abs().max().item()
    if err > tol:
        raise InputError(f"mask does not sum to one over classes (max deviation {err:.3g})")
    return m


def check_decomposition(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 5:
        raise DimensionError(f"decomposition must be 5-D (B, K, C, H, W), got shape {tuple(x.shape)}")
    if x.shape[2] != 3:
        raise DimensionError(f"axis C: expected 3 channels, got {x.shape[2]}")
    if not torch.isfinite(x).all():
        raise InputError("decomposition contains non-finite values")
    return x


def _check_pair(m: torch.Tensor, x: torch.Tensor) -> None:
    if m.dim() != 4:
        raise DimensionError(f"mask must be 4-D (B, K, H, W), got shape {tuple(m.shape)}")
    if x.dim() != 5:
        raise DimensionError(f"decomposition must be 5-D (B, K, C, H, W), got shape {tuple(x.shape)}")
    for axis, mi, xi in (("B", 0, 0), ("K", 1, 1), ("H", 2, 3), ("W", 3, 4)):
        if m.shape[mi] != x.shape[xi]:
            raise DimensionError(
                f"axis {axis}: mask has {m.shape[mi]}, decomposition has {x.shape[xi]}"
            )


def component_images(m: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Per-class contributions ``m[:, k] * x[:, k]`` with shape ``(B, K, C, H, W)``."""
    _check_pair(m, x)
    return m.unsqueeze(2) * x


def recompose(m: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mask-weighted sum of the image-lets, shape ``(B, C, H, W)``.

    ``out[b, c, h, w] = sum_k m[b, k, h, w] * x[b, k, c, h, w]``. No validation of
    the simplex constraint is done here so the map stays usable on raw tensors.
    """
    return component_images(m, x).sum(dim=1)


def average_mask_score(m: torch.Tensor) -> torch.Tensor:
    """Mean mask value per class over all pixels, shape ``(B, K)``."""
    if m.dim() != 4:
        raise DimensionError(f"mask must be 4-D (B, K, H, W), got shape {tuple(m.shape)}")
    return m.mean(dim=(2, 3))


@dataclass(frozen=True)
class TagLabel:
    """Image-level label vector with the background as its last entry.

    ``mode="indicator"`` holds class presence bits; ``mode="soft-area"`` holds
    expected normalized areas that sum to one.
    """

    y: tuple[float, ...]
    mode: str = "indicator"

    def __post_init__(self):
        y = tuple(float(v) for v in self.y)
        object.__setattr__(self, "y", y)
        if len(y) < 2:
            raise DimensionError(f"label needs K >= 2 entries, got {len(y)}")
        if self.mode == "indicator":
            if any(v not in (0.0, 1.0) for v in y):
                raise InputError(f"indicator label must be binary, got {y}")
            if y[-1] != 1.0:
                raise InputError("background (last entry) must be present in an indicator label")
        elif self.mode == "soft-area":
            if any(v < 0 or v > 1 for v in y):
                raise InputError(f"soft-area entries must lie in [0, 1], got {y}")
            if abs(sum(y) - 1) > SOFT_SUM_TOL:
                raise InputError(f"soft-area label must sum to 1, got {sum(y)}")
        else:
            raise InputError(f"unknown label mode {self.mode!r}")

    @property
    def num_classes(self) -> int:
        return len(self.y)

    @property
    def background_index(self) -> int:
        return len(self.y) - 1

    @classmethod
    def from_present(cls, present: Sequence[int], num_classes: int) -> "TagLabel":
        """Indicator label from 0-based foreground class indices."""
        y = [0.0] * num_classes
        for k in present:
            if not 0 <= k < num_classes - 1:
                raise InputError(f"foreground index {k} out of range for K={num_classes}")
            y[k] = 1.0
        y[-1] = 1.0
        return cls(tuple(y))

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.y, dtype=dtype)


def stack_labels(labels: Sequence[TagLabel], dtype=torch.float32) -> torch.Tensor:
    if not labels:
        raise InputError("no labels to stack")
    k = labels[0].num_classes
    if any(lab.num_classes != k for lab in labels):
        raise DimensionError("axis K: labels in a batch disagree on the class count")
    return torch.tensor([lab.y for lab in labels], dtype=dtype)


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 1e-3
    lambda_c: float = 1e-3
    eps: float = 1e-7

    def __post_init__(self):
        if self.lambda_m < 0 or self.lambda_c < 0:
            raise InputError("loss weights must be nonnegative")
        if not 0 < self.eps < 1e-3:
            raise InputError(f"eps must lie in (0, 1e-3), got {self.eps}")
