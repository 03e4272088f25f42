"""Reconstruction, mask-area, classifier-guidance and classifier-training losses.

All losses reduce over the batch with an arithmetic mean and clamp every
logarithm argument from below at ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import nn

from decompseg.core import LossWeights, average_mask_score, component_images, recompose
from decompseg.errors import ConfigurationError, DimensionError, NumericError

DEFAULT_EPS = 1e-7


def _log(v: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.log(torch.clamp(v, min=eps))


def loss_recon(recon: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Mean squared error per image, averaged over the batch."""
    if recon.shape != image.shape:
        raise DimensionError(f"reconstruction {tuple(recon.shape)} vs image {tuple(image.shape)}")
    return ((recon - image) ** 2).mean()


def _check_labels(y_hat: torch.Tensor, y: torch.Tensor) -> None:
    if y.dim() != 2 or y_hat.dim() != 2:
        raise DimensionError("scores and labels must be 2-D (B, K)")
    if y.shape[0] != y_hat.shape[0]:
        raise DimensionError(f"axis B: scores {y_hat.shape[0]}, labels {y.shape[0]}")
    if y.shape[1] != y_hat.shape[1]:
        raise DimensionError(f"axis K: scores {y_hat.shape[1]}, labels {y.shape[1]}")


def loss_mask(y_hat: torch.Tensor, y: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Binary cross-entropy between mean mask scores and tags, averaged over classes.

    ``y`` may hold presence bits or soft expected areas; the formula is the same.
    """
    y = y.to(y_hat.dtype)
    _check_labels(y_hat, y)
    ce = y * _log(y_hat, eps) + (1 - y) * _log(1 - y_hat, eps)
    return -ce.mean(dim=1).mean()


def _classifier_scores(g: Callable, images: torch.Tensor) -> torch.Tensor:
    # Gradients must pass through g to its inputs but never into its weights.
    if isinstance(g, nn.Module):
        if g.training:
            raise ConfigurationError("classifier must be in eval mode for guidance")
        state = {name: t.detach() for name, t in g.state_dict(keep_vars=True).items()}
        return torch.func.functional_call(g, state, (images,))
    return g(images)


def loss_cls(
    m: torch.Tensor,
    x: torch.Tensor,
    y: torch.Tensor,
    g: Callable[[torch.Tensor], torch.Tensor],
    eps: float = DEFAULT_EPS,
) -> torch.Tensor:
    """Classifier guidance on the per-class component images.

    For component ``k`` the classifier should detect class ``k`` when it is a
    present foreground class, and should detect no other foreground class
    ``j != k``. The background component (last index) only gets the exclusion
    terms, which pushes every recognizable object out of it.
    """
    comps = component_images(m, x)
    b, k, c, h, w = comps.shape
    if y.shape != (b, k):
        raise DimensionError(f"labels {tuple(y.shape)} do not match (B, K) = {(b, k)}")
    scores = _classifier_scores(g, comps.reshape(b * k, c, h, w))
    if scores.dim() != 2 or scores.shape[1] != k - 1:
        raise ConfigurationError(
            f"classifier returns {tuple(scores.shape[1:])} scores per image, expected {k - 1}"
        )
    if not torch.isfinite(scores).all():
        raise NumericError("classifier produced non-finite scores")
    scores = scores.reshape(b, k, k - 1)  # scores[b, component, class]

    fg = k - 1
    present = (y[:, :fg] > 0).to(scores.dtype)
    own = torch.diagonal(scores[:, :fg, :], dim1=1, dim2=2)  # g_k(I_k) for foreground k
    presence = -(present * _log(own, eps)).sum(dim=1)

    off_diag = 1 - torch.eye(k, fg, dtype=scores.dtype, device=scores.device)
    exclusion = -(off_diag * _log(1 - scores, eps)).sum(dim=(1, 2))
    return ((presence + exclusion) / k).mean()


def loss_classifier(z_hat: torch.Tensor, y: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Summed binary cross-entropy over foreground classes, averaged over the batch.

    ``y`` may be the full tag vector (background last) or its foreground part.
    """
    if y.dim() != 2 or z_hat.dim() != 2:
        raise DimensionError("scores and labels must be 2-D")
    if y.shape[1] == z_hat.shape[1] + 1:
        y = y[:, :-1]
    _check_labels(z_hat, y)
    y = y.to(z_hat.dtype)
    ce = y * _log(z_hat, eps) + (1 - y) * _log(1 - z_hat, eps)
    return -ce.sum(dim=1).mean()


@dataclass
class LossReport:
    """Loss components as scalar tensors; ``total`` is the weighted sum in float64."""

    recon: torch.Tensor
    mask: torch.Tensor
    cls: torch.Tensor
    total: torch.Tensor
    weights: LossWeights
    per_term: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "recon": self.recon.item(),
            "mask": self.mask.item(),
            "cls": self.cls.item(),
            "total": self.total.item(),
            "lambda_m": self.weights.lambda_m,
            "lambda_c": self.weights.lambda_c,
            **{k: v.item() for k, v in self.per_term.items()},
        }


def combine(recon: torch.Tensor, mask: torch.Tensor, cls: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return recon.double() + w.lambda_m * mask.double() + w.lambda_c * cls.double()


def loss_total(
    m: torch.Tensor,
    x: torch.Tensor,
    image: torch.Tensor,
    y: torch.Tensor,
    g: Callable[[torch.Tensor], torch.Tensor] | None,
    w: LossWeights = LossWeights(),
) -> LossReport:
    """Weighted objective for one batch.

    With ``lambda_c == 0`` the classifier may be ``None`` and is not evaluated.
    """
    y = y.to(m.dtype)
    recon = loss_recon(recompose(m, x), image)
    y_hat = average_mask_score(m)
    mask = loss_mask(y_hat, y, w.eps)
    if g is None:
        if w.lambda_c != 0:
            raise ConfigurationError("classifier guidance requested without a classifier")
        cls = torch.zeros((), dtype=m.dtype, device=m.device)
    else:
        cls = loss_cls(m, x, y, g, w.eps)
    total = combine(recon, mask, cls, w)
    per_term = {
        "weighted_mask": w.lambda_m * mask.detach().double(),
        "weighted_cls": w.lambda_c * cls.detach().double(),
        "y_hat_fg_mean": y_hat[:, :-1].detach().mean(),
    }
    return LossReport(recon, mask, cls, total, w, per_term)
