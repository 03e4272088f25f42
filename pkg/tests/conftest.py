import numpy as np
import pytest
import torch
from torch import nn


class StubClassifier(nn.Module):
    """Small differentiable g: sigmoid of a linear map on per-channel means and mean squares."""

    def __init__(self, num_fg, seed=0, dtype=torch.float64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(num_fg, 6, generator=gen, dtype=dtype))
        self.bias = nn.Parameter(0.1 * torch.randn(num_fg, generator=gen, dtype=dtype))
        self.eval()

    def forward(self, images):
        feats = torch.cat([images.mean(dim=(2, 3)), (images ** 2).mean(dim=(2, 3))], dim=1)
        return torch.sigmoid(feats @ self.weight.T + self.bias)


class FixedScores:
    """Callable g returning preset scores per flattened (batch, component) image, in call order."""

    def __init__(self, scores):
        self.scores = torch.as_tensor(scores, dtype=torch.float64)

    def __call__(self, images):
        assert images.shape[0] == self.scores.shape[0]
        return self.scores


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar f at double tensor x by central differences."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def analytic_gradient(f, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def max_relative_error(analytic, numeric):
    scale = max(numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def random_simplex(shape, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.random(shape) + 0.05
    m /= m.sum(axis=1, keepdims=True)
    return torch.from_numpy(m)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
