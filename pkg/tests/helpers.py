import copy

import numpy as np
import torch


def central_difference(fn, x, coords, h=1e-6):
    """Central finite differences of scalar ``fn`` at flat indices ``coords`` of ``x``."""
    out = []
    for i in coords:
        xp, xm = x.clone(), x.clone()
        xp.view(-1)[i] += h
        xm.view(-1)[i] -= h
        out.append((fn(xp) - fn(xm)) / (2 * h))
    return np.array(out)


def relative_errors(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)


def double_copy(model):
    m = copy.deepcopy(model).double()
    m.eval()
    return m


def as_double(episode):
    from dataclasses import replace

    return replace(episode, support=episode.support.double(), query=episode.query.double())


class InterpolatingModel(torch.nn.Module):
    """Logits move from ``a`` to ``b`` as the mean pixel of the support in ``slot`` goes 0 -> 1."""

    def __init__(self, a, b, slot):
        super().__init__()
        self.a = torch.tensor(a, dtype=torch.float64)
        self.b = torch.tensor(b, dtype=torch.float64)
        self.slot = slot

    def forward(self, support, query):
        m = support[self.slot].double().mean()
        return (self.a + m * (self.b - self.a)).expand(len(query), -1)


class PixelLabelModel(torch.nn.Module):
    """Predicts class ``round(2 * mean pixel of the query)`` out of three."""

    def forward(self, support, query):
        v = 2 * query.flatten(1).double().mean(1, keepdim=True)
        return -(v - torch.arange(3, dtype=torch.float64)).abs()


class ConstantFilter:
    kind = "constant"

    def __init__(self, value):
        self.value = value

    def __call__(self, images, seed=None):
        return torch.full_like(images, self.value)
