"""SGD and AdamW (decoupled weight decay) over autodiff tensors."""
from __future__ import annotations

from typing import Iterable, Tuple

import numpy as np

from .autodiff import F32, Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def _named(params) -> list:
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((p.name or f"param{i}", p))
    return out


def _check_finite(named):
    for name, p in named:
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise NonFiniteGradient(f"non-finite gradient in {name} ({bad} of {p.grad.size} entries)")


class Optimizer:
    def __init__(self, params: Iterable):
        self.params = _named(params)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


class SGD(Optimizer):
    def __init__(self, params, lr: float = 1e-2):
        super().__init__(params)
        self.lr = F32(lr)

    def step(self):
        _check_finite(self.params)
        for _, p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class AdamW(Optimizer):
    """Adam with decoupled weight decay.

    Per step, for each parameter ``w`` with gradient ``g``::

        w <- w - lr * wd * w
        m <- b1 * m + (1 - b1) * g
        v <- b2 * v + (1 - b2) * g**2
        w <- w - lr * (m / (1 - b1**t)) / (sqrt(v / (1 - b2**t)) + eps)

    The whole step is aborted (nothing updated) if any gradient is non-finite.
    """

    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-3,
    ):
        super().__init__(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self):
        _check_finite(self.params)
        self.t += 1
        b1, b2 = self.betas
        lr = F32(self.lr)
        decay = F32(1.0 - self.lr * self.weight_decay)
        c1 = F32(1.0 - b1**self.t)
        c2 = F32(1.0 - b2**self.t)
        for (_, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= F32(b1)
            m += F32(1.0 - b1) * g
            v *= F32(b2)
            v += F32(1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2) + F32(self.eps)
            p.data = p.data * decay - lr * (m / c1) / denom

    def state_arrays(self) -> dict:
        out = {}
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
