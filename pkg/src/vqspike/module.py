"""Parameter containers."""
from __future__ import annotations

from typing import Iterator, Tuple

import numpy as np

from .autodiff import F32, Tensor


class Module:
    """Collects parameters from attributes in assignment order.

    Attributes holding a ``Tensor`` with ``requires_grad`` are parameters;
    attributes holding a ``Module`` (or a list of them) are children.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {', '.join(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=F32)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(data, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=F32), requires_grad=True, name=name)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(F32)
