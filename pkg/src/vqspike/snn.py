"""Leaky integrate-and-fire neurons and time-unrolled spiking layers.

Spiking tensors carry time as the leading axis: (T, N, C, H, W). Per step the
neuron charges, fires and hard-resets::

    H[t] = V[t-1] + (X[t] - (V[t-1] - v_reset)) / tau
    S[t] = heaviside(H[t] - v_th)            # 1 when the argument is >= 0
    V[t] = H[t] * (1 - S[t]) + v_reset * S[t]

The backward pass replaces the Heaviside derivative with the arctan
surrogate ``alpha / (2 * (1 + (pi/2 * alpha * x)**2))``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import F32, CustomGradFn, Tensor
from .module import Module, param, uniform_init


class NonFiniteMembrane(FloatingPointError):
    pass


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    alpha: float = 2.0
    # drop the surrogate path through the reset term S[t] in V[t]
    detach_reset: bool = True

    def __post_init__(self):
        if not self.tau >= 1.0:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.v_th > self.v_reset:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def inv_tau(self) -> np.float32:
        return F32(1.0 / self.tau)


def heaviside(x: np.ndarray) -> np.ndarray:
    return (x >= 0).astype(F32)


def atan_surrogate_grad(x: np.ndarray, alpha: float) -> np.ndarray:
    alpha = F32(alpha)
    u = F32(1.5707963267948966 * float(alpha)) * np.asarray(x, dtype=F32)
    return (alpha / F32(2)) / (F32(1) + u * u)


def spike_fn(alpha: float = 2.0) -> CustomGradFn:
    return CustomGradFn(heaviside, lambda x: atan_surrogate_grad(x, alpha), name=f"spike[alpha={alpha}]")


def _check_membrane(h: np.ndarray, layer: str):
    if not np.isfinite(h).all():
        raise NonFiniteMembrane(f"non-finite membrane potential in layer {layer!r}")


def lif_step(x_t, v, p: LifParams, layer: str = "lif"):
    """One charge/fire/reset step built from autodiff primitives.

    Returns ``(spike, v_new)``. This is the readable reference; layers use the
    fused :func:`lif_sequence`, which is checked against it.
    """
    x_t, v = ad.tensor(x_t), ad.tensor(v)
    if x_t.shape != v.shape:
        raise ad.ShapeError(f"lif_step: input {x_t.shape} vs state {v.shape}")
    v_reset = F32(p.v_reset)
    h = v + (x_t - (v - v_reset)) * p.inv_tau
    _check_membrane(h.data, layer)
    s = ad.apply_custom(h - F32(p.v_th), spike_fn(p.alpha))
    gate = s.detach() if p.detach_reset else s
    v_new = h * (F32(1) - gate) + gate * v_reset
    return s, v_new


def lif_sequence(x: Tensor, p: LifParams, layer: str = "lif") -> Tensor:
    """Run LIF neurons over the leading time axis of ``x`` from a reset state."""
    x = ad.tensor(x)
    T = x.shape[0]
    flat = np.ascontiguousarray(x.data.reshape(T, -1))
    spikes, h, finite = kernels.lif_forward(flat, p.inv_tau, F32(p.v_th), F32(p.v_reset))
    if not finite:
        raise NonFiniteMembrane(f"non-finite membrane potential in layer {layer!r}")
    shape = x.shape

    def backward(g):
        gs = np.ascontiguousarray(g.reshape(T, -1), dtype=F32)
        gx = kernels.lif_backward(
            gs, h, spikes, p.inv_tau, F32(p.v_th), F32(p.v_reset), F32(p.alpha), p.detach_reset
        )
        return (gx.reshape(shape),)

    return ad.make_node(spikes.reshape(shape), (x,), backward)


def lif_sequence_reference(x: Tensor, p: LifParams, layer: str = "lif") -> Tensor:
    """Same as :func:`lif_sequence` via a Python loop of :func:`lif_step`."""
    x = ad.tensor(x)
    v = Tensor(np.full(x.shape[1:], p.v_reset, dtype=F32))
    out = []
    for t in range(x.shape[0]):
        s, v = lif_step(x[t], v, p, layer)
        out.append(s)
    return ad.stack(out, axis=0)


def direct_input_encode(x, T: int) -> Tensor:
    """Present the analog image unchanged at each of ``T`` steps: (N, ...) -> (T, N, ...)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    x = ad.tensor(x)
    return ad.broadcast_to(ad.reshape(x, (1,) + x.shape), (T,) + x.shape)


def merge_time(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0] * x.shape[1],) + x.shape[2:])


def split_time(x: Tensor, T: int) -> Tensor:
    return ad.reshape(x, (T, x.shape[0] // T) + x.shape[1:])


class SpikingLayer(Module):
    """Synaptic op followed by LIF neurons, unrolled over time.

    ``forward`` accepts a spike train (T, N, ...) or, with ``steps`` given, a
    static analog input (N, ...) presented at every step (direct encoding:
    the synaptic current is computed once and repeated).
    """

    def __init__(self, p: LifParams, name: str):
        self.p = p
        self.layer_name = name

    def synapse(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def current(self, x, steps: Optional[int] = None) -> Tensor:
        x = ad.tensor(x)
        if steps is not None:
            c = self.synapse(x)
            return ad.broadcast_to(ad.reshape(c, (1,) + c.shape), (steps,) + c.shape)
        T = x.shape[0]
        return split_time(self.synapse(merge_time(x)), T)

    def __call__(self, x, steps: Optional[int] = None, residual: Optional[Tensor] = None):
        return self.forward(x, steps, residual)[0]

    def forward(self, x, steps: Optional[int] = None, residual: Optional[Tensor] = None):
        """Return ``(spikes, current)``; ``residual`` is added to the current first."""
        cur = self.current(x, steps)
        if residual is not None:
            cur = cur + residual
        return lif_sequence(cur, self.p, self.layer_name), cur

    def forward_reference(self, x, steps: Optional[int] = None) -> Tensor:
        return lif_sequence_reference(self.current(x, steps), self.p, self.layer_name)


class SpikingLinear(SpikingLayer):
    def __init__(self, n_in: int, n_out: int, p: LifParams, rng, name: str = "linear", gain: float = 1.0):
        super().__init__(p, name)
        self.weight = param(uniform_init(rng, (n_out, n_in), n_in, gain), f"{name}.weight")
        self.bias = param(np.zeros(n_out, dtype=F32), f"{name}.bias")

    def synapse(self, x):
        return ad.linear(x, self.weight, self.bias)


class SpikingConv(SpikingLayer):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        p: LifParams,
        rng,
        stride: int = 1,
        padding: int = 0,
        transpose: bool = False,
        name: str = "conv",
        gain: float = 1.0,
    ):
        super().__init__(p, name)
        self.stride, self.padding, self.transpose = stride, padding, transpose
        fan_in = c_in * kernel * kernel
        if transpose:
            # each output pixel sees about c_in * (kernel / stride)**2 inputs
            fan_in = max(1, c_in * (kernel // stride) ** 2)
            shape = (c_in, c_out, kernel, kernel)
        else:
            shape = (c_out, c_in, kernel, kernel)
        self.weight = param(uniform_init(rng, shape, fan_in, gain), f"{name}.weight")
        self.bias = param(np.zeros(c_out, dtype=F32), f"{name}.bias")

    def synapse(self, x):
        if self.transpose:
            return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def run_spiking_layer(layer: SpikingLayer, x, steps: Optional[int] = None) -> Tensor:
    return layer(x, steps)
