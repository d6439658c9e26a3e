"""Absorbing-state discrete diffusion over token grids and its spiking denoiser.

Tokens take values 0..K-1; the value K is the absorbing [MASK] state. At step
t of T the forward chain masks each still-unmasked token with probability
1 / (T - t + 1), so after t steps a token is masked with probability t / T.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import F32, Tensor
from .module import Module, param, uniform_init
from .snn import LifParams, SpikingConv
from .vqsvae import PspParams, mix_features


@dataclass(frozen=True)
class DiffusionSchedule:
    steps: int = 16  # T_d

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"diffusion needs at least one step, got {self.steps}")

    def _check(self, t: int):
        if not 1 <= t <= self.steps:
            raise ValueError(f"diffusion step {t} outside 1..{self.steps}")

    def gamma(self, t: int) -> float:
        """Probability that an unmasked token is absorbed at step ``t``."""
        self._check(t)
        return 1.0 / (self.steps - t + 1)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([self.gamma(t) for t in range(1, self.steps + 1)])

    def mask_prob(self, t: int) -> float:
        """Marginal probability that a token is masked after ``t`` steps."""
        if not 0 <= t <= self.steps:
            raise ValueError(f"diffusion step {t} outside 0..{self.steps}")
        return t / self.steps


def transition_matrix(t: int, sched: DiffusionSchedule, K: int) -> np.ndarray:
    """(K+1, K+1) one-step transition matrix; row i is q(h_t = . | h_{t-1} = i)."""
    g = sched.gamma(t)
    Q = np.zeros((K + 1, K + 1))
    idx = np.arange(K)
    Q[idx, idx] = 1.0 - g
    Q[idx, K] = g
    Q[K, K] = 1.0
    return Q


def forward_corrupt(h0: np.ndarray, t: int, sched: DiffusionSchedule, rng: np.random.Generator, K: int) -> np.ndarray:
    """Jump straight to step ``t``: every site independently becomes K with probability t/T."""
    h0 = np.asarray(h0)
    if h0.size and (h0.min() < 0 or h0.max() >= K):
        raise ValueError("forward_corrupt expects clean tokens in [0, K-1]")
    if t == 0:
        return h0.copy()
    mask = rng.random(h0.shape) < sched.mask_prob(t)
    return np.where(mask, K, h0)


def forward_corrupt_stepwise(h0: np.ndarray, t: int, sched: DiffusionSchedule, rng: np.random.Generator, K: int):
    """Run the chain one step at a time by sampling rows of the transition matrix.

    Returns the trajectory ``[h_0, h_1, ..., h_t]``. Slow; meant as an oracle.
    """
    h = np.asarray(h0).copy()
    traj = [h.copy()]
    flat = h.reshape(-1)
    for s in range(1, t + 1):
        cdf = np.cumsum(transition_matrix(s, sched, K), axis=1)
        u = rng.random(flat.shape)
        flat = np.minimum((u[:, None] >= cdf[flat]).sum(axis=1), K)
        traj.append(flat.reshape(h.shape).copy())
    return traj


# ------------------------------------------------------------------ denoiser


@dataclass(frozen=True)
class SDIDConfig:
    codebook_size: int = 128  # K
    diffusion_steps: int = 16  # T_d
    channels: int = 64
    steps: int = 8  # T_s
    grid: Tuple[int, int] = (7, 7)
    lif: LifParams = field(default_factory=LifParams)
    psp: PspParams = field(default_factory=PspParams)
    init_gain: float = 3.0


class SDID(Module):
    """Spiking denoiser predicting p(h_0 | h_t) as logits (N, K, H, W).

    Token, position and step embeddings form a static input current; three 3x3 spiking
    conv blocks (residual on membrane input currents) run for ``steps`` time
    steps; the last block's mixed SFR/PSP readout is projected to K logits.
    """

    def __init__(self, cfg: SDIDConfig, rng: np.random.Generator):
        self.cfg = cfg
        K, D, p, g = cfg.codebook_size, cfg.channels, cfg.lif, cfg.init_gain
        self.token_embed = param(rng.normal(0.0, 1.0, (K + 1, D)), "sdid.token_embed")
        self.time_embed = param(rng.normal(0.0, 1.0, (cfg.diffusion_steps, D)), "sdid.time_embed")
        # without it a fully masked grid is the same input at every site
        self.pos_embed = param(rng.normal(0.0, 1.0, tuple(cfg.grid) + (D,)), "sdid.pos_embed")
        self.block1 = SpikingConv(D, D, 3, p, rng, padding=1, name="sdid.block1", gain=g)
        self.block2 = SpikingConv(D, D, 3, p, rng, padding=1, name="sdid.block2", gain=g)
        self.block3 = SpikingConv(D, D, 3, p, rng, padding=1, name="sdid.block3", gain=g)
        self.k_mix = param(np.zeros(1, dtype=F32), "sdid.k_mix")
        self.head_weight = param(uniform_init(rng, (K, D, 1, 1), D), "sdid.head.weight")
        self.head_bias = param(np.zeros(K, dtype=F32), "sdid.head.bias")

    @property
    def mask_token(self) -> int:
        return self.cfg.codebook_size

    def forward(self, h_t: np.ndarray, t) -> Tensor:
        h_t = np.asarray(h_t)
        if h_t.ndim == 2:
            h_t = h_t[None]
        N = h_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (N,))
        if t.min() < 1 or t.max() > self.cfg.diffusion_steps:
            raise ValueError(f"diffusion step outside 1..{self.cfg.diffusion_steps}")
        tok = ad.embedding(self.token_embed, h_t)  # (N, H, W, D)
        tim = ad.embedding(self.time_embed, t - 1)  # (N, D)
        D = self.cfg.channels
        if h_t.shape[1:] != tuple(self.cfg.grid):
            raise ad.ShapeError(f"SDID built for {self.cfg.grid} grids, got {h_t.shape[1:]}")
        x = ad.transpose(tok + self.pos_embed + ad.reshape(tim, (N, 1, 1, D)), (0, 3, 1, 2))
        s1, c1 = self.block1.forward(x, steps=self.cfg.steps)
        s2, c2 = self.block2.forward(s1, residual=c1)
        s3, _ = self.block3.forward(s2, residual=c2)
        r = mix_features(s3, self.k_mix, self.cfg.psp)
        return ad.conv2d(r, self.head_weight, self.head_bias)

    __call__ = forward


# ------------------------------------------------------------------ loss


def masked_cross_entropy(logits: Tensor, h0: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-grid mean cross-entropy over masked sites -> (N,). Grids with no mask give 0."""
    logp = ad.log_softmax(logits, axis=1)
    picked = ad.take_along(logp, np.asarray(h0)[:, None], axis=1)  # (N, 1, H, W)
    m = mask[:, None].astype(F32)
    counts = np.maximum(m.sum(axis=(1, 2, 3)), 1).astype(F32)
    nll = -ad.tsum(picked * m, axis=(1, 2, 3))
    return nll * (F32(1) / counts)


def sample_masks(h0: np.ndarray, t: np.ndarray, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Per grid, mask each site with probability t/T; a grid left without any
    masked site is redrawn once (it may stay unmasked)."""
    prob = (np.asarray(t, dtype=np.float64) / sched.steps)[:, None, None]
    mask = rng.random(h0.shape) < prob
    empty = ~mask.any(axis=(1, 2))
    if empty.any():
        redraw = rng.random(h0.shape) < prob
        mask[empty] = redraw[empty]
    return mask


def diffusion_loss(model: SDID, h0: np.ndarray, sched: DiffusionSchedule, rng: np.random.Generator, t=None):
    """Monte-Carlo estimate of the reweighted bound on a batch of clean grids.

    Per grid: draw t uniformly from 1..T (unless given), mask sites with
    probability t/T, and score ``(T/t) * mean_{masked} -log p(h_0 | h_t)``.
    Returns ``(loss, info)`` where loss is the batch mean.
    """
    h0 = np.asarray(h0)
    N = h0.shape[0]
    if t is None:
        t = rng.integers(1, sched.steps + 1, size=N)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (N,))
    mask = sample_masks(h0, t, sched, rng)
    h_t = np.where(mask, model.mask_token, h0)
    logits = model(h_t, t)
    ce = masked_cross_entropy(logits, h0, mask)
    weight = (sched.steps / t).astype(F32)
    loss = ad.mean(ce * weight)
    info = {
        "loss": loss.item(),
        "masked_ce": float(ce.data.sum() / max(1, int(mask.any(axis=(1, 2)).sum()))),
        "masked_frac": float(mask.mean()),
    }
    return loss, info


# ------------------------------------------------------------------ sampling


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along axis 1 of (N, K, H, W) probabilities."""
    cdf = np.cumsum(probs.astype(np.float64), axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample(
    model: SDID,
    sched: DiffusionSchedule,
    shape: Tuple[int, int, int],
    rng: np.random.Generator,
    temperature: float = 1.0,
    order: str = "random",
    trace: Optional[list] = None,
) -> np.ndarray:
    """Generate clean token grids of ``shape`` (n, H, W) by iterative unmasking.

    From the fully masked state at t = T down to 1, each still-masked site is
    revealed with probability 1/t and takes a token drawn from
    softmax(logits / temperature). ``order="confidence"`` keeps the same
    binomial reveal count per grid but reveals the most confident sites.
    If ``trace`` is a list, ``(t, masked_before, revealed)`` counts are appended.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    K = model.mask_token
    h = np.full(shape, K, dtype=np.int64)
    with ad.no_grad():
        for t in range(sched.steps, 0, -1):
            masked = h == K
            n_masked = int(masked.sum())
            if n_masked == 0:
                if trace is not None:
                    trace.append((t, 0, 0))
                continue
            logits = model(h, t).data.astype(np.float64) / temperature
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            draw = _categorical(probs, rng.random(shape))
            if order == "random":
                reveal = masked & (rng.random(shape) < 1.0 / t)
            elif order == "confidence":
                counts = rng.binomial(masked.sum(axis=(1, 2)), 1.0 / t)
                conf = np.where(masked, np.take_along_axis(probs, draw[:, None], axis=1)[:, 0], -1.0)
                reveal = np.zeros(shape, dtype=bool)
                flat_conf = conf.reshape(shape[0], -1)
                for i, c in enumerate(counts):
                    if c:
                        top = np.argsort(-flat_conf[i], kind="stable")[:c]
                        reveal.reshape(shape[0], -1)[i, top] = True
            else:
                raise ValueError(f"unknown reveal order {order!r}")
            h[reveal] = draw[reveal]
            if trace is not None:
                trace.append((t, n_masked, int(reveal.sum())))
    return h


def generate_images(sdid: SDID, vqsvae, n: int, sched: DiffusionSchedule, rng, temperature: float = 1.0,
                    order: str = "random", batch: int = 64):
    """Sample ``n`` token grids and decode them to images in [0, 1]: (n, 1, H, W)."""
    H, W = sdid.cfg.grid
    images, grids = [], []
    for start in range(0, n, batch):
        m = min(batch, n - start)
        tokens = sample(sdid, sched, (m, H, W), rng, temperature, order)
        with ad.no_grad():
            images.append(vqsvae.decode_tokens(tokens).data)
        grids.append(tokens)
    return np.concatenate(images), np.concatenate(grids)
