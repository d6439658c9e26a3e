"""Spiking vector-quantized autoencoder.

Pipeline: direct-encoded image -> spiking encoder -> spike train ``e`` ->
firing-rate / postsynaptic-potential readout ``z_e`` -> nearest codebook
entry (tokens) -> embedding ``z_q`` -> adaptive spike generator (a trainable
1x1 spiking conv) -> spike train ``q`` -> spiking decoder -> analog image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import F32, Tensor
from .module import Module, param, uniform_init
from .snn import LifParams, SpikingConv


@dataclass(frozen=True)
class PspParams:
    tau_syn: float = 2.0

    def __post_init__(self):
        if not self.tau_syn > 1.0:
            raise ValueError(f"tau_syn must be > 1, got {self.tau_syn}")

    @property
    def keep(self) -> np.float32:
        return F32(1.0 - 1.0 / self.tau_syn)

    @property
    def gain(self) -> np.float32:
        return F32(1.0 / self.tau_syn)


# ------------------------------------------------------------------ readouts


def sfr(train) -> Tensor:
    """Spike firing rate: mean over the leading time axis."""
    train = ad.tensor(train)
    if train.shape[0] < 1:
        raise ValueError("empty spike train")
    return ad.mean(train, axis=0)


def psp_trace(train, p: PspParams = PspParams()) -> Tensor:
    """PSP[t] = (1 - 1/tau_syn) * PSP[t-1] + (1/tau_syn) * z[t], PSP[0] = 0, for every t."""
    train = ad.tensor(train)
    T = train.shape[0]
    if T < 1:
        raise ValueError("empty spike train")
    flat = np.ascontiguousarray(train.data.reshape(T, -1))
    out = kernels.psp_forward(flat, p.keep, p.gain)
    shape = train.shape

    def backward(g):
        gz = kernels.psp_backward(np.ascontiguousarray(g.reshape(T, -1), dtype=F32), p.keep, p.gain)
        return (gz.reshape(shape),)

    return ad.make_node(out.reshape(shape), (train,), backward)


def psp(train, p: PspParams = PspParams()) -> Tensor:
    """PSP after the final step."""
    return psp_trace(train, p)[-1]


def mix_features(train, k_mix, p: PspParams = PspParams()) -> Tensor:
    """``sigmoid(k) * SFR + (1 - sigmoid(k)) * PSP_T``."""
    k = ad.sigmoid(k_mix)
    return k * sfr(train) + (F32(1) - k) * psp(train, p)


# ------------------------------------------------------------------ codebook


class Codebook(Module):
    def __init__(self, size: int, dim: int, rng: np.random.Generator):
        if size < 2:
            raise ValueError(f"codebook needs at least 2 entries, got {size}")
        self.entries = param(rng.uniform(-1.0 / size, 1.0 / size, (size, dim)), "codebook.entries")
        # mixing weight is sigmoid(k_mix); starts at 0.5
        self.k_mix = param(np.zeros(1, dtype=F32), "codebook.k_mix")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def quantize(z_e, entries, chunk: int = 4096) -> np.ndarray:
    """Nearest codebook entry per site of ``z_e`` (..., C, H, W) -> tokens (..., H, W).

    Squared Euclidean distance from explicit differences; ties go to the lowest index.
    """
    z = np.asarray(ad._as_array(z_e), dtype=F32)
    cb = np.asarray(ad._as_array(entries), dtype=F32)
    if not np.isfinite(cb).all():
        raise ValueError("codebook contains non-finite entries")
    C = z.shape[-3]
    if cb.shape[1] != C:
        raise ad.ShapeError(f"quantize: features have {C} channels, codebook entries have {cb.shape[1]}")
    lead = z.shape[:-3]
    H, W = z.shape[-2:]
    vecs = np.moveaxis(z.reshape((-1, C, H, W)), 1, -1).reshape(-1, C)
    out = np.empty(len(vecs), dtype=np.int64)
    for i in range(0, len(vecs), chunk):
        diff = vecs[i : i + chunk, None, :] - cb[None, :, :]
        out[i : i + chunk] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return out.reshape(lead + (H, W))


def index(entries, tokens: np.ndarray) -> Tensor:
    """Embedding lookup: tokens (..., H, W) -> features (..., C, H, W)."""
    entries = ad.tensor(entries)
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError(f"tokens must be integers, got {tokens.dtype}")
    K = entries.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= K):
        raise IndexError(f"token out of range [0, {K - 1}]: min {tokens.min()}, max {tokens.max()}")
    emb = ad.embedding(entries, tokens)  # (..., H, W, C)
    nd = emb.ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return ad.transpose(emb, axes)


def perplexity(tokens: np.ndarray, K: int) -> float:
    counts = np.bincount(np.asarray(tokens).ravel(), minlength=K).astype(np.float64)
    probs = counts / counts.sum()
    nz = probs[probs > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


# ------------------------------------------------------------------ model


@dataclass(frozen=True)
class VQSVAEConfig:
    in_channels: int = 1
    hidden: int = 32
    latent: int = 16  # C
    codebook_size: int = 128  # K
    steps: int = 8  # T_s
    beta: float = 0.25
    lif: LifParams = field(default_factory=LifParams)
    psp: PspParams = field(default_factory=PspParams)
    init_gain: float = 3.0
    asg_bias: float = 0.5  # generator bias at init, half of v_th; picked by a stage-1 sweep


@dataclass
class VQOutput:
    x_hat: Tensor
    z_e: Tensor  # readout of the encoder train, computed from a stop-gradient copy
    z_q: Tensor
    tokens: np.ndarray
    e_train: Tensor
    q_train: Tensor


class VQSVAE(Module):
    def __init__(self, cfg: VQSVAEConfig, rng: np.random.Generator):
        self.cfg = cfg
        p, g = cfg.lif, cfg.init_gain
        h, c = cfg.hidden, cfg.latent
        self.enc1 = SpikingConv(cfg.in_channels, h, 4, p, rng, stride=2, padding=1, name="enc1", gain=g)
        self.enc2 = SpikingConv(h, c, 4, p, rng, stride=2, padding=1, name="enc2", gain=g)
        self.codebook = Codebook(cfg.codebook_size, c, rng)
        self.asg = SpikingConv(c, c, 1, p, rng, name="asg", gain=g)
        self.asg.bias.data[:] = cfg.asg_bias
        self.dec1 = SpikingConv(c, h, 4, p, rng, stride=2, padding=1, transpose=True, name="dec1", gain=g)
        self.dec2 = SpikingConv(h, h, 4, p, rng, stride=2, padding=1, transpose=True, name="dec2", gain=g)
        self.out_weight = param(uniform_init(rng, (cfg.in_channels, h, 1, 1), h), "readout.weight")
        self.out_bias = param(np.zeros(cfg.in_channels, dtype=F32), "readout.bias")

    @property
    def downsample(self) -> int:
        return 4

    # ---- stages
    def encode_train(self, x) -> Tensor:
        s1 = self.enc1(x, steps=self.cfg.steps)
        return self.enc2(s1)

    def readout(self, train) -> Tensor:
        return mix_features(train, self.codebook.k_mix, self.cfg.psp)

    def encode(self, x) -> np.ndarray:
        """Images (N, 1, H, W) -> tokens (N, H/4, W/4)."""
        e = self.encode_train(x)
        return quantize(self.readout(e.detach()), self.codebook.entries)

    def init_codebook_from(self, images, rng: np.random.Generator, kmeans_iters: int = 0) -> int:
        """Overwrite codebook rows with distinct encoder readouts of ``images``.

        With ``kmeans_iters`` > 0 the picked rows are then refined by Lloyd
        iterations over all readouts. Returns the number of rows replaced; rows
        beyond the number of distinct readouts keep their current values.
        """
        with ad.no_grad():
            z = self.readout(self.encode_train(images)).data
        flat = np.moveaxis(z, 1, -1).reshape(-1, z.shape[1])
        vecs = np.unique(flat, axis=0)
        pick = vecs[rng.permutation(len(vecs))[: self.codebook.size]]
        for _ in range(kmeans_iters):
            assign = quantize(flat.T.reshape(flat.shape[1], 1, -1), pick)[0]
            counts = np.bincount(assign, minlength=len(pick))
            sums = np.zeros_like(pick, dtype=np.float64)
            np.add.at(sums, assign, flat)
            used = counts > 0
            pick[used] = (sums[used] / counts[used, None]).astype(F32)
        self.codebook.entries.data[: len(pick)] = pick
        return len(pick)

    def restart_codes(self, dead: np.ndarray, z_e: np.ndarray, rng: np.random.Generator) -> int:
        """Move the codebook rows flagged in ``dead`` onto readouts taken from ``z_e``.

        Distinct readouts are drawn without replacement with probability
        proportional to their squared distance from the nearest live row, so
        the moved rows land where the codebook serves the encoder worst.
        Returns the number of rows moved.
        """
        dead_rows = np.flatnonzero(dead)
        live = self.codebook.entries.data[~dead]
        flat = np.unique(np.moveaxis(z_e, 1, -1).reshape(-1, z_e.shape[1]), axis=0)
        if len(dead_rows) == 0 or len(live) == 0:
            return 0
        d2 = ((flat[:, None, :].astype(np.float64) - live[None]) ** 2).sum(-1).min(1)
        n = min(len(dead_rows), int(np.count_nonzero(d2)))
        if n == 0:
            return 0
        pick = rng.choice(len(flat), size=n, replace=False, p=d2 / d2.sum())
        self.codebook.entries.data[dead_rows[:n]] = flat[pick]
        return n

    def spike_generator(self, z_q) -> Tensor:
        return self.asg(z_q, steps=self.cfg.steps)

    def decode_train(self, train) -> Tensor:
        d1 = self.dec1(train)
        d2 = self.dec2(d1)
        rate = sfr(d2)
        y = ad.conv2d(rate, self.out_weight, self.out_bias)
        return ad.clamp(y, 0.0, 1.0)

    def decode_tokens(self, tokens) -> Tensor:
        z_q = index(self.codebook.entries, tokens)
        return self.decode_train(self.spike_generator(z_q))

    def forward(self, x) -> VQOutput:
        x = ad.tensor(x)
        e_train = self.encode_train(x)
        z_e = self.readout(e_train.detach())
        tokens = quantize(z_e, self.codebook.entries)
        z_q = index(self.codebook.entries, tokens)
        q_train = self.spike_generator(z_q)
        # decoder sees the generator's spikes; its gradient lands on the encoder spikes
        dec_in = ad.straight_through(e_train, q_train)
        x_hat = self.decode_train(dec_in)
        return VQOutput(x_hat, z_e, z_q, tokens, e_train, q_train)

    __call__ = forward

    def loss(self, x, out: VQOutput):
        total, terms = vqsvae_loss(x, out.x_hat, out.e_train, out.q_train, out.z_e, out.z_q, self.cfg.beta, self.cfg.psp)
        return total, terms


def vqsvae_loss(x, x_hat, e_train, q_train, z_e, z_q, beta: float, p: PspParams = PspParams()):
    """Four-term objective; returns ``(total, {term: float})``.

    recon  = mean (x - x_hat)^2
    vq     = mean (z_e - z_q)^2, with z_e read out from sg[e] (only the mixing weight is live)
    asg    = sum_t mean (PSP_t(sg[e]) - PSP_t(q))^2
    commit = beta * sum_t mean (PSP_t(sg[q]) - PSP_t(e))^2
    """
    x, x_hat = ad.tensor(x), ad.tensor(x_hat)
    e_train, q_train = ad.tensor(e_train), ad.tensor(q_train)
    z_e, z_q = ad.tensor(z_e), ad.tensor(z_q)
    T = e_train.shape[0]
    recon = ad.mean(ad.square(x - x_hat))
    vq = ad.mean(ad.square(z_e - z_q))
    pe, pq = psp_trace(e_train, p), psp_trace(q_train, p)
    asg = ad.mean(ad.square(pe.detach() - pq)) * F32(T)
    commit = ad.mean(ad.square(pq.detach() - pe)) * F32(T)
    total = recon + vq + asg
    if beta != 0:
        total = total + commit * F32(beta)
    terms: Dict[str, float] = {
        "recon": recon.item(),
        "vq": vq.item(),
        "asg": asg.item(),
        "commit": float(beta) * commit.item(),
    }
    if not np.isfinite(total.data):
        raise FloatingPointError(f"non-finite loss: {terms}")
    terms["total"] = total.item()
    return total, terms
