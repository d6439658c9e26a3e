"""Flat ``key = value`` experiment configuration.

Lines starting with ``#`` and trailing ``# ...`` comments are ignored. Unknown
keys are rejected. ``serialize`` writes every field in declaration order, so
``serialize(parse(text))`` is the normalized form of ``text``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .diffusion import SDIDConfig
from .snn import LifParams
from .vqsvae import PspParams, VQSVAEConfig


class ConfigError(ValueError):
    pass


DATASETS = ("mnist", "fmnist", "kmnist", "letters")
REVEAL_ORDERS = ("random", "confidence")
CODEBOOK_INITS = ("uniform", "data", "kmeans")


@dataclass
class Config:
    # data
    dataset: str = "mnist"
    train_images: str = "data/mnist/train-images-idx3-ubyte.gz"
    train_labels: str = "data/mnist/train-labels-idx1-ubyte.gz"
    test_images: str = "data/mnist/test-images-idx3-ubyte.gz"
    test_labels: str = "data/mnist/test-labels-idx1-ubyte.gz"
    subset: int = 8000
    # spiking neurons
    steps: int = 8
    tau: float = 2.0
    tau_syn: float = 2.0
    alpha: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    detach_reset: bool = True
    init_gain: float = 3.0
    # autoencoder
    hidden: int = 32
    latent: int = 16
    codebook_size: int = 128
    beta: float = 0.25
    asg_bias_init: float = 0.5
    codebook_init: str = "data"
    codebook_restart: bool = True
    # diffusion
    diffusion_steps: int = 16
    sdid_channels: int = 64
    temperature: float = 1.0
    reveal_order: str = "random"
    # optimization
    lr: float = 1e-3
    sdid_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.001
    batch_size: int = 64
    epochs: int = 10
    sdid_epochs: int = 10
    seed: int = 0
    thread_count: int = 1
    # outputs
    out_dir: str = "runs/default"
    vqsvae_ckpt: str = "runs/default/vqsvae.ckpt"
    sdid_ckpt: str = "runs/default/sdid.ckpt"

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = [
            "subset", "steps", "hidden", "latent", "diffusion_steps", "sdid_channels",
            "batch_size", "thread_count", "lr", "sdid_lr", "temperature", "tau_syn", "init_gain", "alpha",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "sdid_epochs", "seed", "weight_decay", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.codebook_size < 2:
            raise ConfigError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if not self.tau_syn > 1:
            raise ConfigError(f"tau_syn must be > 1, got {self.tau_syn}")
        if not self.v_th > self.v_reset:
            raise ConfigError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.codebook_init not in CODEBOOK_INITS:
            raise ConfigError(f"codebook_init must be one of {CODEBOOK_INITS}, got {self.codebook_init!r}")
        if self.reveal_order not in REVEAL_ORDERS:
            raise ConfigError(f"reveal_order must be one of {REVEAL_ORDERS}, got {self.reveal_order!r}")

    # ---- derived model configs
    @property
    def lif(self) -> LifParams:
        return LifParams(self.tau, self.v_th, self.v_reset, self.alpha, self.detach_reset)

    @property
    def vqsvae(self) -> VQSVAEConfig:
        return VQSVAEConfig(
            hidden=self.hidden,
            latent=self.latent,
            codebook_size=self.codebook_size,
            steps=self.steps,
            beta=self.beta,
            lif=self.lif,
            psp=PspParams(self.tau_syn),
            init_gain=self.init_gain,
            asg_bias=self.asg_bias_init,
        )

    def sdid(self, grid: tuple) -> SDIDConfig:
        return SDIDConfig(
            codebook_size=self.codebook_size,
            diffusion_steps=self.diffusion_steps,
            channels=self.sdid_channels,
            steps=self.steps,
            grid=tuple(grid),
            lif=self.lif,
            psp=PspParams(self.tau_syn),
            init_gain=self.init_gain,
        )

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(name: str, kind, raw: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse(text: str, base: Optional[Config] = None) -> Config:
    known = {f.name: f.type for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, known[key], raw)
    base = base or Config()
    return dataclasses.replace(base, **values)


def serialize(cfg: Config) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(encoding="utf-8"))


def save(cfg: Config, path) -> None:
    Path(path).write_text(serialize(cfg), encoding="utf-8")
