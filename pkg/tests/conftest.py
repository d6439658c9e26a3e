from pathlib import Path

import numpy as np
import pytest

from vqspike.autodiff import Tensor

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"


def numeric_grad(fn, arrays, index, h=1e-3):
    """Central differences of the scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float32) for a in arrays]
    target = base[index]
    grad = np.zeros(target.shape, dtype=np.float64)
    for pos in np.ndindex(target.shape):
        orig = target[pos]
        target[pos] = orig + np.float32(h)
        plus = float(fn(*base))
        target[pos] = orig - np.float32(h)
        minus = float(fn(*base))
        target[pos] = orig
        grad[pos] = (plus - minus) / (2 * h)
    return grad


def assert_grads_match(build, arrays, rtol=1e-3, h=1e-3, seed=0):
    """Reverse-mode vs central differences for ``sum(w * build(*inputs))``.

    The weighted reduction runs in float64 on the finite-difference side, so
    only the op's own float32 rounding enters the comparison. Errors are
    measured relative to each gradient's largest entry.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    out.backward(w.astype(np.float32))

    def scalar(*arrs):
        return (build(*[Tensor(a) for a in arrs]).data.astype(np.float64) * w).sum()

    for i, t in enumerate(tensors):
        fd = numeric_grad(scalar, arrays, i, h)
        g = np.zeros_like(fd) if t.grad is None else t.grad
        scale = max(1.0, float(np.abs(fd).max()))
        err = float(np.abs(g - fd).max())
        assert err <= rtol * scale, f"input {i}: max |autodiff - fd| = {err:.3g} > {rtol * scale:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_paths():
    images = MNIST_DIR / "train-images-idx3-ubyte.gz"
    if not images.exists():
        pytest.skip("bundled MNIST subset missing; run scripts/build_mnist_subset.py")
    return images, MNIST_DIR / "train-labels-idx1-ubyte.gz"


def tiny_config(tmp_path, **overrides):
    """A config small enough for end-to-end command tests, written to disk."""
    from vqspike import config

    cfg = config.Config(
        train_images=str(MNIST_DIR / "train-images-idx3-ubyte.gz"),
        train_labels=str(MNIST_DIR / "train-labels-idx1-ubyte.gz"),
        test_images=str(MNIST_DIR / "test-images-idx3-ubyte.gz"),
        test_labels=str(MNIST_DIR / "test-labels-idx1-ubyte.gz"),
        subset=64,
        steps=2,
        hidden=8,
        latent=4,
        codebook_size=8,
        diffusion_steps=4,
        sdid_channels=8,
        batch_size=32,
        epochs=1,
        sdid_epochs=1,
        out_dir=str(tmp_path / "run"),
        vqsvae_ckpt=str(tmp_path / "run" / "vqsvae.ckpt"),
        sdid_ckpt=str(tmp_path / "run" / "sdid.ckpt"),
    ).replace(**overrides)
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "tiny.cfg"
    config.save(cfg, path)
    return cfg, path


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
