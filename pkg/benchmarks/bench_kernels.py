"""Time the compiled kernels against the numpy fallback on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends must agree bit for bit; the script checks that before timing.
"""
import argparse
import timeit

import numpy as np

from vqspike import _fallback

try:
    from vqspike import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    # encoder spiking layer: T=8, batch 64, 32 channels at 14x14
    h = rng.normal(0.3, 0.8, (8, 64 * 32 * 14 * 14)).astype(np.float32)
    f = np.float32
    s, v, _ = _fallback.lif_forward(h, f(0.5), f(1.0), f(0.0))
    g = rng.standard_normal(h.shape).astype(np.float32)
    z = (rng.random((8, 64 * 16 * 7 * 7)) < 0.2).astype(np.float32)
    x = rng.random((512, 32, 14, 14)).astype(np.float32)
    cols = rng.random((512, 14, 14, 32 * 16)).astype(np.float32)
    return {
        "lif_forward": lambda m: m.lif_forward(h, f(0.5), f(1.0), f(0.0)),
        "lif_backward": lambda m: m.lif_backward(g, v, s, f(0.5), f(1.0), f(0.0), f(2.0), True),
        "psp_forward": lambda m: m.psp_forward(z, f(0.5), f(0.5)),
        "im2col": lambda m: m.im2col(x, 4, 4, 2, 1),
        "col2im": lambda m: m.col2im(cols, 32, 28, 28, 4, 4, 2, 1),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(p, q) for p, q in zip(a, b))
    return np.array_equal(a, b)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    backends = {"python": _fallback}
    if _kernels is not None:
        backends["cython"] = _kernels
    print(f"{'kernel':<14}" + "".join(f"{name:>12}" for name in backends) + "   speedup")
    for name, fn in cases(rng).items():
        if _kernels is not None and not same(fn(_fallback), fn(_kernels)):
            raise SystemExit(f"{name}: backends disagree")
        times = {b: min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) for b, m in backends.items()}
        ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<14}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times.values()) + f"   {ratio:6.1f}x")


if __name__ == "__main__":
    main()
