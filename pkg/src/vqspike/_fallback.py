"""Pure numpy versions of the compiled kernels in _kernels.pyx.

Each function performs the same float32 operations in the same order as its
compiled twin, so both backends produce bit-identical results.
"""
import numpy as np

_ONE = np.float32(1.0)


def lif_forward(x, inv_tau, v_th, v_reset):
    x = np.ascontiguousarray(x, dtype=np.float32)
    inv_tau, v_th, v_reset = np.float32(inv_tau), np.float32(v_th), np.float32(v_reset)
    T, M = x.shape
    spikes = np.empty((T, M), dtype=np.float32)
    h = np.empty((T, M), dtype=np.float32)
    v = np.full(M, v_reset, dtype=np.float32)
    # non-finite input is reported through the returned flag, not as a warning
    with np.errstate(invalid="ignore", over="ignore"):
        for t in range(T):
            ht = v + (x[t] - (v - v_reset)) * inv_tau
            st = (ht - v_th >= 0).astype(np.float32)
            h[t] = ht
            spikes[t] = st
            v = ht * (_ONE - st) + v_reset * st
    return spikes, h, bool(np.isfinite(h).all())


def lif_backward(grad_s, h, s, inv_tau, v_th, v_reset, alpha, detach_reset):
    inv_tau, v_th, v_reset = np.float32(inv_tau), np.float32(v_th), np.float32(v_reset)
    alpha = np.float32(alpha)
    half_alpha = alpha / np.float32(2)
    slope = np.float32(1.5707963267948966 * float(alpha))
    keep = _ONE - inv_tau
    T, M = h.shape
    gx = np.empty((T, M), dtype=np.float32)
    gv = np.zeros(M, dtype=np.float32)
    for t in range(T - 1, -1, -1):
        u = slope * (h[t] - v_th)
        sg = half_alpha / (_ONE + u * u)
        dvdh = _ONE - s[t]
        if not detach_reset:
            dvdh = dvdh + (v_reset - h[t]) * sg
        gh = grad_s[t] * sg + gv * dvdh
        gx[t] = gh * inv_tau
        gv = gh * keep
    return gx


def psp_forward(z, keep, gain):
    keep, gain = np.float32(keep), np.float32(gain)
    out = np.empty(z.shape, dtype=np.float32)
    prev = np.zeros(z.shape[1], dtype=np.float32)
    for t in range(z.shape[0]):
        prev = keep * prev + gain * z[t]
        out[t] = prev
    return out


def psp_backward(grad, keep, gain):
    keep, gain = np.float32(keep), np.float32(gain)
    gz = np.empty(grad.shape, dtype=np.float32)
    acc = np.zeros(grad.shape[1], dtype=np.float32)
    for t in range(grad.shape[0] - 1, -1, -1):
        acc = grad[t] + keep * acc
        gz[t] = gain * acc
    return gz


def im2col(x, kh, kw, stride, pad):
    x = np.asarray(x, dtype=np.float32)
    N, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N, Ho, Wo, C * kh * kw)


def col2im(cols, C, H, W, kh, kw, stride, pad):
    N, Ho, Wo, _ = cols.shape
    blocks = cols.reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=np.float32)
    # descending offsets: matches the compiled scatter's per-pixel summation order
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += blocks[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, pad : pad + H, pad : pad + W])
