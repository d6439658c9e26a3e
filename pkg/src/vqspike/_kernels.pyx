# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Must stay operation-for-operation identical to _fallback.py."""
import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite

cnp.import_array()

ctypedef float f32

# typed constants: bare literals would promote the arithmetic to double
cdef f32 ONE = 1
cdef f32 ZERO = 0


def lif_forward(const f32[:, ::1] x, f32 inv_tau, f32 v_th, f32 v_reset):
    cdef Py_ssize_t T = x.shape[0], M = x.shape[1], t, i
    spikes_arr = np.empty((T, M), dtype=np.float32)
    h_arr = np.empty((T, M), dtype=np.float32)
    v_arr = np.full(M, v_reset, dtype=np.float32)
    cdef f32[:, ::1] s = spikes_arr
    cdef f32[:, ::1] h = h_arr
    cdef f32[::1] v = v_arr
    cdef f32 hv, sv, d, e
    cdef bint finite = True
    with nogil:
        for t in range(T):
            for i in range(M):
                d = v[i] - v_reset
                e = x[t, i] - d
                hv = v[i] + e * inv_tau
                if not isfinite(hv):
                    finite = False
                sv = ONE if hv - v_th >= ZERO else ZERO
                h[t, i] = hv
                s[t, i] = sv
                v[i] = hv * (ONE - sv) + v_reset * sv
    return spikes_arr, h_arr, finite


def lif_backward(const f32[:, ::1] grad_s, const f32[:, ::1] h, const f32[:, ::1] s,
                 f32 inv_tau, f32 v_th, f32 v_reset, f32 alpha, bint detach_reset):
    cdef Py_ssize_t T = h.shape[0], M = h.shape[1], t, i
    gx_arr = np.empty((T, M), dtype=np.float32)
    gv_arr = np.zeros(M, dtype=np.float32)
    cdef f32[:, ::1] gx = gx_arr
    cdef f32[::1] gv = gv_arr
    cdef f32 half_alpha = alpha / <f32>2
    cdef f32 slope = <f32>(1.5707963267948966 * alpha)
    cdef f32 keep = ONE - inv_tau
    cdef f32 u, sg, dvdh, gh, sv
    with nogil:
        for t in range(T - 1, -1, -1):
            for i in range(M):
                u = slope * (h[t, i] - v_th)
                sg = half_alpha / (ONE + u * u)
                sv = s[t, i]
                dvdh = ONE - sv
                if not detach_reset:
                    dvdh = dvdh + (v_reset - h[t, i]) * sg
                gh = grad_s[t, i] * sg + gv[i] * dvdh
                gx[t, i] = gh * inv_tau
                gv[i] = gh * keep
    return gx_arr


def psp_forward(const f32[:, ::1] z, f32 keep, f32 gain):
    cdef Py_ssize_t T = z.shape[0], M = z.shape[1], t, i
    out_arr = np.empty((T, M), dtype=np.float32)
    cdef f32[:, ::1] out = out_arr
    cdef f32 prev
    with nogil:
        for i in range(M):
            prev = ZERO
            for t in range(T):
                prev = keep * prev + gain * z[t, i]
                out[t, i] = prev
    return out_arr


def psp_backward(const f32[:, ::1] grad, f32 keep, f32 gain):
    cdef Py_ssize_t T = grad.shape[0], M = grad.shape[1], t, i
    gz_arr = np.empty((T, M), dtype=np.float32)
    cdef f32[:, ::1] gz = gz_arr
    cdef f32 acc
    with nogil:
        for i in range(M):
            acc = ZERO
            for t in range(T - 1, -1, -1):
                acc = grad[t, i] + keep * acc
                gz[t, i] = gain * acc
    return gz_arr


def im2col(const f32[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    cols_arr = np.zeros((N, Ho, Wo, C * kh * kw), dtype=np.float32)
    cdef f32[:, :, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, i, j, ho, wo, r, q, k
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    k = 0
                    for c in range(C):
                        for i in range(kh):
                            r = ho * stride + i - pad
                            for j in range(kw):
                                q = wo * stride + j - pad
                                if 0 <= r < H and 0 <= q < W:
                                    cols[n, ho, wo, k] = x[n, c, r, q]
                                k += 1
    return cols_arr


def col2im(const f32[:, :, :, ::1] cols, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = cols.shape[0], Ho = cols.shape[1], Wo = cols.shape[2]
    x_arr = np.zeros((N, C, H, W), dtype=np.float32)
    cdef f32[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t n, c, i, j, ho, wo, r, q, k
    # Scatter in (ho, wo) order: each output pixel then receives its kernel
    # offsets in descending (i, j) order, which the fallback reproduces.
    with nogil:
        for n in range(N):
            for ho in range(Ho):
                for wo in range(Wo):
                    k = 0
                    for c in range(C):
                        for i in range(kh):
                            r = ho * stride + i - pad
                            for j in range(kw):
                                q = wo * stride + j - pad
                                if 0 <= r < H and 0 <= q < W:
                                    x[n, c, r, q] += cols[n, ho, wo, k]
                                k += 1
    return x_arr
