# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for multi-scale deformable attention and confusion counts.

Array layouts (all C-contiguous):

    value          (N, S, M, D)         S = sum over levels of H_l * W_l
    spatial_shapes (L, 2) int64         rows are (H_l, W_l)
    level_start    (L,) int64           offset of each level inside S
    sampling_loc   (N, Q, M, L, P, 2)   normalized (x, y)
    attn_weight    (N, Q, M, L, P)
    output         (N, Q, M, D)

Bilinear sampling follows ``grid_sample(align_corners=False, padding_mode="zeros")``.
"""
from libc.math cimport floor

import numpy as np

ctypedef fused real:
    float
    double


cdef inline void _corner_weights(
    double h_im, double w_im, Py_ssize_t H, Py_ssize_t W,
    Py_ssize_t* idx, double* wt,
) noexcept nogil:
    # idx/wt hold the 4 corners (-1 marks an out-of-bounds corner)
    cdef Py_ssize_t h_low = <Py_ssize_t>floor(h_im)
    cdef Py_ssize_t w_low = <Py_ssize_t>floor(w_im)
    cdef Py_ssize_t h_high = h_low + 1
    cdef Py_ssize_t w_high = w_low + 1
    cdef double lh = h_im - h_low
    cdef double lw = w_im - w_low
    cdef double hh = 1.0 - lh
    cdef double hw = 1.0 - lw
    wt[0] = hh * hw
    wt[1] = hh * lw
    wt[2] = lh * hw
    wt[3] = lh * lw
    idx[0] = h_low * W + w_low if (h_low >= 0 and w_low >= 0) else -1
    idx[1] = h_low * W + w_high if (h_low >= 0 and w_high <= W - 1) else -1
    idx[2] = h_high * W + w_low if (h_high <= H - 1 and w_low >= 0) else -1
    idx[3] = h_high * W + w_high if (h_high <= H - 1 and w_high <= W - 1) else -1


def ms_deform_attn_forward(
    real[:, :, :, ::1] value,
    long long[:, ::1] spatial_shapes,
    long long[::1] level_start,
    real[:, :, :, :, :, ::1] sampling_loc,
    real[:, :, :, :, ::1] attn_weight,
):
    cdef Py_ssize_t N = value.shape[0]
    cdef Py_ssize_t M = value.shape[2]
    cdef Py_ssize_t D = value.shape[3]
    cdef Py_ssize_t Q = sampling_loc.shape[1]
    cdef Py_ssize_t L = sampling_loc.shape[3]
    cdef Py_ssize_t P = sampling_loc.shape[4]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, Q, M, D), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr

    cdef Py_ssize_t n, q, m, l, p, d, k, H, W, base
    cdef double h_im, w_im, a
    cdef Py_ssize_t idx[4]
    cdef double wt[4]

    with nogil:
        for n in range(N):
            for q in range(Q):
                for m in range(M):
                    for l in range(L):
                        H = spatial_shapes[l, 0]
                        W = spatial_shapes[l, 1]
                        base = level_start[l]
                        for p in range(P):
                            w_im = sampling_loc[n, q, m, l, p, 0] * W - 0.5
                            h_im = sampling_loc[n, q, m, l, p, 1] * H - 0.5
                            if not (h_im > -1 and w_im > -1 and h_im < H and w_im < W):
                                continue
                            a = attn_weight[n, q, m, l, p]
                            _corner_weights(h_im, w_im, H, W, idx, wt)
                            for k in range(4):
                                if idx[k] < 0:
                                    continue
                                for d in range(D):
                                    out[n, q, m, d] += <real>(
                                        a * wt[k] * value[n, base + idx[k], m, d]
                                    )
    return out_arr


def ms_deform_attn_backward(
    real[:, :, :, ::1] value,
    long long[:, ::1] spatial_shapes,
    long long[::1] level_start,
    real[:, :, :, :, :, ::1] sampling_loc,
    real[:, :, :, :, ::1] attn_weight,
    real[:, :, :, ::1] grad_output,
):
    """Return (grad_value, grad_sampling_loc, grad_attn_weight)."""
    cdef Py_ssize_t N = value.shape[0]
    cdef Py_ssize_t M = value.shape[2]
    cdef Py_ssize_t D = value.shape[3]
    cdef Py_ssize_t Q = sampling_loc.shape[1]
    cdef Py_ssize_t L = sampling_loc.shape[3]
    cdef Py_ssize_t P = sampling_loc.shape[4]
    dtype = np.float32 if real is float else np.float64
    gv_arr = np.zeros((value.shape[0], value.shape[1], M, D), dtype=dtype)
    gl_arr = np.zeros((N, Q, M, L, P, 2), dtype=dtype)
    ga_arr = np.zeros((N, Q, M, L, P), dtype=dtype)
    cdef real[:, :, :, ::1] gv = gv_arr
    cdef real[:, :, :, :, :, ::1] gl = gl_arr
    cdef real[:, :, :, :, ::1] ga = ga_arr

    cdef Py_ssize_t n, q, m, l, p, d, k, H, W, base
    cdef double h_im, w_im, a, lh, lw, hh, hw, g, v0, v1, v2, v3
    cdef double acc_a, acc_h, acc_w
    cdef Py_ssize_t idx[4]
    cdef double wt[4]

    with nogil:
        for n in range(N):
            for q in range(Q):
                for m in range(M):
                    for l in range(L):
                        H = spatial_shapes[l, 0]
                        W = spatial_shapes[l, 1]
                        base = level_start[l]
                        for p in range(P):
                            w_im = sampling_loc[n, q, m, l, p, 0] * W - 0.5
                            h_im = sampling_loc[n, q, m, l, p, 1] * H - 0.5
                            if not (h_im > -1 and w_im > -1 and h_im < H and w_im < W):
                                continue
                            a = attn_weight[n, q, m, l, p]
                            _corner_weights(h_im, w_im, H, W, idx, wt)
                            lh = h_im - floor(h_im)
                            lw = w_im - floor(w_im)
                            hh = 1.0 - lh
                            hw = 1.0 - lw
                            acc_a = 0.0
                            acc_h = 0.0
                            acc_w = 0.0
                            for d in range(D):
                                g = grad_output[n, q, m, d]
                                v0 = value[n, base + idx[0], m, d] if idx[0] >= 0 else 0.0
                                v1 = value[n, base + idx[1], m, d] if idx[1] >= 0 else 0.0
                                v2 = value[n, base + idx[2], m, d] if idx[2] >= 0 else 0.0
                                v3 = value[n, base + idx[3], m, d] if idx[3] >= 0 else 0.0
                                acc_a += g * (wt[0] * v0 + wt[1] * v1 + wt[2] * v2 + wt[3] * v3)
                                acc_h += g * (-hw * v0 - lw * v1 + hw * v2 + lw * v3)
                                acc_w += g * (-hh * v0 + hh * v1 - lh * v2 + lh * v3)
                                for k in range(4):
                                    if idx[k] >= 0:
                                        gv[n, base + idx[k], m, d] += <real>(a * wt[k] * g)
                            ga[n, q, m, l, p] = <real>acc_a
                            gl[n, q, m, l, p, 0] = <real>(W * a * acc_w)
                            gl[n, q, m, l, p, 1] = <real>(H * a * acc_h)
    return gv_arr, gl_arr, ga_arr


def confusion_counts(const unsigned char[::1] pred, const unsigned char[::1] gt):
    """Return (tp, fp, fn, tn) for flat 0/1 arrays of equal length."""
    if pred.shape[0] != gt.shape[0]:
        raise ValueError("pred and gt must have the same number of pixels")
    cdef Py_ssize_t i, n = pred.shape[0]
    # cells indexed by 2 * pred + gt: tn, fn, fp, tp
    cdef long long cells[4]
    cdef unsigned char a, b, seen = 0
    cells[0] = cells[1] = cells[2] = cells[3] = 0
    with nogil:
        for i in range(n):
            a = pred[i]
            b = gt[i]
            seen |= a | b
            cells[((a & 1) << 1) | (b & 1)] += 1
    if seen > 1:
        raise ValueError("confusion_counts expects binary (0/1) maps")
    return cells[3], cells[2], cells[1], cells[0]
