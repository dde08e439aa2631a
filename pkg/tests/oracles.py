"""Brute-force reference implementations used as independent test oracles."""
import math

import numpy as np


def naive_bilinear(v, x, y):
    """Sample ``v`` (H, W, D) at normalized (x, y), zero outside; pixel centers at (i+0.5)/W."""
    H, W, D = v.shape
    px, py = x * W - 0.5, y * H - 0.5
    x0, y0 = math.floor(px), math.floor(py)
    out = np.zeros(D)
    for yy, wy in ((y0, 1 - (py - y0)), (y0 + 1, py - y0)):
        for xx, wx in ((x0, 1 - (px - x0)), (x0 + 1, px - x0)):
            if 0 <= yy < H and 0 <= xx < W:
                out += wy * wx * v[yy, xx]
    return out


def naive_ms_deform_attn(value, shapes, loc, attn):
    N, _, M, D = value.shape
    _, Q, _, L, P, _ = loc.shape
    starts = np.concatenate([[0], np.cumsum([h * w for h, w in shapes])[:-1]])
    out = np.zeros((N, Q, M * D))
    for n in range(N):
        for q in range(Q):
            for m in range(M):
                acc = np.zeros(D)
                for lvl, (h, w) in enumerate(shapes):
                    v = value[n, starts[lvl] : starts[lvl] + h * w, m].reshape(h, w, D)
                    for p in range(P):
                        x, y = loc[n, q, m, lvl, p]
                        acc += attn[n, q, m, lvl, p] * naive_bilinear(v, x, y)
                out[n, q, m * D : (m + 1) * D] = acc
    return out
