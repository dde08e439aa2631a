"""Hot kernels with a compiled (Cython) route and a pure PyTorch fallback.

The compiled route is selected at import time when ``cdmask.ops._kernels``
is importable. Setting ``CDMASK_FORCE_FALLBACK=1`` before import, or calling
:func:`set_backend`, forces the fallback.
"""
import os

import numpy as np
import torch

from . import fallback

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

HAVE_EXTENSION = _kernels is not None
BACKEND = "cython" if HAVE_EXTENSION and not os.environ.get("CDMASK_FORCE_FALLBACK") else "torch"


def set_backend(name):
    """Select ``"cython"`` or ``"torch"`` for subsequent kernel calls."""
    global BACKEND
    if name not in ("cython", "torch"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "cython" and not HAVE_EXTENSION:
        raise RuntimeError("Cython kernels are not built; run `pip install -e .`")
    BACKEND = name


def _np(t):
    return t.detach().contiguous().numpy()


class _MSDeformAttnFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, value, spatial_shapes, level_start, sampling_locations, attention_weights):
        shapes = _np(spatial_shapes.to(torch.int64))
        starts = _np(level_start.to(torch.int64))
        out = _kernels.ms_deform_attn_forward(
            _np(value), shapes, starts, _np(sampling_locations), _np(attention_weights)
        )
        ctx.save_for_backward(value, sampling_locations, attention_weights)
        ctx.shapes = shapes
        ctx.starts = starts
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_output):
        value, loc, attn = ctx.saved_tensors
        gv, gl, ga = _kernels.ms_deform_attn_backward(
            _np(value), ctx.shapes, ctx.starts, _np(loc), _np(attn), _np(grad_output)
        )
        return torch.from_numpy(gv), None, None, torch.from_numpy(gl), torch.from_numpy(ga)


def ms_deform_attn(value, spatial_shapes, level_start, sampling_locations, attention_weights):
    """Weighted bilinear gather over several feature levels.

    value: ``(N, S, M, D)`` per-head values of all levels, flattened.
    spatial_shapes: ``(L, 2)`` integer ``(H, W)`` per level.
    level_start: ``(L,)`` offsets of each level inside ``S``.
    sampling_locations: ``(N, Q, M, L, P, 2)`` normalized ``(x, y)``.
    attention_weights: ``(N, Q, M, L, P)``.

    Returns ``(N, Q, M*D)``. Samples outside the map contribute zero.
    """
    use_ext = (
        BACKEND == "cython"
        and value.device.type == "cpu"
        and value.dtype in (torch.float32, torch.float64)
        and sampling_locations.dtype == value.dtype
        and attention_weights.dtype == value.dtype
    )
    if not use_ext:
        return fallback.ms_deform_attn(
            value, spatial_shapes, level_start, sampling_locations, attention_weights
        )
    N, _, M, D = value.shape
    out = _MSDeformAttnFunction.apply(
        value, spatial_shapes, level_start, sampling_locations, attention_weights
    )
    return out.view(N, -1, M * D)


def confusion_counts(pred, gt):
    """``(tp, fp, fn, tn)`` for two binary maps of equal size."""
    pred = np.ascontiguousarray(pred, dtype=np.uint8).ravel()
    gt = np.ascontiguousarray(gt, dtype=np.uint8).ravel()
    if BACKEND == "cython":
        return tuple(int(x) for x in _kernels.confusion_counts(pred, gt))
    return fallback.confusion_counts(pred, gt)
