"""Pure PyTorch / NumPy reference routes for the compiled kernels."""
import numpy as np
import torch
import torch.nn.functional as F


def ms_deform_attn(value, spatial_shapes, level_start, sampling_locations, attention_weights):
    """Multi-scale deformable sampling built on ``grid_sample``.

    Shapes as in :func:`cdmask.ops.ms_deform_attn`; returns ``(N, Q, M*D)``.
    """
    N, _, M, D = value.shape
    _, Q, _, L, P, _ = sampling_locations.shape
    sizes = [int(h) * int(w) for h, w in spatial_shapes.tolist()]
    value_list = value.split(sizes, dim=1)
    # grid_sample works on [-1, 1] coordinates
    grids = 2 * sampling_locations - 1
    sampled = []
    for lvl, (h, w) in enumerate(spatial_shapes.tolist()):
        v = value_list[lvl].flatten(2).transpose(1, 2).reshape(N * M, D, int(h), int(w))
        g = grids[:, :, :, lvl].transpose(1, 2).flatten(0, 1)  # (N*M, Q, P, 2)
        sampled.append(
            F.grid_sample(v, g, mode="bilinear", padding_mode="zeros", align_corners=False)
        )
    # (N*M, D, Q, L, P) weighted over L*P
    stacked = torch.stack(sampled, dim=-2).flatten(-2)
    weights = attention_weights.transpose(1, 2).reshape(N * M, 1, Q, L * P)
    out = (stacked * weights).sum(-1).view(N, M * D, Q)
    return out.transpose(1, 2).contiguous()


def confusion_counts(pred, gt):
    pred = np.asarray(pred, dtype=np.uint8).ravel()
    gt = np.asarray(gt, dtype=np.uint8).ravel()
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have the same number of pixels")
    if pred.max(initial=0) > 1 or gt.max(initial=0) > 1:
        raise ValueError("confusion_counts expects binary (0/1) maps")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, int(p.size) - tp - fp - fn
