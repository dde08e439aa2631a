"""Class/mask prediction heads and the min-max normalized change detector."""
import torch
from torch import nn
from torch.nn import functional as F

from .layers import MLP

CHANGE = 0  # class index of "change"; index 1 is the no-change (null) class
NULL = 1
NUM_CLASSES = 2


class PredictionHead(nn.Module):
    """LayerNorm on the query state, then a 2-layer class MLP and a 3-layer mask MLP."""

    def __init__(self, dim=128, num_classes=NUM_CLASSES, mask_layers=3):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.class_mlp = MLP(dim, dim, num_classes, 2)
        self.mask_mlp = MLP(dim, dim, dim, mask_layers)

    def forward(self, queries, mask_features):
        q = self.norm(queries)
        return classify(self.class_mlp, q), mask_logits(self.mask_mlp, q, mask_features)


def classify(class_mlp: nn.Module, prototypes: torch.Tensor) -> torch.Tensor:
    """``(N, m, C)`` prototypes -> ``(N, m, K)`` class logits."""
    return class_mlp(prototypes)


def mask_logits(mask_mlp: nn.Module, prototypes: torch.Tensor, mask_features: torch.Tensor) -> torch.Tensor:
    """Inner product of embedded prototypes with every pixel feature.

    prototypes ``(N, m, C)``, mask_features ``(N, C, H, W)`` -> ``(N, m, H, W)``.
    """
    return torch.einsum("nqc,nchw->nqhw", mask_mlp(prototypes), mask_features)


def combine_drop_null(class_logits: torch.Tensor, mask_logits_: torch.Tensor) -> torch.Tensor:
    """Mix per-query masks by their change probability; the null channel is dropped.

    Returns ``(N, H, W)``.
    """
    p_change = F.softmax(class_logits, dim=-1)[..., CHANGE]
    return torch.einsum("nq,nqhw->nhw", p_change, mask_logits_.sigmoid())


def normalize_minmax(f_seg: torch.Tensor) -> torch.Tensor:
    """Per-image min-max scaling of ``(N, H, W)`` maps to ``[0, 1]``.

    A constant map has no usable contrast and becomes all zeros.
    """
    flat = f_seg.flatten(1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    degenerate = span == 0
    out = (f_seg - lo) / torch.where(degenerate, torch.ones_like(span), span)
    return torch.where(degenerate, torch.zeros_like(out), out)


def threshold(f_norm: torch.Tensor, t: float = 0.5) -> torch.Tensor:
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return (f_norm > t).to(torch.uint8)


def detect(class_logits, mask_logits_, out_size=None, crop=None, t=0.5):
    """Normalized detector on final predictions.

    With ``out_size`` the combined map is bilinearly upsampled before
    normalization; ``crop=(h, w)`` then removes padding so it cannot affect
    the per-image range. Returns ``(binary map, normalized map)``.
    """
    f_seg = combine_drop_null(class_logits, mask_logits_)
    if out_size is not None and tuple(f_seg.shape[-2:]) != tuple(out_size):
        f_seg = F.interpolate(f_seg[:, None], size=out_size, mode="bilinear", align_corners=False)[:, 0]
    if crop is not None:
        f_seg = f_seg[:, : crop[0], : crop[1]]
    f_norm = normalize_minmax(f_seg)
    return threshold(f_norm, t), f_norm
