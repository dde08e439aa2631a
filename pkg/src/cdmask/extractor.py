"""Spatial-temporal convolutional attention change extractor.

Per pyramid level the two epochs are fused as::

    Fc  = F1 - F2
    W't = sigmoid(DSConv([Fc, Ft]))                       t = 1, 2
    W'c = sigmoid(Linear(concat_j ReLU(Linear_j(GAP(Fc)))))
    R   = DSConv([W'c * W'1 * F1, W'c * W'2 * F2])

and R is then projected to the shared decoder width.
"""
from dataclasses import dataclass
from typing import List, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import STRIDES, FeaturePyramid


@dataclass
class ChangeRepresentation:
    """Fused maps ordered fine to coarse, all with the same channel count."""

    levels: List[torch.Tensor]
    strides: tuple = STRIDES

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


class DSConv(nn.Module):
    """3x3 depth-wise conv followed by 1x1 point-wise conv."""

    def __init__(self, in_ch, out_ch, kernel_size=3):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, kernel_size, padding=kernel_size // 2, groups=in_ch)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def coarse_diff(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    _same_shape(f1, f2, "coarse_diff")
    return f1 - f2


def spatial_weight(fc: torch.Tensor, ft: torch.Tensor, dsconv: nn.Module) -> torch.Tensor:
    if fc.shape[-2:] != ft.shape[-2:]:
        raise ValueError("spatial_weight: spatial sizes differ")
    return torch.sigmoid(dsconv(torch.cat([fc, ft], dim=1)))


def fuse(f1, f2, w1, w2, wc, dsconv) -> torch.Tensor:
    """Weighted channel-concat of both epochs passed through ``dsconv``.

    ``wc`` is ``(N, C)`` or ``(N, C, 1, 1)``; ``w1``/``w2`` broadcast against
    the feature maps (a scalar ``1`` disables that weight).
    """
    _same_shape(f1, f2, "fuse")
    if torch.is_tensor(wc) and wc.dim() == 2:
        wc = wc[:, :, None, None]
    return dsconv(torch.cat([wc * w1 * f1, wc * w2 * f2], dim=1))


class TemporalChannelWeight(nn.Module):
    """Channel gate from the pooled difference through J parallel DMLP branches."""

    def __init__(self, channels, branches=2):
        super().__init__()
        if channels % branches:
            raise ValueError(f"channels ({channels}) must be divisible by branches ({branches})")
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Linear(channels, channels // branches), nn.ReLU())
            for _ in range(branches)
        )
        self.proj = nn.Linear(channels, channels)

    def forward(self, fc):
        pooled = fc.mean(dim=(2, 3))
        hidden = torch.cat([branch(pooled) for branch in self.branches], dim=1)
        return torch.sigmoid(self.proj(hidden))


class LevelExtractor(nn.Module):
    def __init__(self, channels, out_channels, use_spatial=True, use_channel=True, branches=2):
        super().__init__()
        self.use_spatial = use_spatial
        self.use_channel = use_channel
        if use_spatial:
            self.spatial = DSConv(2 * channels, channels)
        if use_channel:
            self.channel = TemporalChannelWeight(channels, branches)
        # with neither gate the block reduces to DSConv(F1 - F2)
        self.plain = not (use_spatial or use_channel)
        self.fuse = DSConv(channels if self.plain else 2 * channels, channels)
        self.proj = nn.Conv2d(channels, out_channels, 1)

    def weights(self, f1, f2):
        """Return ``(Fc, W'1, W'2, W'c)``; disabled gates come back as ``1.0``."""
        fc = coarse_diff(f1, f2)
        w1 = w2 = wc = 1.0
        if self.use_spatial:
            w1 = spatial_weight(fc, f1, self.spatial)
            w2 = spatial_weight(fc, f2, self.spatial)
        if self.use_channel:
            wc = self.channel(fc)
        return fc, w1, w2, wc

    def forward(self, f1, f2):
        fc, w1, w2, wc = self.weights(f1, f2)
        if self.plain:
            r = self.fuse(fc)
        else:
            r = fuse(f1, f2, w1, w2, wc, self.fuse)
        return self.proj(r)


class ChangeExtractor(nn.Module):
    def __init__(
        self,
        in_channels: Sequence[int],
        out_channels: int = 128,
        use_spatial: bool = True,
        use_channel: bool = True,
        branches: int = 2,
    ):
        super().__init__()
        self.out_channels = out_channels
        self.levels = nn.ModuleList(
            LevelExtractor(c, out_channels, use_spatial, use_channel, branches) for c in in_channels
        )

    def forward(self, pyr1: FeaturePyramid, pyr2: FeaturePyramid) -> ChangeRepresentation:
        return extract_changes(self, pyr1, pyr2)


def extract_changes(extractor: ChangeExtractor, pyr1: FeaturePyramid, pyr2: FeaturePyramid):
    if len(pyr1) != len(pyr2) or len(pyr1) != len(extractor.levels):
        raise ValueError("pyramids must have the same number of levels as the extractor")
    for a, b in zip(pyr1.levels, pyr2.levels):
        _same_shape(a, b, "extract_changes")
    out = [level(a, b) for level, a, b in zip(extractor.levels, pyr1.levels, pyr2.levels)]
    return ChangeRepresentation(out, pyr1.strides)
