"""Multi-scale deformable-attention pixel decoder (with a plain FPN fallback)."""
import math
from dataclasses import dataclass
from typing import List

import torch
from torch import nn
from torch.nn import functional as F

from . import ops
from .extractor import ChangeRepresentation
from .layers import FFN, sine_position_embedding


@dataclass
class RefinedFeatures:
    """``decoder_levels`` ordered coarse to fine (strides 32, 16, 8) plus ``mask_features`` at stride 4."""

    decoder_levels: List[torch.Tensor]
    mask_features: torch.Tensor
    strides: tuple = (32, 16, 8)


class MSDeformAttn(nn.Module):
    """Multi-scale deformable attention.

    Each query predicts ``n_points`` sampling offsets per head and level around
    its reference point plus a softmax-normalized weight for every sample.
    """

    def __init__(self, dim=128, n_levels=3, n_heads=8, n_points=4):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim ({dim}) must be divisible by n_heads ({n_heads})")
        self.dim = dim
        self.n_levels = n_levels
        self.n_heads = n_heads
        self.n_points = n_points
        self.sampling_offsets = nn.Linear(dim, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(dim, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self.last_weights = None
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(self.n_heads, dtype=torch.float32) * (2.0 * math.pi / self.n_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.n_heads, 1, 1, 2).repeat(1, self.n_levels, self.n_points, 1)
        for i in range(self.n_points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.view(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def sample(self, query, reference_points, value, spatial_shapes, level_start):
        """Deformable gather without the value/output projections.

        query ``(N, Q, C)``; reference_points ``(N, Q, L, 2)`` normalized ``(x, y)``;
        value ``(N, S, C)``. Returns ``(N, Q, C)``.
        """
        if reference_points.min() < 0 or reference_points.max() > 1:
            raise ValueError("reference points must lie in [0, 1]^2")
        n, nq, _ = query.shape
        heads, levels, points = self.n_heads, self.n_levels, self.n_points
        value = value.view(n, value.shape[1], heads, self.dim // heads)
        offsets = self.sampling_offsets(query).view(n, nq, heads, levels, points, 2)
        weights = self.attention_weights(query).view(n, nq, heads, levels * points)
        weights = torch.softmax(weights, -1).view(n, nq, heads, levels, points)
        self.last_weights = weights.detach()
        normalizer = torch.stack([spatial_shapes[..., 1], spatial_shapes[..., 0]], -1).to(query.dtype)
        locations = (
            reference_points[:, :, None, :, None, :]
            + offsets / normalizer[None, None, None, :, None, :]
        )
        return ops.ms_deform_attn(value, spatial_shapes, level_start, locations, weights)

    def forward(self, query, reference_points, input_flatten, spatial_shapes, level_start):
        value = self.value_proj(input_flatten)
        out = self.sample(query, reference_points, value, spatial_shapes, level_start)
        return self.output_proj(out)


class DeformEncoderLayer(nn.Module):
    def __init__(self, dim, ffn_dim, n_levels, n_heads, n_points):
        super().__init__()
        self.attn = MSDeformAttn(dim, n_levels, n_heads, n_points)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, src, pos, reference_points, spatial_shapes, level_start):
        src = self.norm1(src + self.attn(src + pos, reference_points, src, spatial_shapes, level_start))
        return self.norm2(src + self.ffn(src))


def reference_points_for(spatial_shapes, n_levels, dtype):
    """Pixel-center reference points ``(1, S, L, 2)`` for flattened levels."""
    refs = []
    for h, w in spatial_shapes.tolist():
        ys, xs = torch.meshgrid(
            (torch.arange(h, dtype=dtype) + 0.5) / h,
            (torch.arange(w, dtype=dtype) + 0.5) / w,
            indexing="ij",
        )
        refs.append(torch.stack([xs.reshape(-1), ys.reshape(-1)], -1))
    ref = torch.cat(refs, 0)
    return ref[None, :, None, :].expand(1, ref.shape[0], n_levels, 2)


def _conv_gn_relu(in_ch, out_ch, k):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, padding=k // 2, bias=False),
        nn.GroupNorm(32 if out_ch % 32 == 0 else 1, out_ch),
        nn.ReLU(inplace=True),
    )


class PixelDecoder(nn.Module):
    """Refines the 1/32, 1/16, 1/8 change maps and builds the 1/4 mask features.

    ``mode="deformable"`` runs ``num_layers`` deformable encoder layers over the
    three coarse levels; ``mode="fpn"`` uses lateral convs with top-down addition.
    """

    def __init__(self, dim=128, num_layers=3, n_heads=8, n_points=4, ffn_dim=512, mode="deformable"):
        super().__init__()
        if mode not in ("deformable", "fpn"):
            raise ValueError(f"unknown pixel decoder mode {mode!r}")
        self.dim = dim
        self.mode = mode
        self.n_levels = 3
        if mode == "deformable":
            self.level_embed = nn.Parameter(torch.empty(self.n_levels, dim))
            nn.init.normal_(self.level_embed)
            self.layers = nn.ModuleList(
                DeformEncoderLayer(dim, ffn_dim, self.n_levels, n_heads, n_points)
                for _ in range(num_layers)
            )
        else:
            self.fpn_lateral = nn.ModuleList(nn.Conv2d(dim, dim, 1) for _ in range(self.n_levels))
            self.fpn_out = nn.ModuleList(_conv_gn_relu(dim, dim, 3) for _ in range(self.n_levels))
        self.mask_lateral = nn.Conv2d(dim, dim, 1)
        self.mask_out = _conv_gn_relu(dim, dim, 3)

    def forward(self, changes: ChangeRepresentation) -> RefinedFeatures:
        return refine(self, changes)

    def _deformable(self, srcs):
        n = srcs[0].shape[0]
        shapes = torch.tensor([s.shape[-2:] for s in srcs], dtype=torch.int64)
        sizes = shapes.prod(1)
        starts = torch.cat([sizes.new_zeros(1), sizes.cumsum(0)[:-1]])
        flat, pos = [], []
        for lvl, s in enumerate(srcs):
            h, w = s.shape[-2:]
            flat.append(s.flatten(2).transpose(1, 2))
            pe = sine_position_embedding(h, w, self.dim, dtype=s.dtype, device=s.device)
            pos.append(pe.flatten(1).transpose(0, 1)[None] + self.level_embed[lvl].to(s.dtype))
        x = torch.cat(flat, 1)
        pos = torch.cat(pos, 1)
        refs = reference_points_for(shapes, self.n_levels, x.dtype).expand(n, -1, -1, -1)
        for layer in self.layers:
            x = layer(x, pos, refs, shapes, starts)
        outs = []
        for s, part in zip(srcs, x.split(sizes.tolist(), dim=1)):
            outs.append(part.transpose(1, 2).reshape(s.shape))
        return outs

    def _fpn(self, srcs):
        outs = []
        prev = None
        for lateral, out_conv, s in zip(self.fpn_lateral, self.fpn_out, srcs):
            y = lateral(s)
            if prev is not None:
                y = y + F.interpolate(prev, size=y.shape[-2:], mode="bilinear", align_corners=False)
            prev = out_conv(y)
            outs.append(prev)
        return outs


def refine(decoder: PixelDecoder, changes: ChangeRepresentation) -> RefinedFeatures:
    if len(changes) != 4:
        raise ValueError("pixel decoder expects 4 change levels")
    r4, r8, r16, r32 = changes.levels
    srcs = [r32, r16, r8]
    if decoder.mode == "deformable":
        levels = decoder._deformable(srcs)
    else:
        levels = decoder._fpn(srcs)
    lateral = decoder.mask_lateral(r4)
    up = F.interpolate(levels[-1], size=lateral.shape[-2:], mode="bilinear", align_corners=False)
    mask_features = decoder.mask_out(lateral + up)
    return RefinedFeatures(levels, mask_features)
