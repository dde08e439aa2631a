"""Transformer decoder: masked attention blocks plus a scene-guided axial attention block."""
import math
from typing import Dict, List, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .head import PredictionHead
from .layers import FFN, MultiHeadAttention, sine_position_embedding
from .pixel_decoder import RefinedFeatures

# block layouts selectable by name; "mab" entries index the refined levels
# (0 -> 1/32, 1 -> 1/16, 2 -> 1/8, 3 -> 1/4 mask features)
STRUCTURES = {
    "mab3": (("mab", 0), ("mab", 1), ("mab", 2)),
    "mab4": (("mab", 0), ("mab", 1), ("mab", 2), ("mab", 3)),
    "mab3_saab_v1": (("mab", 0), ("mab", 1), ("mab", 2), ("saab_v1", 3)),
    "mab3_saab": (("mab", 0), ("mab", 1), ("mab", 2), ("saab", 3)),
}


def scene_context(linear: nn.Linear, r4: torch.Tensor) -> torch.Tensor:
    """Channel gate ``(N, C)`` from the globally pooled 1/4 map ``(N, C, H, W)``."""
    return torch.sigmoid(linear(r4.mean(dim=(2, 3))))


def axial_compress(k: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Average keys ``(N, H, W, C)`` along each axis.

    Returns ``K_h`` of shape ``(N, H, C)`` (mean over width) and ``K_w`` of
    shape ``(N, W, C)`` (mean over height).
    """
    return k.mean(dim=2), k.mean(dim=1)


def scene_guided_axial_attention(q, k_h, k_w, v, g=None, return_weights=False):
    """Tandem axial attention of queries over a 2-D value map.

    q ``(N, m, C)``; k_h ``(N, H, C)``; k_w ``(N, W, C)``; v ``(N, H, W, C)``;
    g ``(N, C)`` gates the keys per channel (``None`` means no gating).
    The row and column affinities are softmax-normalized over H and W; values
    are first mixed along W, then along H.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    if g is not None:
        k_h = k_h * g[:, None, :]
        k_w = k_w * g[:, None, :]
    a_h = torch.softmax(torch.einsum("nqc,nhc->nqh", q, k_h) * scale, dim=-1)
    a_w = torch.softmax(torch.einsum("nqc,nwc->nqw", q, k_w) * scale, dim=-1)
    v_w = torch.einsum("nqw,nhwc->nqhc", a_w, v)
    out = torch.einsum("nqh,nqhc->nqc", a_h, v_w)
    if return_weights:
        return out, a_h, a_w
    return out


class SceneAxialAttention(nn.Module):
    """Single-head scene-guided axial cross-attention from queries to a feature map."""

    def __init__(self, dim, use_scene=True):
        super().__init__()
        self.dim = dim
        self.use_scene = use_scene
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        if use_scene:
            self.scene = nn.Linear(dim, dim)
        self.last_weights = None

    def forward(self, query, feats, pos):
        """query ``(N, m, C)``; feats/pos ``(N, C, H, W)``."""
        q = self.q_proj(query)
        fmap = feats.permute(0, 2, 3, 1)
        k = self.k_proj(fmap + pos.permute(0, 2, 3, 1))
        v = self.v_proj(fmap)
        k_h, k_w = axial_compress(k)
        g = scene_context(self.scene, feats) if self.use_scene else None
        out, a_h, a_w = scene_guided_axial_attention(q, k_h, k_w, v, g, return_weights=True)
        self.last_weights = (a_h.detach(), a_w.detach())
        return self.out_proj(out)


class _QueryBlock(nn.Module):
    """Pre-norm block: cross attention -> self attention -> FFN, each residual."""

    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.norm_cross = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_self = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def cross(self, tgt, query_pos, **kw):
        raise NotImplementedError

    def forward(self, tgt, query_pos, **kw):
        tgt = tgt + self.cross(self.norm_cross(tgt), query_pos, **kw)
        q = self.norm_self(tgt) + query_pos
        tgt = tgt + self.self_attn(q, q, self.norm_self(tgt))
        return tgt + self.ffn(self.norm_ffn(tgt))

    def zero_output(self):
        """Zero every residual branch's output projection (identity block)."""
        for lin in self._output_linears():
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def _output_linears(self):
        return [self.self_attn.out_proj, self.ffn.linear2]


class MaskedAttentionBlock(_QueryBlock):
    def __init__(self, dim, heads=8, ffn_dim=512):
        super().__init__(dim, heads, ffn_dim)
        self.cross_attn = MultiHeadAttention(dim, heads)

    def cross(self, tgt, query_pos, memory, memory_pos, allowed=None):
        """memory/memory_pos ``(N, L, C)``; allowed ``(N, m, L)`` boolean."""
        return self.cross_attn(tgt + query_pos, memory + memory_pos, memory, allowed)

    def _output_linears(self):
        return [self.cross_attn.out_proj] + super()._output_linears()


class SceneAxialBlock(_QueryBlock):
    def __init__(self, dim, heads=8, ffn_dim=512, use_scene=True):
        super().__init__(dim, heads, ffn_dim)
        self.axial = SceneAxialAttention(dim, use_scene)

    def cross(self, tgt, query_pos, feats, pos):
        return self.axial(tgt + query_pos, feats, pos)

    def _output_linears(self):
        return [self.axial.out_proj] + super()._output_linears()


def masked_attention(block: MaskedAttentionBlock, tgt, query_pos, memory, memory_pos, allowed):
    """One masked attention block; empty per-query masks fall back to full attention."""
    if allowed is not None:
        allowed = fill_empty_masks(allowed)
    return block(tgt, query_pos, memory=memory, memory_pos=memory_pos, allowed=allowed)


def fill_empty_masks(allowed: torch.Tensor) -> torch.Tensor:
    empty = ~allowed.any(dim=-1, keepdim=True)
    return allowed | empty


def attention_mask_from(mask_logits: torch.Tensor, size) -> torch.Tensor:
    """Boolean ``(N, m, h*w)`` map of positions each query may attend to."""
    m = F.interpolate(mask_logits, size=size, mode="bilinear", align_corners=False)
    allowed = (m.sigmoid() >= 0.5).flatten(2)
    return fill_empty_masks(allowed).detach()


class TransformerDecoder(nn.Module):
    def __init__(
        self,
        dim=128,
        num_queries=5,
        heads=8,
        ffn_dim=512,
        structure="mab3_saab",
        rounds=1,
        mask_layers=3,
    ):
        super().__init__()
        if structure not in STRUCTURES:
            raise ValueError(f"unknown decoder structure {structure!r}; choose from {sorted(STRUCTURES)}")
        if num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        self.dim = dim
        self.num_queries = num_queries
        self.layout = STRUCTURES[structure] * rounds
        blocks = []
        for kind, _ in self.layout:
            if kind == "mab":
                blocks.append(MaskedAttentionBlock(dim, heads, ffn_dim))
            else:
                blocks.append(SceneAxialBlock(dim, heads, ffn_dim, use_scene=(kind == "saab")))
        self.blocks = nn.ModuleList(blocks)
        self.query_feat = nn.Embedding(num_queries, dim)
        self.query_embed = nn.Embedding(num_queries, dim)
        self.level_embed = nn.Embedding(4, dim)
        self.head = PredictionHead(dim, mask_layers=mask_layers)

    def forward(self, refined: RefinedFeatures):
        return decode(self, refined)


def decode(decoder: TransformerDecoder, refined: RefinedFeatures):
    """Run all blocks, emitting a prediction before the first block and after each one.

    Returns ``(R_p, predictions)`` where ``R_p`` is the final query state
    ``(N, m, C)`` and ``predictions`` is a list of dicts with ``pred_logits``
    ``(N, m, 2)`` and ``pred_masks`` ``(N, m, H/4, W/4)``.
    """
    mask_features = refined.mask_features
    maps = list(refined.decoder_levels) + [mask_features]
    n = mask_features.shape[0]
    dtype = mask_features.dtype
    pos_cache: Dict[int, torch.Tensor] = {}

    def pos_of(idx):
        if idx not in pos_cache:
            h, w = maps[idx].shape[-2:]
            pos_cache[idx] = sine_position_embedding(h, w, decoder.dim, dtype=dtype, device=mask_features.device)
        return pos_cache[idx]

    tgt = decoder.query_feat.weight[None].expand(n, -1, -1).to(dtype)
    query_pos = decoder.query_embed.weight[None].expand(n, -1, -1).to(dtype)
    predictions: List[dict] = []

    cls, masks = decoder.head(tgt, mask_features)
    predictions.append({"pred_logits": cls, "pred_masks": masks})
    for block, (kind, idx) in zip(decoder.blocks, decoder.layout):
        feats = maps[idx]
        if kind == "mab":
            memory = (feats + decoder.level_embed.weight[idx].to(dtype)[:, None, None]).flatten(2).transpose(1, 2)
            memory_pos = pos_of(idx).flatten(1).transpose(0, 1)[None].expand(n, -1, -1)
            allowed = attention_mask_from(masks, feats.shape[-2:])
            tgt = masked_attention(block, tgt, query_pos, memory, memory_pos, allowed)
        else:
            pos = pos_of(idx)[None].expand(n, -1, -1, -1)
            tgt = block(tgt, query_pos, feats=feats, pos=pos)
        cls, masks = decoder.head(tgt, mask_features)
        predictions.append({"pred_logits": cls, "pred_masks": masks})
    return tgt, predictions
