"""Building blocks shared by the pixel decoder, transformer decoder and heads."""
import math

import torch
from torch import nn
from torch.nn import functional as F


def sine_position_embedding(h, w, channels, dtype=torch.float32, device=None, temperature=10000):
    """2-D sinusoidal embedding of shape ``(channels, h, w)``.

    Half of the channels encode y, half encode x; coordinates are normalized
    to ``(0, 2*pi]``.
    """
    if channels % 4:
        raise ValueError("positional embedding needs channels divisible by 4")
    npf = channels // 2
    y = torch.arange(1, h + 1, dtype=dtype, device=device)[:, None].expand(h, w)
    x = torch.arange(1, w + 1, dtype=dtype, device=device)[None, :].expand(h, w)
    eps = 1e-6
    y = y / (h + eps) * 2 * math.pi
    x = x / (w + eps) * 2 * math.pi
    dim_t = torch.arange(npf, dtype=dtype, device=device)
    dim_t = temperature ** (2 * (dim_t // 2) / npf)
    px = x[..., None] / dim_t
    py = y[..., None] / dim_t
    px = torch.stack((px[..., 0::2].sin(), px[..., 1::2].cos()), dim=-1).flatten(2)
    py = torch.stack((py[..., 0::2].sin(), py[..., 1::2].cos()), dim=-1).flatten(2)
    return torch.cat((py, px), dim=-1).permute(2, 0, 1)


def scaled_dot_attention(q, k, v, allowed=None):
    """Softmax attention returning ``(output, weights)``.

    q: ``(..., Lq, d)``, k/v: ``(..., Lk, d)``. ``allowed`` is a boolean
    ``(..., Lq, Lk)`` mask; disallowed logits become ``-inf``. An all-True
    mask leaves the logits untouched, so the result equals the unmasked one
    bit for bit.
    """
    logits = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if allowed is not None:
        logits = logits.masked_fill(~allowed, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, v), weights


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads=8):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim ({dim}) must be divisible by heads ({heads})")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.last_weights = None

    def _split(self, x):
        n, length, _ = x.shape
        return x.view(n, length, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query, key, value, allowed=None):
        """query ``(N, Lq, C)``, key/value ``(N, Lk, C)``, allowed ``(N, Lq, Lk)``."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        if allowed is not None:
            allowed = allowed[:, None]
        out, weights = scaled_dot_attention(q, k, v, allowed)
        self.last_weights = weights.detach()
        n, _, lq, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(n, lq, self.dim))


class FFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.linear1 = nn.Linear(dim, hidden)
        self.linear2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.linear2(F.relu(self.linear1(x)))


class MLP(nn.Module):
    """Plain ReLU MLP with ``num_layers`` linear layers."""

    def __init__(self, in_dim, hidden, out_dim, num_layers):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1)
        outs = [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, outs))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x
