"""Shared transformer building blocks (pre-layer-norm convention)."""

from __future__ import annotations

import math

import torch
from torch import nn


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with optional boolean key masking.

    Set ``store_attention=True`` to keep the last attention probabilities in
    ``last_attention`` (B, heads, Lq, Lk) for inspection; off by default.
    """

    def __init__(self, embed_dim: int, n_heads: int):
        super().__init__()
        if embed_dim % n_heads != 0:
            raise ValueError(f"embed_dim {embed_dim} not divisible by n_heads {n_heads}")
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.head_dim = embed_dim // n_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)
        self.store_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, query: torch.Tensor, key_value: torch.Tensor,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        batch, len_q, _ = query.shape
        len_k = key_value.shape[1]

        def split(x: torch.Tensor, length: int) -> torch.Tensor:
            return x.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query), len_q)
        k = split(self.k_proj(key_value), len_k)
        v = split(self.v_proj(key_value), len_k)

        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if key_mask is not None:
            neg = torch.finfo(scores.dtype).min
            scores = scores.masked_fill(~key_mask[:, None, None, :], neg)
        attn = torch.softmax(scores, dim=-1)
        if self.store_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(batch, len_q, self.embed_dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.gelu(self.fc1(x)))


class TransformerEncoderBlock(nn.Module):
    """Pre-LN self-attention block: x + attn(LN(x)), then x + ffn(LN(x))."""

    def __init__(self, embed_dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.ln_attn = nn.LayerNorm(embed_dim)
        self.attn = MultiHeadAttention(embed_dim, n_heads)
        self.ln_ffn = nn.LayerNorm(embed_dim)
        self.ffn = FeedForward(embed_dim, ffn_dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        normed = self.ln_attn(x)
        x = x + self.attn(normed, normed, key_mask)
        x = x + self.ffn(self.ln_ffn(x))
        return x


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype,
                         device: torch.device) -> torch.Tensor:
    """Standard fixed sin/cos position table, shape (length, dim)."""
    position = torch.arange(length, dtype=dtype, device=device)[:, None]
    half = (dim + 1) // 2
    freq = torch.exp(
        torch.arange(half, dtype=dtype, device=device) * (-math.log(10000.0) / max(half - 1, 1)))
    angles = position * freq[None, :]
    table = torch.zeros(length, dim, dtype=dtype, device=device)
    table[:, 0::2] = torch.sin(angles[:, : (dim + 1) // 2])
    table[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return table
