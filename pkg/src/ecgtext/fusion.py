"""Bidirectional cross-attention fusion of ECG and text states.

Both streams are linearly projected, tagged with a learned modality embedding
(one broadcast vector per modality), then run through pre-LN cross-attention
blocks in which each stream's queries attend to the other stream's keys and
values. Updates within a block are parallel: both directions read the block's
inputs, so tying the two streams' weights yields symmetric outputs. The fused
sequence is the concatenation [ECG; text].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import FeedForward, MultiHeadAttention


@dataclass
class FusionConfig:
    embed_dim: int = 768
    n_heads: int = 12
    n_blocks: int = 2

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")


@dataclass
class FusedOutput:
    h_f: torch.Tensor    # (B, L_x + L_t, d)
    ecg_len: int
    text_len: int

    @property
    def ecg_span(self) -> slice:
        return slice(0, self.ecg_len)

    @property
    def text_span(self) -> slice:
        return slice(self.ecg_len, self.ecg_len + self.text_len)

    @property
    def ecg_states(self) -> torch.Tensor:
        return self.h_f[:, self.ecg_span, :]

    @property
    def text_states(self) -> torch.Tensor:
        return self.h_f[:, self.text_span, :]


class CrossAttentionStream(nn.Module):
    """One stream's half of a fusion block: cross-attention + feed-forward."""

    def __init__(self, embed_dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.ln_stream = nn.LayerNorm(embed_dim)
        self.attn = MultiHeadAttention(embed_dim, n_heads)
        self.ln_ffn = nn.LayerNorm(embed_dim)
        self.ffn = FeedForward(embed_dim, ffn_dim)

    def forward(self, own: torch.Tensor, other_normed: torch.Tensor,
                other_mask: torch.Tensor | None) -> torch.Tensor:
        own = own + self.attn(self.ln_stream(own), other_normed, other_mask)
        return own + self.ffn(self.ln_ffn(own))


class FusionBlock(nn.Module):
    def __init__(self, embed_dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.ecg_stream = CrossAttentionStream(embed_dim, n_heads, ffn_dim)
        self.text_stream = CrossAttentionStream(embed_dim, n_heads, ffn_dim)

    def forward(self, ecg: torch.Tensor, text: torch.Tensor,
                text_mask: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
        # both directions read the block inputs (parallel update)
        ecg_normed = self.ecg_stream.ln_stream(ecg)
        text_normed = self.text_stream.ln_stream(text)
        new_ecg = self.ecg_stream(ecg, text_normed, text_mask)
        new_text = self.text_stream(text, ecg_normed, None)
        return new_ecg, new_text


class FusionModule(nn.Module):
    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.ecg_proj = nn.Linear(d, d)
        self.text_proj = nn.Linear(d, d)
        self.ecg_modality = nn.Parameter(torch.zeros(d))
        self.text_modality = nn.Parameter(torch.zeros(d))
        nn.init.normal_(self.ecg_modality, std=0.02)
        nn.init.normal_(self.text_modality, std=0.02)
        ffn_dim = 4 * d
        self.blocks = nn.ModuleList(
            [FusionBlock(d, config.n_heads, ffn_dim) for _ in range(config.n_blocks)])
        self.ln_out_ecg = nn.LayerNorm(d)
        self.ln_out_text = nn.LayerNorm(d)

    def forward(self, h_x: torch.Tensor, h_t: torch.Tensor,
                valid_mask_t: torch.Tensor | None = None) -> FusedOutput:
        d = self.config.embed_dim
        if h_x.shape[-1] != d or h_t.shape[-1] != d:
            raise ValueError(
                f"width mismatch: fusion expects width {d}, got "
                f"{h_x.shape[-1]} and {h_t.shape[-1]}")
        text_mask = valid_mask_t.bool() if valid_mask_t is not None else None
        ecg = self.ecg_proj(h_x) + self.ecg_modality
        text = self.text_proj(h_t) + self.text_modality
        for block in self.blocks:
            ecg, text = block(ecg, text, text_mask)
        fused = torch.cat([self.ln_out_ecg(ecg), self.ln_out_text(text)], dim=1)
        return FusedOutput(h_f=fused, ecg_len=h_x.shape[1], text_len=h_t.shape[1])
