"""ECG and text encoders plus the two contrastive projection heads.

The ECG path is a convolutional feature extractor (GELU + group norm per
layer), a linear projection into the embedding space, a grouped convolutional
positional encoding added residually, and a stack of pre-LN transformer
blocks. Each conv layer maps a length of n to floor(n / stride), so the final
sequence length is the floor-division of the input length through the stride
product.

The text path is a small trainable transformer with the same interface as a
pretrained encoder (token ids + attention mask -> M x d states), so one can be
swapped in without touching callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .layers import TransformerEncoderBlock


@dataclass
class EcgEncoderConfig:
    conv_channels: tuple[int, ...] = (64, 128, 256, 512)
    conv_kernels: tuple[int, ...] = (7, 3, 3, 3)
    conv_strides: tuple[int, ...] = (5, 2, 2, 2)
    embed_dim: int = 768
    n_layers: int = 8
    n_heads: int = 12
    ffn_dim: int = 3072
    pos_conv_kernel: int = 31
    pos_conv_groups: int = 16
    in_channels: int = 12

    def __post_init__(self) -> None:
        self.conv_channels = tuple(self.conv_channels)
        self.conv_kernels = tuple(self.conv_kernels)
        self.conv_strides = tuple(self.conv_strides)
        if not (len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ValueError("conv_channels, conv_kernels, conv_strides must have equal lengths")
        if not self.conv_channels:
            raise ValueError("need at least one conv layer")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.embed_dim % self.pos_conv_groups != 0:
            raise ValueError("embed_dim must be divisible by pos_conv_groups")

    @property
    def stride_product(self) -> int:
        out = 1
        for s in self.conv_strides:
            out *= s
        return out

    def output_length(self, input_length: int) -> int:
        length = input_length
        for stride in self.conv_strides:
            length = length // stride
            if length < 1:
                raise ValueError(
                    f"conv underflow: input length {input_length} too short for "
                    f"strides {self.conv_strides}")
        return length


@dataclass
class TextEncoderConfig:
    vocab_size: int = 4
    embed_dim: int = 768
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 3072
    max_len: int = 32

    def __post_init__(self) -> None:
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (PAD/UNK/MASK + content)")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.n_layers < 1 or self.max_len < 1:
            raise ValueError("n_layers and max_len must be >= 1")


class EcgEncoder(nn.Module):
    """Masked ECG (B, L, C) -> contextual states (B, L_x, d)."""

    def __init__(self, config: EcgEncoderConfig):
        super().__init__()
        self.config = config
        convs = []
        norms = []
        in_ch = config.in_channels
        for out_ch, kernel, stride in zip(config.conv_channels, config.conv_kernels,
                                          config.conv_strides):
            convs.append(nn.Conv1d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2))
            norms.append(nn.GroupNorm(math.gcd(out_ch, 16), out_ch))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.input_proj = nn.Linear(config.conv_channels[-1], config.embed_dim)
        self.pos_conv = nn.Conv1d(
            config.embed_dim, config.embed_dim, config.pos_conv_kernel,
            padding=config.pos_conv_kernel // 2, groups=config.pos_conv_groups)
        self.blocks = nn.ModuleList([
            TransformerEncoderBlock(config.embed_dim, config.n_heads, config.ffn_dim)
            for _ in range(config.n_layers)
        ])
        self.ln_out = nn.LayerNorm(config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[2] != self.config.in_channels:
            raise ValueError(
                f"expected (B, L, {self.config.in_channels}) input, got {tuple(x.shape)}")
        h = x.transpose(1, 2)  # (B, C, L)
        for conv, norm, stride in zip(self.convs, self.norms, self.config.conv_strides):
            target = h.shape[-1] // stride
            if target < 1:
                raise ValueError(
                    f"conv underflow: length {h.shape[-1]} with stride {stride}")
            h = norm(nn.functional.gelu(conv(h)))[..., :target]
        h = self.input_proj(h.transpose(1, 2))  # (B, L_x, d)
        pos = self.pos_conv(h.transpose(1, 2))[..., : h.shape[1]].transpose(1, 2)
        h = h + nn.functional.gelu(pos)
        for block in self.blocks:
            h = block(h)
        return self.ln_out(h)


class TextEncoder(nn.Module):
    """Token ids (B, M) + attention mask -> contextual states (B, M, d).

    Parameters are trainable; PAD positions never contribute as attention keys.
    """

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.embed_dim)
        self.pos_emb = nn.Embedding(config.max_len, config.embed_dim)
        self.blocks = nn.ModuleList([
            TransformerEncoderBlock(config.embed_dim, config.n_heads, config.ffn_dim)
            for _ in range(config.n_layers)
        ])
        self.ln_out = nn.LayerNorm(config.embed_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.ndim != 2 or ids.shape[1] != self.config.max_len:
            raise ValueError(f"expected (B, {self.config.max_len}) ids, got {tuple(ids.shape)}")
        if ids.shape != mask.shape:
            raise ValueError("ids and mask shapes must match")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(
                f"token out of range: ids must be in [0, {self.config.vocab_size})")
        positions = torch.arange(self.config.max_len, device=ids.device)
        h = self.token_emb(ids) + self.pos_emb(positions)[None, :, :]
        key_mask = mask.bool()
        for block in self.blocks:
            h = block(h, key_mask)
        return self.ln_out(h)


class EcgProjectionHead(nn.Module):
    """Mean pool over frames -> Tanh -> dense; the contrastive embedding g_x."""

    def __init__(self, embed_dim: int, out_dim: int = 768):
        super().__init__()
        self.dense = nn.Linear(embed_dim, out_dim)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.dense(torch.tanh(states.mean(dim=1)))


class TextProjectionHead(nn.Module):
    """Mask-aware mean pool -> Tanh -> dense; the contrastive embedding g_t."""

    def __init__(self, embed_dim: int, out_dim: int = 768):
        super().__init__()
        self.dense = nn.Linear(embed_dim, out_dim)

    def forward(self, states: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        valid = valid_mask.to(states.dtype)
        counts = valid.sum(dim=1)
        if (counts == 0).any():
            raise ValueError("empty pooling: a sequence has no valid positions")
        pooled = (states * valid[:, :, None]).sum(dim=1) / counts[:, None]
        return self.dense(torch.tanh(pooled))
