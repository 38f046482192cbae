"""Composite pretraining model: encoders, projection heads, fusion, task heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .encoders import (EcgEncoder, EcgEncoderConfig, EcgProjectionHead,
                       TextEncoder, TextEncoderConfig, TextProjectionHead)
from .fusion import FusedOutput, FusionConfig, FusionModule
from .objectives import EtmHead, MemDecoder, MemDecoderConfig


@dataclass
class ModelConfig:
    ecg: EcgEncoderConfig = field(default_factory=EcgEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mem: MemDecoderConfig = field(default_factory=MemDecoderConfig)
    proj_dim: int = 768
    ets_normalize: bool = False   # unit-norm embeddings + learnable temperature/bias

    def __post_init__(self) -> None:
        dims = {self.ecg.embed_dim, self.text.embed_dim, self.fusion.embed_dim}
        if len(dims) != 1:
            raise ValueError(f"encoder/fusion widths must agree, got {sorted(dims)}")


@dataclass
class PretrainOutputs:
    h_x: torch.Tensor            # (B, L_x, d)
    h_t: torch.Tensor            # (B, M, d)
    x_proj: torch.Tensor         # (B, proj_dim)
    t_proj: torch.Tensor         # (B, proj_dim)
    fused: FusedOutput
    mlm_logits: torch.Tensor     # (B, M, vocab)
    etm_logits: torch.Tensor     # (B,)
    x_hat: torch.Tensor          # (B, L, C)


class PretrainModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.ecg.embed_dim
        self.ecg_encoder = EcgEncoder(config.ecg)
        self.text_encoder = TextEncoder(config.text)
        self.ecg_proj = EcgProjectionHead(d, config.proj_dim)
        self.text_proj = TextProjectionHead(d, config.proj_dim)
        self.fusion = FusionModule(config.fusion)
        self.mlm_head = nn.Linear(d, config.text.vocab_size)
        self.etm_head = EtmHead(d)
        self.mem_decoder = MemDecoder(
            d, config.ecg.in_channels, config.ecg.stride_product, config.mem)
        if config.ets_normalize:
            self.ets_log_scale = nn.Parameter(torch.tensor(math.log(10.0)))
            self.ets_bias = nn.Parameter(torch.tensor(-10.0))
        else:
            self.ets_log_scale = None
            self.ets_bias = None

    def ets_logit_params(self) -> tuple[torch.Tensor | None, torch.Tensor | None]:
        if self.ets_log_scale is None:
            return None, None
        return self.ets_log_scale.exp(), self.ets_bias

    def embed_ecg(self, ecg: torch.Tensor) -> torch.Tensor:
        """Contrastive ECG embedding x' (no corruption applied here)."""
        return self.ecg_proj(self.ecg_encoder(ecg))

    def embed_text(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Contrastive text embedding t'."""
        return self.text_proj(self.text_encoder(ids, mask), mask)

    def forward(self, ecg: torch.Tensor, token_ids: torch.Tensor,
                token_mask: torch.Tensor) -> PretrainOutputs:
        h_x = self.ecg_encoder(ecg)
        h_t = self.text_encoder(token_ids, token_mask)
        x_proj = self.ecg_proj(h_x)
        t_proj = self.text_proj(h_t, token_mask)
        fused = self.fusion(h_x, h_t, token_mask)
        mlm_logits = self.mlm_head(fused.text_states)
        etm_logits = self.etm_head(fused.h_f)
        x_hat = self.mem_decoder(fused.ecg_states, ecg.shape[1])
        return PretrainOutputs(h_x=h_x, h_t=h_t, x_proj=x_proj, t_proj=t_proj,
                               fused=fused, mlm_logits=mlm_logits,
                               etm_logits=etm_logits, x_hat=x_hat)
