"""The four pretraining objectives and their heads.

Loss conventions (all reductions follow the literal formulas; variants sit
behind explicit flags):

* token reconstruction: cross-entropy summed over masked positions within a
  sequence, averaged over the batch (``reduction="sequence_sum"``), or averaged
  per masked token (``"token_mean"``).
* signal reconstruction: squared error summed over all L x C entries per
  sample, averaged over the batch (``reduction="sample_sum"``), or averaged
  per element (``"element_mean"``); an optional element mask restricts the
  error to corrupted positions.
* pair matching: mean binary cross-entropy over the batch.
* pairwise sigmoid: softplus(-y_ij * <x'_i, t'_j>) summed over all B^2 pairs
  and divided by B (not B^2); softplus keeps it finite for large logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import TransformerEncoderBlock, sinusoidal_positions


@dataclass
class LossWeights:
    mlm: float = 1.0
    mem: float = 1.0
    etm: float = 1.0
    ets: float = 1.0

    def __post_init__(self) -> None:
        for name in ("mlm", "mem", "etm", "ets"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative weight for {name}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mlm, self.mem, self.etm, self.ets)


@dataclass
class LossBreakdown:
    mlm: float
    mem: float
    etm: float
    ets: float
    weights: tuple[float, float, float, float]
    total: float

    @classmethod
    def from_parts(cls, mlm: float, mem: float, etm: float, ets: float,
                   weights: LossWeights) -> "LossBreakdown":
        w = weights.as_tuple()
        total = w[0] * mlm + w[1] * mem + w[2] * etm + w[3] * ets
        return cls(mlm=mlm, mem=mem, etm=etm, ets=ets, weights=w, total=total)


@dataclass
class PairLabels:
    """Match labels for a batch after negative substitution.

    ``y_match[k]`` is True iff position k kept its true paired text.
    ``y_pair`` is the B x B matrix of +/-1 pairwise labels: +1 only on
    diagonal entries of non-substituted positions.
    ``substitutions`` records (position, original_id, replacement_id).
    """

    y_match: np.ndarray
    y_pair: np.ndarray
    substitutions: tuple[tuple[int, str, str], ...] = ()

    def __post_init__(self) -> None:
        self.y_match = np.asarray(self.y_match, dtype=bool)
        self.y_pair = np.asarray(self.y_pair, dtype=np.float32)
        batch = self.y_match.shape[0]
        if self.y_pair.shape != (batch, batch):
            raise ValueError("y_pair must be a square matrix matching y_match")
        if not np.all(np.isin(self.y_pair, (-1.0, 1.0))):
            raise ValueError("y_pair entries must be +1 or -1")


@dataclass
class MemDecoderConfig:
    decoder_dim: int = 384
    n_layers: int = 2
    n_heads: int = 6

    def __post_init__(self) -> None:
        if self.decoder_dim < 1 or self.n_layers < 1:
            raise ValueError("decoder_dim and n_layers must be >= 1")
        if self.decoder_dim % self.n_heads != 0:
            raise ValueError("decoder_dim must be divisible by n_heads")


def mlm_loss(logits: torch.Tensor, targets: torch.Tensor, positions: torch.Tensor,
             reduction: str = "sequence_sum") -> torch.Tensor:
    """Cross-entropy over masked token positions.

    ``logits`` is (B, M, V), ``targets`` the pre-mask ids (B, M), ``positions``
    a boolean (B, M) selector of masked positions.
    """
    if logits.shape[:2] != targets.shape or targets.shape != positions.shape:
        raise ValueError("logits, targets, positions shapes are inconsistent")
    selector = positions.to(logits.dtype)
    if selector.sum() == 0:
        raise ValueError("no masked positions in the batch")
    log_probs = torch.log_softmax(logits, dim=-1)
    target_logp = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    negatives = -(target_logp * selector)
    if reduction == "sequence_sum":
        return negatives.sum() / logits.shape[0]
    if reduction == "token_mean":
        return negatives.sum() / selector.sum()
    raise ValueError(f"unknown mlm reduction {reduction!r}")


def mem_loss(x_hat: torch.Tensor, x: torch.Tensor,
             element_mask: torch.Tensor | None = None,
             reduction: str = "sample_sum") -> torch.Tensor:
    """Squared reconstruction error for the ECG signal."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    sq = (x_hat - x) ** 2
    if element_mask is not None:
        if element_mask.shape != x.shape:
            raise ValueError("element_mask shape must match the signal")
        sq = sq * element_mask.to(sq.dtype)
    if reduction == "sample_sum":
        return sq.reshape(sq.shape[0], -1).sum(dim=1).mean()
    if reduction == "element_mean":
        return sq.mean()
    raise ValueError(f"unknown mem reduction {reduction!r}")


def etm_loss(logits: torch.Tensor, y_match: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between match logits and pair labels."""
    if logits.shape != y_match.shape:
        raise ValueError("logits and labels must have the same shape")
    return nn.functional.binary_cross_entropy_with_logits(
        logits, y_match.to(logits.dtype))


def ets_loss(x_proj: torch.Tensor, t_proj: torch.Tensor, y_pair: torch.Tensor,
             scale: torch.Tensor | float | None = None,
             bias: torch.Tensor | float | None = None,
             normalize: bool = False) -> torch.Tensor:
    """Pairwise sigmoid contrastive loss over all B x B embedding dot products.

    The sum over B^2 terms is divided by B, so the magnitude grows with the
    batch size by construction. ``normalize``/``scale``/``bias`` enable the
    unit-norm + learnable-temperature variant; defaults reproduce the plain
    raw-dot-product form.
    """
    if x_proj.shape != t_proj.shape or x_proj.ndim != 2:
        raise ValueError("embeddings must be matching (B, D) matrices")
    batch = x_proj.shape[0]
    if y_pair.shape != (batch, batch):
        raise ValueError(f"y_pair must be ({batch}, {batch})")
    if not torch.all((y_pair == 1) | (y_pair == -1)):
        raise ValueError("y_pair entries must be +1 or -1")
    if normalize:
        x_proj = nn.functional.normalize(x_proj, dim=-1)
        t_proj = nn.functional.normalize(t_proj, dim=-1)
    logits = x_proj @ t_proj.T
    if scale is not None:
        logits = logits * scale
    if bias is not None:
        logits = logits + bias
    return nn.functional.softplus(-y_pair.to(logits.dtype) * logits).sum() / batch


def total_loss(mlm: torch.Tensor, mem: torch.Tensor, etm: torch.Tensor,
               ets: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Weighted sum; a zero weight drops that objective (ablation toggles)."""
    w = weights.as_tuple()
    return w[0] * mlm + w[1] * mem + w[2] * etm + w[3] * ets


class EtmHead(nn.Module):
    """Match logit: mean over all fused rows, then a single dense layer."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.dense = nn.Linear(embed_dim, 1)

    def forward(self, h_f: torch.Tensor) -> torch.Tensor:
        return self.dense(h_f.mean(dim=1)).squeeze(-1)


class MemDecoder(nn.Module):
    """Reconstruct the full-length signal from the fused ECG span.

    The span is projected to the decoder width, repeated by the encoder's
    stride product, padded with a learnable mask token where no encoder frame
    exists, tagged with sinusoidal positions, refined by transformer blocks,
    and mapped to one value per lead and sample.
    """

    def __init__(self, embed_dim: int, n_channels: int, upsample_factor: int,
                 config: MemDecoderConfig):
        super().__init__()
        if config.decoder_dim > embed_dim:
            raise ValueError(
                f"decoder_dim {config.decoder_dim} must not exceed encoder width {embed_dim}")
        if upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")
        self.config = config
        self.upsample_factor = upsample_factor
        self.in_proj = nn.Linear(embed_dim, config.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(config.decoder_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.blocks = nn.ModuleList([
            TransformerEncoderBlock(config.decoder_dim, config.n_heads,
                                    4 * config.decoder_dim)
            for _ in range(config.n_layers)
        ])
        self.ln_out = nn.LayerNorm(config.decoder_dim)
        self.out_proj = nn.Linear(config.decoder_dim, n_channels)

    def forward(self, ecg_states: torch.Tensor, length: int) -> torch.Tensor:
        batch, n_frames, _ = ecg_states.shape
        covered = n_frames * self.upsample_factor
        if not covered <= length < covered + self.upsample_factor:
            raise ValueError(
                f"target length {length} not reachable from {n_frames} frames "
                f"with upsample factor {self.upsample_factor}")
        z = self.in_proj(ecg_states)
        z = z.repeat_interleave(self.upsample_factor, dim=1)
        if length > covered:
            fill = self.mask_token[None, None, :].expand(batch, length - covered, -1)
            z = torch.cat([z, fill], dim=1)
        z = z + sinusoidal_positions(length, z.shape[-1], z.dtype, z.device)[None]
        for block in self.blocks:
            z = block(z)
        return self.out_proj(self.ln_out(z))
