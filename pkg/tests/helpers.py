"""Shared test utilities: finite-difference oracle, tiny configs, AUC oracle."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import torch

from ecgtext.encoders import EcgEncoderConfig, TextEncoderConfig
from ecgtext.fusion import FusionConfig
from ecgtext.model import ModelConfig
from ecgtext.objectives import MemDecoderConfig


def finite_difference_check(loss_fn: Callable[[], torch.Tensor],
                            params: Iterable[tuple[str, torch.Tensor]],
                            step: float = 1e-5,
                            entries_per_param: int = 5,
                            seed: int = 0) -> float:
    """Max relative error between autograd gradients and central differences.

    ``loss_fn`` must be a pure closure over double-precision parameters; it is
    re-evaluated after in-place single-entry perturbations. A deterministic
    random sample of entries is checked in every parameter tensor.
    """
    params = list(params)
    tensors = [p for _, p in params]
    loss = loss_fn()
    assert loss.dtype == torch.float64, "gradient checks must run in float64"
    raw_grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p)
             for g, p in zip(raw_grads, tensors)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for (_, param), grad in zip(params, grads):
            flat = param.reshape(-1)
            grad_flat = grad.reshape(-1)
            n = flat.numel()
            picks = rng.choice(n, size=min(entries_per_param, n), replace=False)
            for raw_idx in picks:
                idx = int(raw_idx)
                orig = flat[idx].item()
                flat[idx] = orig + step
                up = loss_fn().item()
                flat[idx] = orig - step
                down = loss_fn().item()
                flat[idx] = orig
                fd = (up - down) / (2.0 * step)
                analytic = grad_flat[idx].item()
                denom = max(abs(analytic), abs(fd), 1e-6)
                worst = max(worst, abs(analytic - fd) / denom)
    return worst


def tiny_ecg_config(in_channels: int = 2) -> EcgEncoderConfig:
    return EcgEncoderConfig(
        conv_channels=(4, 8), conv_kernels=(3, 3), conv_strides=(2, 2),
        embed_dim=8, n_layers=1, n_heads=2, ffn_dim=16,
        pos_conv_kernel=5, pos_conv_groups=2, in_channels=in_channels)


def tiny_text_config(vocab_size: int = 12) -> TextEncoderConfig:
    return TextEncoderConfig(
        vocab_size=vocab_size, embed_dim=8, n_layers=1, n_heads=2,
        ffn_dim=16, max_len=8)


def tiny_model_config(vocab_size: int = 12, in_channels: int = 2) -> ModelConfig:
    return ModelConfig(
        ecg=tiny_ecg_config(in_channels),
        text=tiny_text_config(vocab_size),
        fusion=FusionConfig(embed_dim=8, n_heads=2, n_blocks=1),
        mem=MemDecoderConfig(decoder_dim=8, n_layers=1, n_heads=2),
        proj_dim=8)


def pairwise_auc_oracle(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(n^2) Mann-Whitney count: wins + half-credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    assert pos.size and neg.size, "oracle needs both classes"
    wins = 0
    ties = 0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return (wins + 0.5 * ties) / (pos.size * neg.size)
