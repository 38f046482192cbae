"""Stochastic input corruption: lead masking, input dropout, and token masking.

All functions are pure given an explicit ``numpy.random.Generator``; callers
own the rng state (per-batch streams during training).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import MASK_ID, TokenSequence


@dataclass
class MaskConfig:
    lead_mask_prob: float = 0.5
    input_dropout_prob: float = 0.1
    mlm_mask_ratio: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("lead_mask_prob", "input_dropout_prob", "mlm_mask_ratio"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass
class MaskSpec:
    """Record of one example's corruption choices."""

    lead_mask: np.ndarray          # (C,) bool, True = lead zeroed
    element_mask: np.ndarray       # (L, C) bool, True = element dropped
    mlm_positions: np.ndarray      # sorted indices of masked token positions


def random_lead_mask(samples: np.ndarray, prob: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero out whole leads independently with probability ``prob``.

    Unmasked leads are bit-identical to the input.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"lead mask prob must be in [0, 1], got {prob}")
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ValueError("expected an (L, C) array")
    n_leads = samples.shape[1]
    lead_mask = rng.random(n_leads) < prob
    out = samples.copy()
    out[:, lead_mask] = 0.0
    return out, lead_mask


def input_dropout_mask(samples: np.ndarray, prob: float, rng: np.random.Generator,
                       training: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout on individual samples; identity in eval mode."""
    if not 0.0 <= prob < 1.0:
        if prob == 1.0:
            raise ValueError("degenerate dropout: prob must be < 1")
        raise ValueError(f"dropout prob must be in [0, 1), got {prob}")
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ValueError("expected an (L, C) array")
    if not training or prob == 0.0:
        return samples.copy(), np.zeros(samples.shape, dtype=bool)
    element_mask = rng.random(samples.shape) < prob
    out = samples.copy()
    out[element_mask] = 0.0
    out = out / np.float32(1.0 - prob)
    return out.astype(samples.dtype, copy=False), element_mask


def mlm_mask(tokens: TokenSequence, ratio: float,
             rng: np.random.Generator) -> tuple[TokenSequence, np.ndarray]:
    """Replace ceil(ratio * n_real) token ids with MASK, uniformly without replacement.

    At least one position is masked whenever ratio > 0. Original ids are the
    caller's prediction targets.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mlm ratio must be in [0, 1], got {ratio}")
    non_pad = np.flatnonzero(tokens.mask)
    if non_pad.size == 0:
        raise ValueError("nothing to mask: all-PAD sequence")
    if ratio == 0.0:
        return TokenSequence(tokens.ids.copy(), tokens.mask.copy()), np.empty(0, dtype=np.int64)
    # the -1e-9 guard keeps binary-float spillover (e.g. 0.1 * 20 -> 2.0000...04)
    # from inflating the ceil
    n_mask = max(1, min(non_pad.size, math.ceil(ratio * non_pad.size - 1e-9)))
    positions = np.sort(rng.choice(non_pad, size=n_mask, replace=False))
    ids = tokens.ids.copy()
    ids[positions] = MASK_ID
    return TokenSequence(ids, tokens.mask.copy()), positions.astype(np.int64)
