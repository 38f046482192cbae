"""Downstream evaluation: zero-shot scoring, linear probing, macro AUC, label maps.

Zero-shot scores are cosine similarities between the contrastive ECG embedding
of an example and the contrastive text embedding of each class description;
fused features are never used. The linear probe is deliberately rigid so runs
are comparable: standardize features on the probe-train rows, then full-batch
gradient descent on one-vs-rest binary cross-entropy for ``PROBE_ITERS``
iterations at ``PROBE_LR``, no regularization.

File formats:

* prompts file -- UTF-8 lines ``class_name<TAB>description``.
* mapping file -- JSON list of ``{"source": ..., "target": ...|null}``.
* metrics file -- JSON ``{task, auc_macro, per_class_auc, n_examples,
  config_hash}``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import PairedExample, Vocabulary, preprocess_text, tokenize
from .model import PretrainModel

PROBE_ITERS = 500
PROBE_LR = 0.1


@dataclass
class ClassPromptSet:
    class_names: list[str]
    descriptions: list[str]

    def __post_init__(self) -> None:
        if len(self.class_names) != len(self.descriptions):
            raise ValueError("class_names and descriptions must have equal lengths")
        if not self.class_names:
            raise ValueError("empty prompt set")
        if any(not d for d in self.descriptions):
            raise ValueError("descriptions must be non-empty")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def load_prompts(path: str | Path) -> ClassPromptSet:
    names, descriptions = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(
                    f"malformed prompts line {line_no}: expected 'name<TAB>description'")
            name, description = line.split("\t", 1)
            names.append(name.strip())
            descriptions.append(description.strip())
    return ClassPromptSet(class_names=names, descriptions=descriptions)


def save_prompts(prompts: ClassPromptSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, description in zip(prompts.class_names, prompts.descriptions):
            fh.write(f"{name}\t{description}\n")


@dataclass
class ScoreMatrix:
    scores: np.ndarray   # (N, K) float
    labels: np.ndarray   # (N, K) bool

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 2:
            raise ValueError("scores and labels must be matching (N, K) matrices")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")


@dataclass
class LabelMapping:
    pairs: list[tuple[str, str | None]]

    def __post_init__(self) -> None:
        sources = [s for s, _ in self.pairs]
        if len(set(sources)) != len(sources):
            raise ValueError("source classes must be unique")
        self._target_of = dict(self.pairs)

    def target(self, source: str) -> str | None:
        if source not in self._target_of:
            raise ValueError(f"unknown source class {source!r}")
        return self._target_of[source]

    @classmethod
    def from_file(cls, path: str | Path) -> "LabelMapping":
        records = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(pairs=[(r["source"], r.get("target")) for r in records])


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    avg_rank = starts + (counts + 1) / 2.0   # 1-based rank, ties averaged
    ranks = avg_rank[inverse]
    rank_sum = ranks[labels].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def per_class_auc(matrix: ScoreMatrix) -> np.ndarray:
    """Per-class AUC; degenerate classes yield NaN with a warning."""
    n_classes = matrix.scores.shape[1]
    out = np.full(n_classes, np.nan)
    for k in range(n_classes):
        column = matrix.labels[:, k]
        if column.all() or not column.any():
            warnings.warn(f"class {k} has no positives or no negatives; "
                          f"excluded from macro AUC", stacklevel=2)
            continue
        out[k] = binary_auc(matrix.scores[:, k], column)
    return out


def auc_macro(matrix: ScoreMatrix) -> float:
    """Unweighted mean AUC over classes with both positives and negatives."""
    per_class = per_class_auc(matrix)
    if np.isnan(per_class).all():
        raise ValueError("every class is degenerate; macro AUC undefined")
    return float(np.nanmean(per_class))


def one_hot_labels(examples: Sequence[PairedExample], n_classes: int) -> np.ndarray:
    labels = np.zeros((len(examples), n_classes), dtype=bool)
    for i, ex in enumerate(examples):
        if ex.latent_class is None:
            raise ValueError(f"example {ex.id} has no latent class label")
        if not 0 <= ex.latent_class < n_classes:
            raise ValueError(f"example {ex.id} class {ex.latent_class} out of range")
        labels[i, ex.latent_class] = True
    return labels


def extract_features(model: PretrainModel, examples: Sequence[PairedExample],
                     batch_size: int = 64) -> np.ndarray:
    """Contrastive ECG embeddings, eval mode, no corruption. Shape (N, proj_dim)."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            group = examples[start:start + batch_size]
            stacked = np.stack([ex.ecg.samples for ex in group])
            feats = model.embed_ecg(torch.from_numpy(stacked).float())
            chunks.append(feats.numpy())
    return np.concatenate(chunks, axis=0)


def embed_prompts(model: PretrainModel, prompts: ClassPromptSet, vocab: Vocabulary
                  ) -> np.ndarray:
    """Contrastive text embeddings of the class descriptions, (K, proj_dim)."""
    model.eval()
    max_len = model.config.text.max_len
    sequences = [tokenize(preprocess_text(d), vocab, max_len) for d in prompts.descriptions]
    ids = torch.from_numpy(np.stack([s.ids for s in sequences]))
    mask = torch.from_numpy(np.stack([s.mask for s in sequences]))
    if not bool(mask.any(dim=1).all()):
        raise ValueError("a class description tokenized to an empty sequence")
    with torch.no_grad():
        return model.embed_text(ids, mask).numpy()


def cosine_scores(features: np.ndarray, class_embeddings: np.ndarray) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    classes = np.asarray(class_embeddings, dtype=np.float64)
    feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    classes = classes / np.maximum(np.linalg.norm(classes, axis=1, keepdims=True), 1e-12)
    return feats @ classes.T


def zero_shot_scores(model: PretrainModel, examples: Sequence[PairedExample],
                     prompts: ClassPromptSet, vocab: Vocabulary,
                     batch_size: int = 64) -> ScoreMatrix:
    """Cosine similarity of every example embedding to every class embedding."""
    features = extract_features(model, examples, batch_size=batch_size)
    class_embeddings = embed_prompts(model, prompts, vocab)
    scores = cosine_scores(features, class_embeddings)
    labels = one_hot_labels(examples, prompts.n_classes)
    return ScoreMatrix(scores=scores, labels=labels)


def _stratified_subsample(labels: np.ndarray, fraction: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Row indices for the probe-train subset; stratified when single-label."""
    n = labels.shape[0]
    if fraction >= 1.0:
        return np.arange(n)
    single_label = bool((labels.sum(axis=1) == 1).all())
    if single_label:
        picks = []
        for k in range(labels.shape[1]):
            members = np.flatnonzero(labels[:, k])
            if members.size == 0:
                continue
            take = max(1, int(round(fraction * members.size)))
            picks.append(rng.choice(members, size=min(take, members.size), replace=False))
        return np.sort(np.concatenate(picks))
    take = max(1, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=take, replace=False))


def linear_probe(train_features: np.ndarray, train_labels: np.ndarray,
                 test_features: np.ndarray, test_labels: np.ndarray,
                 train_fraction: float = 1.0, seed: int = 0,
                 n_iters: int = PROBE_ITERS, lr: float = PROBE_LR
                 ) -> tuple[float, np.ndarray]:
    """One-vs-rest logistic probe on frozen features; returns (macro AUC, per-class)."""
    if not 0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=bool)
    test_labels = np.asarray(test_labels, dtype=bool)

    rng = np.random.default_rng(seed)
    rows = _stratified_subsample(train_labels, train_fraction, rng)
    x = train_features[rows]
    y = train_labels[rows].astype(np.float64)

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    x = (x - mean) / std
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)

    weights = np.zeros((x.shape[1], y.shape[1]))
    for _ in range(n_iters):
        probs = 1.0 / (1.0 + np.exp(-(x @ weights)))
        grad = x.T @ (probs - y) / x.shape[0]
        weights -= lr * grad

    x_test = (test_features - mean) / std
    x_test = np.concatenate([x_test, np.ones((x_test.shape[0], 1))], axis=1)
    scores = 1.0 / (1.0 + np.exp(-(x_test @ weights)))
    matrix = ScoreMatrix(scores=scores, labels=test_labels)
    return auc_macro(matrix), per_class_auc(matrix)


def map_label_space(mapping: LabelMapping, matrix: ScoreMatrix,
                    source_names: Sequence[str]) -> tuple[ScoreMatrix, list[str]]:
    """Project a score matrix onto a shifted label space.

    Classes mapped to None are dropped. When several source classes share a
    target, their label columns merge by logical OR and score columns by max.
    """
    if len(source_names) != matrix.scores.shape[1]:
        raise ValueError("source_names must match the matrix columns")
    target_cols: dict[str, list[int]] = {}
    target_order: list[str] = []
    for col, source in enumerate(source_names):
        target = mapping.target(source)
        if target is None:
            continue
        if target not in target_cols:
            target_cols[target] = []
            target_order.append(target)
        target_cols[target].append(col)
    if not target_order:
        raise ValueError("mapping drops every class")
    scores = np.stack(
        [matrix.scores[:, target_cols[t]].max(axis=1) for t in target_order], axis=1)
    labels = np.stack(
        [matrix.labels[:, target_cols[t]].any(axis=1) for t in target_order], axis=1)
    return ScoreMatrix(scores=scores, labels=labels), target_order


def write_metrics(path: str | Path, task: str, matrix: ScoreMatrix,
                  config_hash: str, extra: dict | None = None) -> dict:
    per_class = per_class_auc(matrix)
    record = {
        "task": task,
        "auc_macro": float(np.nanmean(per_class)),
        "per_class_auc": [None if np.isnan(v) else float(v) for v in per_class],
        "n_examples": int(matrix.scores.shape[0]),
        "config_hash": config_hash,
    }
    if extra:
        record.update(extra)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    return record
