"""Nearest-neighbor-based negative sampling over a frozen report embedding index.

The index maps every report id to a fixed vector; negatives for a batch
position are drawn from the k reports *farthest* from its own report by
cosine distance, which keeps duplicate or near-duplicate reports out of the
negative pool. Queries are exact scans (cheap at this scale); an approximate
backend can replace ``top_k_farthest`` without touching callers since
``brute_force_farthest`` pins the semantics.

Index file layout: one line of JSON (n, d, embedder_id, optional extras),
the little-endian float32 vector payload, then a JSON id/text table. Byte
round-trips are exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import PairedExample, TextReport
from .objectives import PairLabels

BOW_EMBEDDER_ID = "bow-hash-512-v1"
DEFAULT_EMBED_DIM = 512


@dataclass
class N3SConfig:
    k: int = 64
    negative_fraction: float = 0.5
    embedder_id: str = BOW_EMBEDDER_ID
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ValueError("negative_fraction must be in [0, 1]")


def _hash_word(word: str, dim: int) -> tuple[int, float]:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    index = int.from_bytes(digest[:8], "little") % dim
    sign = 1.0 if digest[8] % 2 == 0 else -1.0
    return index, sign


def bow_hash_embedder(text: str, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Frozen bag-of-words feature hashing followed by L2 normalization.

    Deterministic and order-insensitive, so duplicate reports map to identical
    vectors. Empty text yields the zero vector (rejected at index build time).
    """
    vec = np.zeros(dim, dtype=np.float64)
    for word in text.split():
        index, sign = _hash_word(word, dim)
        vec[index] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec = vec / norm
    return vec.astype(np.float32)


@dataclass
class EmbeddingIndex:
    """Immutable id -> vector table supporting exact farthest-by-cosine queries."""

    ids: list[str]
    vectors: np.ndarray
    embedder_id: str = BOW_EMBEDDER_ID
    texts: list[str] | None = None
    norms: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.ids = list(self.ids)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("vectors must be an N x D matrix matching ids")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        if self.texts is not None and len(self.texts) != len(self.ids):
            raise ValueError("texts must align with ids")
        self.norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if not np.isfinite(self.vectors).all():
            raise ValueError("index vectors must be finite")
        if (self.norms == 0).any():
            bad = self.ids[int(np.argmax(self.norms == 0))]
            raise ValueError(f"zero-norm vector for id {bad!r}")
        self._row_of = {i: row for row, i in enumerate(self.ids)}
        self._unit = (self.vectors.astype(np.float64)
                      / self.norms[:, None]).astype(np.float64)

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, report_id: str) -> int:
        if report_id not in self._row_of:
            raise KeyError(f"unknown id {report_id!r}")
        return self._row_of[report_id]

    def text_of(self, report_id: str) -> str:
        if self.texts is None:
            raise ValueError("index was built without report texts")
        return self.texts[self.row(report_id)]


def build_index(reports: Sequence[tuple[str, str]],
                embedder: Callable[[str], np.ndarray] | None = None,
                embedder_id: str = BOW_EMBEDDER_ID,
                keep_texts: bool = True) -> EmbeddingIndex:
    """Embed every (id, text) report; duplicate texts yield identical rows."""
    if not reports:
        raise ValueError("no reports to index")
    if embedder is None:
        embedder = bow_hash_embedder
    ids, texts, rows = [], [], []
    for report_id, text in reports:
        vec = np.asarray(embedder(text), dtype=np.float32)
        if vec.ndim != 1:
            raise ValueError(f"embedder returned non-vector for id {report_id!r}")
        if not np.isfinite(vec).all():
            raise ValueError(f"non-finite embedding for id {report_id!r}")
        if float(np.linalg.norm(vec)) == 0.0:
            raise ValueError(f"zero embedding for id {report_id!r}")
        ids.append(report_id)
        texts.append(text)
        rows.append(vec)
    return EmbeddingIndex(ids=ids, vectors=np.stack(rows),
                          embedder_id=embedder_id,
                          texts=texts if keep_texts else None)


def save_index(index: EmbeddingIndex, path: str | Path,
               extra_header: dict | None = None) -> None:
    header = {"n": index.size, "d": index.dim, "embedder_id": index.embedder_id}
    if extra_header:
        header.update(extra_header)
    payload = np.ascontiguousarray(index.vectors, dtype="<f4").tobytes(order="C")
    table = {"ids": index.ids, "texts": index.texts}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)
        fh.write(json.dumps(table, sort_keys=True).encode("utf-8"))


def load_index(path: str | Path) -> EmbeddingIndex:
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ValueError(f"malformed index file {path}: no header line")
    header = json.loads(blob[:newline].decode("utf-8"))
    n, d = int(header["n"]), int(header["d"])
    payload_end = newline + 1 + n * d * 4
    if len(blob) < payload_end:
        raise ValueError(f"length mismatch in index file {path}")
    vectors = np.frombuffer(blob[newline + 1:payload_end], dtype="<f4").reshape(n, d).copy()
    table = json.loads(blob[payload_end:].decode("utf-8"))
    return EmbeddingIndex(ids=table["ids"], vectors=vectors,
                          embedder_id=header["embedder_id"],
                          texts=table.get("texts"))


def top_k_farthest(index: EmbeddingIndex, query_id: str, k: int) -> list[str]:
    """The k ids with the largest cosine distance from the query's vector.

    The query id itself is excluded; ties break by ascending id.
    """
    if k >= index.size:
        raise ValueError(f"k={k} must be smaller than the index size {index.size}")
    row = index.row(query_id)
    # cosine distance = 1 - cos similarity over precomputed unit vectors
    distances = 1.0 - index._unit @ index._unit[row]
    order = sorted((i for i in range(index.size) if i != row),
                   key=lambda i: (-distances[i], index.ids[i]))
    return [index.ids[i] for i in order[:k]]


def brute_force_farthest(ids: Sequence[str], vectors: np.ndarray, query_row: int,
                         k: int) -> list[str]:
    """Independent O(N*D) reference scan with the same tie rule."""
    n = len(ids)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than N={n}")
    query = np.asarray(vectors[query_row], dtype=np.float64)
    q_norm = float(np.linalg.norm(query))
    scored = []
    for i in range(n):
        if i == query_row:
            continue
        vec = np.asarray(vectors[i], dtype=np.float64)
        cos = float(np.dot(vec, query)) / (float(np.linalg.norm(vec)) * q_norm)
        scored.append((1.0 - cos, ids[i]))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [rid for _, rid in scored[:k]]


def sample_negatives(index: EmbeddingIndex, batch: Sequence[PairedExample],
                     config: N3SConfig,
                     rng: np.random.Generator) -> tuple[list[PairedExample], PairLabels]:
    """Replace the texts of floor(fraction * B) batch positions with far reports.

    Substituted positions get y_match=False; the pairwise matrix is +1 only on
    the diagonal of untouched positions. Returns a new batch (the input is not
    mutated) plus the labels and substitution record.
    """
    if not batch:
        raise ValueError("empty batch")
    if config.k >= index.size:
        raise ValueError(f"k={config.k} must be smaller than the index size {index.size}")
    batch_size = len(batch)
    # int() truncation is the intended floor; the epsilon guards spillover
    n_subst = int(config.negative_fraction * batch_size + 1e-9)
    positions = sorted(rng.choice(batch_size, size=n_subst, replace=False).tolist())

    new_batch = list(batch)
    substitutions = []
    y_match = np.ones(batch_size, dtype=bool)
    for pos in positions:
        example = batch[pos]
        candidates = top_k_farthest(index, example.id, config.k)
        replacement_id = candidates[int(rng.integers(len(candidates)))]
        replacement_text = index.text_of(replacement_id)
        new_batch[pos] = PairedExample(
            id=example.id, ecg=example.ecg,
            report=TextReport.from_raw(replacement_text),
            latent_class=example.latent_class)
        y_match[pos] = False
        substitutions.append((pos, example.id, replacement_id))

    y_pair = -np.ones((batch_size, batch_size), dtype=np.float32)
    y_pair[np.diag_indices(batch_size)] = np.where(y_match, 1.0, -1.0)
    labels = PairLabels(y_match=y_match, y_pair=y_pair,
                        substitutions=tuple(substitutions))
    return new_batch, labels


def sample_random_negatives(batch: Sequence[PairedExample],
                            corpus: Sequence[PairedExample],
                            negative_fraction: float,
                            rng: np.random.Generator
                            ) -> tuple[list[PairedExample], PairLabels]:
    """Baseline substitution: draw replacement reports uniformly from the corpus.

    The draw excludes the example's own entry but not duplicates of its text,
    so duplicate-heavy corpora produce mislabeled negatives by design.
    """
    if not batch:
        raise ValueError("empty batch")
    if len(corpus) < 2:
        raise ValueError("need at least two corpus entries")
    row_of = {ex.id: i for i, ex in enumerate(corpus)}
    batch_size = len(batch)
    n_subst = int(negative_fraction * batch_size + 1e-9)
    positions = sorted(rng.choice(batch_size, size=n_subst, replace=False).tolist())

    new_batch = list(batch)
    substitutions = []
    y_match = np.ones(batch_size, dtype=bool)
    for pos in positions:
        example = batch[pos]
        own = row_of[example.id]
        draw = int(rng.integers(len(corpus) - 1))
        if draw >= own:
            draw += 1
        replacement = corpus[draw]
        new_batch[pos] = PairedExample(
            id=example.id, ecg=example.ecg,
            report=TextReport.from_raw(replacement.report.normalized),
            latent_class=example.latent_class)
        y_match[pos] = False
        substitutions.append((pos, example.id, replacement.id))

    y_pair = -np.ones((batch_size, batch_size), dtype=np.float32)
    y_pair[np.diag_indices(batch_size)] = np.where(y_match, 1.0, -1.0)
    labels = PairLabels(y_match=y_match, y_pair=y_pair,
                        substitutions=tuple(substitutions))
    return new_batch, labels
