"""Data model, report preprocessing, synthetic ECG-text corpus generation, and manifest I/O.

The on-disk layout is deliberately language-neutral:

* ``manifest.jsonl`` -- one JSON object per line with keys
  ``id``, ``ecg_path``, ``text``, ``latent_class`` (nullable).
  ``ecg_path`` is resolved relative to the manifest's directory.
* signal files (``.ecg``) -- one line of JSON (``l``, ``c``, ``sample_rate_hz``,
  ``lead_names``) followed by the raw little-endian float32 payload, row-major
  L x C. Round-trips are bit-exact.

Manifests store the *normalized* report text; re-normalizing stored text is a
no-op, so save/load round-trips are exact.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
UNK_ID = 1
MASK_ID = 2
RESERVED_TOKENS = ("<pad>", "<unk>", "<mask>")

_PUNCTUATION = set(string.punctuation)

_STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF",
                   "V1", "V2", "V3", "V4", "V5", "V6")

# Phrase pool for the synthetic corpus. Every phrase of a class contains the
# class term, so class identity is recoverable from bag-of-words statistics.
_CLASS_TERMS = (
    "sinus rhythm",
    "atrial fibrillation",
    "sinus tachycardia",
    "sinus bradycardia",
    "ventricular tachycardia",
    "atrial flutter",
    "first degree av block",
    "left bundle branch block",
    "right bundle branch block",
    "premature ventricular complexes",
    "st segment elevation",
    "prolonged qt interval",
)

_PHRASE_TEMPLATES = (
    "{term}",
    "{term} noted on ecg",
    "ecg shows {term}",
    "findings consistent with {term}",
    "{term} observed tracing otherwise unremarkable",
    "rhythm analysis indicates {term}",
    "{term} present rate within expected limits",
    "automated read {term} please review",
)

# P/Q/R/S/T components as (amplitude mV, offset from beat center s, width s).
_BUMPS = (
    (0.12, -0.160, 0.030),
    (-0.18, -0.030, 0.012),
    (1.00, 0.000, 0.016),
    (-0.22, 0.030, 0.013),
    (0.30, 0.220, 0.055),
)


def preprocess_text(raw: str) -> str:
    """Normalize a report: lowercase, drop punctuation, collapse whitespace."""
    lowered = raw.lower()
    cleaned = "".join(ch for ch in lowered if ch not in _PUNCTUATION)
    return " ".join(cleaned.split())


def merge_reports(parts: Sequence[str]) -> str:
    """Join the per-recording report fragments, in order, with single spaces."""
    if not parts:
        raise ValueError("no reports")
    return " ".join(parts)


@dataclass
class EcgSignal:
    """A single recording: L x C samples in millivolts plus lead metadata."""

    samples: np.ndarray
    sample_rate_hz: float
    lead_names: list[str]

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D (L x C), got shape {self.samples.shape}")
        n_samples, n_leads = self.samples.shape
        if n_samples < 1 or n_leads < 1:
            raise ValueError("signal must have at least one sample and one lead")
        if not np.isfinite(self.samples).all():
            raise ValueError("signal contains non-finite values")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        self.lead_names = list(self.lead_names)
        if len(self.lead_names) != n_leads:
            raise ValueError("lead_names length must match channel count")
        if len(set(self.lead_names)) != n_leads:
            raise ValueError("lead_names must be unique")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_leads(self) -> int:
        return self.samples.shape[1]


@dataclass
class TextReport:
    """A clinical report: raw fragments, their merge, and the normalized form."""

    raw: str
    normalized: str
    report_parts: list[str]

    def __post_init__(self) -> None:
        self.report_parts = list(self.report_parts)
        expected = preprocess_text(merge_reports(self.report_parts))
        if self.normalized != expected:
            raise ValueError("normalized text does not match preprocess(merge(parts))")

    @classmethod
    def from_parts(cls, parts: Sequence[str]) -> "TextReport":
        raw = merge_reports(parts)
        return cls(raw=raw, normalized=preprocess_text(raw), report_parts=list(parts))

    @classmethod
    def from_raw(cls, raw: str) -> "TextReport":
        return cls.from_parts([raw])


@dataclass
class PairedExample:
    """One (ECG, report) training pair; latent_class is synthetic ground truth."""

    id: str
    ecg: EcgSignal
    report: TextReport
    latent_class: int | None = None


@dataclass
class ManifestEntry:
    id: str
    ecg_path: str
    text: str
    latent_class: int | None = None


@dataclass
class DatasetManifest:
    root_path: str
    entries: list[ManifestEntry]

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")


@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus generator."""

    n_examples: int = 2000
    n_classes: int = 4
    length_l: int = 512
    n_leads: int = 4
    sample_rate_hz: float = 128.0
    noise_std: float = 0.05
    duplicate_text_fraction: float = 0.5
    phrases_per_class: int = 4
    seed: int = 7

    def __post_init__(self) -> None:
        if self.n_examples < 1:
            raise ValueError("n_examples must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.length_l < 1 or self.n_leads < 1:
            raise ValueError("length_l and n_leads must be >= 1")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.duplicate_text_fraction <= 1.0:
            raise ValueError("duplicate_text_fraction must be in [0, 1]")
        if self.phrases_per_class < 1:
            raise ValueError("phrases_per_class must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def default_lead_names(n_leads: int) -> list[str]:
    if n_leads <= len(_STANDARD_LEADS):
        return list(_STANDARD_LEADS[:n_leads])
    extra = [f"X{i}" for i in range(len(_STANDARD_LEADS), n_leads)]
    return list(_STANDARD_LEADS) + extra


def class_phrases(class_idx: int, phrases_per_class: int) -> list[str]:
    """The fixed phrase pool owned by one latent class (index 0 = canonical)."""
    if class_idx >= len(_CLASS_TERMS):
        raise ValueError(
            f"class index {class_idx} exceeds phrase pool capacity ({len(_CLASS_TERMS)} classes)")
    if phrases_per_class > len(_PHRASE_TEMPLATES):
        raise ValueError(
            f"phrases_per_class {phrases_per_class} exceeds template capacity "
            f"({len(_PHRASE_TEMPLATES)})")
    term = _CLASS_TERMS[class_idx]
    return [_PHRASE_TEMPLATES[i].format(term=term) for i in range(phrases_per_class)]


def class_names(n_classes: int) -> list[str]:
    if n_classes > len(_CLASS_TERMS):
        raise ValueError(
            f"n_classes {n_classes} exceeds phrase pool capacity ({len(_CLASS_TERMS)})")
    return list(_CLASS_TERMS[:n_classes])


def class_waveform(class_idx: int, length: int, n_leads: int,
                   sample_rate_hz: float) -> np.ndarray:
    """Deterministic per-class template: periodic sums of Gaussian bumps.

    Classes differ in beat rate, first-beat phase, and component scaling, so
    inter-class L2 distance is strictly positive on every lead.
    """
    t = np.arange(length, dtype=np.float64) / sample_rate_hz
    duration = length / sample_rate_hz
    beat_rate = 0.9 + 0.3 * class_idx                    # beats per second
    phase0 = 0.08 + 0.04 * (class_idx % 4)               # first beat center
    amp_mod = 1.0 + 0.08 * ((2 * class_idx) % 5)
    width_mod = 1.0 + 0.05 * (class_idx % 3)

    base = np.zeros(length, dtype=np.float64)
    n_beats = int(math.ceil(duration * beat_rate)) + 2
    for k in range(n_beats):
        center = phase0 + k / beat_rate
        for amp, offset, width in _BUMPS:
            w = width * width_mod
            base += (amp * amp_mod) * np.exp(-0.5 * ((t - center - offset) / w) ** 2)

    lead_scale = 0.5 + 0.5 * (np.arange(n_leads, dtype=np.float64) + 1.0) / n_leads
    return (base[:, None] * lead_scale[None, :]).astype(np.float32)


def generate_examples(config: SynthConfig) -> list[PairedExample]:
    """Generate the synthetic corpus in memory, fully determined by the seed."""
    phrases = [class_phrases(c, config.phrases_per_class) for c in range(config.n_classes)]
    n_dup = int(round(config.duplicate_text_fraction * config.n_examples))
    if n_dup < config.n_examples and config.phrases_per_class < 2:
        raise ValueError(
            "phrases_per_class must be >= 2 when duplicate_text_fraction < 1")

    templates = [
        class_waveform(c, config.length_l, config.n_leads, config.sample_rate_hz)
        for c in range(config.n_classes)
    ]
    lead_names = default_lead_names(config.n_leads)

    rng = np.random.default_rng(config.seed)
    dup_positions = set(rng.choice(config.n_examples, size=n_dup, replace=False).tolist())

    examples: list[PairedExample] = []
    for i in range(config.n_examples):
        cls = i % config.n_classes
        samples = templates[cls]
        if config.noise_std > 0:
            noise = rng.normal(0.0, config.noise_std, size=samples.shape)
            samples = (samples.astype(np.float64) + noise).astype(np.float32)
        if i in dup_positions:
            phrase = phrases[cls][0]
        else:
            phrase = phrases[cls][int(rng.integers(1, config.phrases_per_class))]
        examples.append(PairedExample(
            id=f"ex{i:05d}",
            ecg=EcgSignal(samples, config.sample_rate_hz, lead_names),
            report=TextReport.from_raw(phrase),
            latent_class=cls,
        ))
    return examples


def generate_synthetic_corpus(config: SynthConfig, root_path: str | Path) -> DatasetManifest:
    """Generate the corpus and persist it under ``root_path``."""
    return save_dataset(generate_examples(config), root_path)


def write_signal(path: str | Path, signal: EcgSignal) -> None:
    header = {
        "l": signal.n_samples,
        "c": signal.n_leads,
        "sample_rate_hz": signal.sample_rate_hz,
        "lead_names": signal.lead_names,
    }
    payload = np.ascontiguousarray(signal.samples, dtype="<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def read_signal(path: str | Path) -> EcgSignal:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing ecg payload: {path}")
    blob = path.read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ValueError(f"malformed header in {path}: no header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
        n_samples, n_leads = int(header["l"]), int(header["c"])
        sample_rate = float(header["sample_rate_hz"])
    except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise ValueError(f"malformed header in {path}: {exc}") from exc
    payload = blob[newline + 1:]
    expected = n_samples * n_leads * 4
    if len(payload) != expected:
        raise ValueError(
            f"length mismatch in {path}: header says {expected} payload bytes, "
            f"found {len(payload)}")
    samples = np.frombuffer(payload, dtype="<f4").reshape(n_samples, n_leads).copy()
    lead_names = header.get("lead_names") or [f"lead{i}" for i in range(n_leads)]
    return EcgSignal(samples, sample_rate, lead_names)


def save_dataset(examples: Sequence[PairedExample], root_path: str | Path,
                 manifest_name: str = "manifest.jsonl") -> DatasetManifest:
    """Write signals plus a manifest; returns the manifest that was written."""
    root = Path(root_path)
    (root / "signals").mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    for ex in examples:
        rel = f"signals/{ex.id}.ecg"
        write_signal(root / rel, ex.ecg)
        entries.append(ManifestEntry(
            id=ex.id, ecg_path=rel, text=ex.report.normalized,
            latent_class=ex.latent_class))
    manifest = DatasetManifest(root_path=str(root), entries=entries)
    with open(root / manifest_name, "w", encoding="utf-8") as fh:
        for entry in entries:
            record = {"id": entry.id, "ecg_path": entry.ecg_path,
                      "text": entry.text, "latent_class": entry.latent_class}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def read_manifest(manifest_path: str | Path) -> DatasetManifest:
    path = Path(manifest_path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                entries.append(ManifestEntry(
                    id=record["id"], ecg_path=record["ecg_path"],
                    text=record["text"], latent_class=record.get("latent_class")))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"malformed manifest line {line_no} in {path}: {exc}") from exc
    return DatasetManifest(root_path=str(path.parent), entries=entries)


def load_dataset(manifest_path: str | Path) -> list[PairedExample]:
    """Load every example referenced by a manifest; signals load bit-exactly."""
    manifest = read_manifest(manifest_path)
    root = Path(manifest.root_path)
    examples = []
    for entry in manifest.entries:
        signal = read_signal(root / entry.ecg_path)
        examples.append(PairedExample(
            id=entry.id, ecg=signal,
            report=TextReport.from_raw(entry.text),
            latent_class=entry.latent_class))
    return examples


@dataclass
class Vocabulary:
    """Word-level vocabulary with reserved PAD/UNK/MASK ids."""

    words: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.words = list(self.words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be unique")
        self._word_to_id = {w: i + len(RESERVED_TOKENS) for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        seen: set[str] = set()
        for text in texts:
            seen.update(text.split())
        return cls(words=sorted(seen))

    @property
    def size(self) -> int:
        return len(self.words) + len(RESERVED_TOKENS)

    def word_id(self, word: str) -> int:
        return self._word_to_id.get(word, UNK_ID)

    def id_word(self, token_id: int) -> str:
        if 0 <= token_id < len(RESERVED_TOKENS):
            return RESERVED_TOKENS[token_id]
        idx = token_id - len(RESERVED_TOKENS)
        if 0 <= idx < len(self.words):
            return self.words[idx]
        raise ValueError(f"token id {token_id} out of range")

    def to_json(self) -> str:
        return json.dumps({"words": self.words})

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        return cls(words=json.loads(payload)["words"])


@dataclass
class TokenSequence:
    """Fixed-length token ids plus the boolean attention mask (True = real token)."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape or self.ids.ndim != 1:
            raise ValueError("ids and mask must be 1-D arrays of equal length")


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Whitespace-split word ids, truncated/padded to ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    words = text.split()[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=bool)
    for i, word in enumerate(words):
        ids[i] = vocab.word_id(word)
        mask[i] = True
    return TokenSequence(ids=ids, mask=mask)


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    return [vocab.id_word(int(i)) for i in ids]
