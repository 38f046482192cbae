"""Pretraining loop: tri-stage schedule, Adam with decoupled decay, checkpoints.

Determinism contract: every batch is assembled from a fresh numpy stream
derived from (seed, step), so a run is a pure function of its configuration
and resuming from a checkpoint reproduces the uninterrupted trace exactly.

Checkpoint layout: one line of JSON (version, config_hash, step,
payload_bytes), a torch-serialized payload, then the hex sha256 of everything
before it.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import PairedExample, Vocabulary, tokenize
from .encoders import EcgEncoderConfig, TextEncoderConfig
from .fusion import FusionConfig
from .masking import MaskConfig, input_dropout_mask, mlm_mask, random_lead_mask
from .model import ModelConfig, PretrainModel
from .n3s import (EmbeddingIndex, N3SConfig, build_index, sample_negatives,
                  sample_random_negatives)
from .objectives import (LossBreakdown, LossWeights, MemDecoderConfig,
                         PairLabels, ets_loss, etm_loss, mem_loss, mlm_loss,
                         total_loss)

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a loss component or parameter goes non-finite."""


@dataclass
class OptimizerConfig:
    peak_lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ValueError("peak_lr and weight_decay must be >= 0")


@dataclass
class ScheduleConfig:
    total_steps: int = 3000          # full-scale reference: 300000
    ratios: tuple[float, float, float] = (0.1, 0.4, 0.5)
    init_lr_scale: float = 0.01
    final_lr_scale: float = 0.05

    def __post_init__(self) -> None:
        self.ratios = tuple(self.ratios)
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be three positive numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError("ratios must sum to 1")
        if self.init_lr_scale <= 0 or self.final_lr_scale <= 0:
            raise ValueError("lr scales must be positive")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.ratios[0] * self.total_steps))

    @property
    def hold_steps(self) -> int:
        return int(round(self.ratios[1] * self.total_steps))

    @property
    def decay_steps(self) -> int:
        return self.total_steps - self.warmup_steps - self.hold_steps


def tri_stage_lr(step: int, config: ScheduleConfig, peak_lr: float) -> float:
    """Warmup linearly, hold at peak, decay exponentially to final_lr_scale*peak."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    warmup, hold = config.warmup_steps, config.hold_steps
    if step < warmup:
        frac = step / warmup
        return peak_lr * (config.init_lr_scale + (1.0 - config.init_lr_scale) * frac)
    if step <= warmup + hold:
        return peak_lr
    frac = (step - warmup - hold) / config.decay_steps
    return peak_lr * math.exp(frac * math.log(config.final_lr_scale))


@dataclass
class TrainerConfig:
    batch_size: int = 16             # full-scale reference: 128
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    n3s: N3SConfig = field(default_factory=N3SConfig)
    use_n3s: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    mlm_reduction: str = "sequence_sum"
    mem_reduction: str = "sample_sum"
    mem_masked_only: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class TrainingBatch:
    """One step's tensors: corrupted inputs, clean targets, labels, masks."""

    ecg: torch.Tensor            # corrupted (B, L, C)
    ecg_target: torch.Tensor     # original (B, L, C)
    token_ids: torch.Tensor      # masked ids (B, M)
    token_targets: torch.Tensor  # pre-mask ids (B, M)
    token_mask: torch.Tensor     # attention mask (B, M)
    mlm_positions: torch.Tensor  # masked-position selector (B, M)
    lead_mask: torch.Tensor      # (B, C)
    element_mask: torch.Tensor   # (B, L, C)
    labels: PairLabels
    example_ids: tuple[str, ...]


def split_decay_params(model: nn.Module) -> tuple[list[str], list[str]]:
    """Partition parameter names into (decayed, not decayed).

    Excluded from decay: every bias, all norm parameters, the modality
    embeddings, the reconstruction mask token, and the contrastive
    temperature.
    """
    norm_params: set[str] = set()
    for module_name, module in model.named_modules():
        if isinstance(module, (nn.LayerNorm, nn.GroupNorm)):
            for pname, _ in module.named_parameters(recurse=False):
                norm_params.add(f"{module_name}.{pname}" if module_name else pname)
    no_decay_leaves = {"ecg_modality", "text_modality", "mask_token", "ets_log_scale"}
    decay, no_decay = [], []
    for name, _ in model.named_parameters():
        leaf = name.split(".")[-1]
        if name in norm_params or leaf.endswith("bias") or leaf in no_decay_leaves:
            no_decay.append(name)
        else:
            decay.append(name)
    return decay, no_decay


def config_hash(model_config: ModelConfig, trainer_config: TrainerConfig,
                vocab: Vocabulary) -> str:
    canonical = json.dumps({
        "model": asdict(model_config),
        "trainer": asdict(trainer_config),
        "vocab_sha": hashlib.sha256("\n".join(vocab.words).encode("utf-8")).hexdigest(),
    }, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class Trainer:
    """Owns the model parameters and executes deterministic training steps."""

    def __init__(self, model: PretrainModel, examples: Sequence[PairedExample],
                 vocab: Vocabulary, config: TrainerConfig,
                 index: EmbeddingIndex | None = None):
        if config.use_n3s and index is None:
            raise ValueError("N3S sampling requires an embedding index")
        if not examples:
            raise ValueError("no training examples")
        self.model = model
        self.examples = list(examples)
        self.vocab = vocab
        self.config = config
        self.index = index
        self.max_len = model.config.text.max_len
        self.step = 0
        self.loss_history: list[LossBreakdown] = []
        self.config_hash = config_hash(model.config, config, vocab)

        decay, no_decay = split_decay_params(model)
        named = dict(model.named_parameters())
        opt = config.optimizer
        self.optimizer = torch.optim.AdamW(
            [
                {"params": [named[n] for n in decay], "weight_decay": opt.weight_decay},
                {"params": [named[n] for n in no_decay], "weight_decay": 0.0},
            ],
            lr=opt.peak_lr, betas=(opt.beta1, opt.beta2), eps=opt.eps)

    def make_batch(self, step: int) -> TrainingBatch:
        """Assemble the batch for a given step index (pure in (seed, step))."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, step])
        n = len(self.examples)
        idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        picked = [self.examples[int(i)] for i in idx]

        if cfg.use_n3s:
            batch, labels = sample_negatives(self.index, picked, cfg.n3s, rng)
        else:
            batch, labels = sample_random_negatives(
                picked, self.examples, cfg.n3s.negative_fraction, rng)

        ecg_in, ecg_tgt, lead_masks, element_masks = [], [], [], []
        token_ids, token_tgt, token_msk, mlm_pos = [], [], [], []
        for ex in batch:
            samples = ex.ecg.samples
            masked, lead = random_lead_mask(samples, cfg.mask.lead_mask_prob, rng)
            dropped, element = input_dropout_mask(
                masked, cfg.mask.input_dropout_prob, rng, training=True)
            ecg_in.append(dropped)
            ecg_tgt.append(samples)
            lead_masks.append(lead)
            element_masks.append(element)

            tokens = tokenize(ex.report.normalized, self.vocab, self.max_len)
            if cfg.mask.mlm_mask_ratio > 0:
                masked_tokens, positions = mlm_mask(tokens, cfg.mask.mlm_mask_ratio, rng)
            else:
                masked_tokens, positions = tokens, np.empty(0, dtype=np.int64)
            selector = np.zeros(self.max_len, dtype=bool)
            selector[positions] = True
            token_ids.append(masked_tokens.ids)
            token_tgt.append(tokens.ids)
            token_msk.append(tokens.mask)
            mlm_pos.append(selector)

        return TrainingBatch(
            ecg=torch.from_numpy(np.stack(ecg_in)).float(),
            ecg_target=torch.from_numpy(np.stack(ecg_tgt)).float(),
            token_ids=torch.from_numpy(np.stack(token_ids)),
            token_targets=torch.from_numpy(np.stack(token_tgt)),
            token_mask=torch.from_numpy(np.stack(token_msk)),
            mlm_positions=torch.from_numpy(np.stack(mlm_pos)),
            lead_mask=torch.from_numpy(np.stack(lead_masks)),
            element_mask=torch.from_numpy(np.stack(element_masks)),
            labels=labels,
            example_ids=tuple(ex.id for ex in batch),
        )

    def compute_losses(self, batch: TrainingBatch) -> dict[str, torch.Tensor]:
        """Forward pass plus all four objectives (used by steps and grad checks)."""
        cfg = self.config
        out = self.model(batch.ecg, batch.token_ids, batch.token_mask)
        if bool(batch.mlm_positions.any()):
            loss_mlm = mlm_loss(out.mlm_logits, batch.token_targets,
                                batch.mlm_positions, reduction=cfg.mlm_reduction)
        else:
            loss_mlm = batch.ecg.new_zeros(())
        corruption = None
        if cfg.mem_masked_only:
            corruption = batch.element_mask | batch.lead_mask[:, None, :]
        loss_mem = mem_loss(out.x_hat, batch.ecg_target, element_mask=corruption,
                            reduction=cfg.mem_reduction)
        y_match = torch.from_numpy(np.asarray(batch.labels.y_match)).to(batch.ecg.device)
        y_pair = torch.from_numpy(np.asarray(batch.labels.y_pair)).to(batch.ecg.device)
        loss_etm = etm_loss(out.etm_logits, y_match)
        scale, bias = self.model.ets_logit_params()
        loss_ets = ets_loss(out.x_proj, out.t_proj, y_pair, scale=scale, bias=bias,
                            normalize=self.model.config.ets_normalize)
        loss_total = total_loss(loss_mlm, loss_mem, loss_etm, loss_ets, cfg.weights)
        etm_acc = ((out.etm_logits > 0) == y_match).float().mean()
        return {"mlm": loss_mlm, "mem": loss_mem, "etm": loss_etm,
                "ets": loss_ets, "total": loss_total, "etm_acc": etm_acc}

    def train_step(self) -> tuple[LossBreakdown, dict[str, float]]:
        cfg = self.config
        lr = tri_stage_lr(self.step, cfg.schedule, cfg.optimizer.peak_lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        batch = self.make_batch(self.step)
        losses = self.compute_losses(batch)
        for name in ("mlm", "mem", "etm", "ets"):
            if not torch.isfinite(losses[name]):
                raise TrainingDivergedError(
                    f"non-finite {name} loss at step {self.step}")

        self.optimizer.zero_grad(set_to_none=True)
        losses["total"].backward()
        self.optimizer.step()
        for name, param in self.model.named_parameters():
            if not torch.isfinite(param).all():
                raise TrainingDivergedError(
                    f"non-finite parameter {name} after step {self.step}")

        breakdown = LossBreakdown.from_parts(
            losses["mlm"].detach().item(), losses["mem"].detach().item(),
            losses["etm"].detach().item(), losses["ets"].detach().item(), cfg.weights)
        metrics = {"lr": lr, "etm_acc": losses["etm_acc"].detach().item()}
        self.step += 1
        self.loss_history.append(breakdown)
        return breakdown, metrics


@dataclass
class Checkpoint:
    version: int
    config_hash: str
    step: int
    model_state: dict
    optimizer_state: dict
    model_config: dict
    trainer_config: dict
    vocab: Vocabulary
    loss_history: list[dict]


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    payload = {
        "model_state": trainer.model.state_dict(),
        "optimizer_state": trainer.optimizer.state_dict(),
        "model_config": asdict(trainer.model.config),
        "trainer_config": asdict(trainer.config),
        "vocab_words": trainer.vocab.words,
        "loss_history": [asdict(b) for b in trainer.loss_history],
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    body = buffer.getvalue()
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "config_hash": trainer.config_hash,
        "step": trainer.step,
        "payload_bytes": len(body),
    }, sort_keys=True).encode("utf-8")
    checksum = hashlib.sha256(header + b"\n" + body).hexdigest().encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\n")
        fh.write(body)
        fh.write(checksum)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ValueError(f"corrupt checkpoint {path}: no header")
    header = json.loads(blob[:newline].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version mismatch: file has {header.get('version')}, "
            f"expected {CHECKPOINT_VERSION}")
    body_end = newline + 1 + int(header["payload_bytes"])
    body = blob[newline + 1:body_end]
    stored_sum = blob[body_end:].decode("ascii", errors="replace").strip()
    actual_sum = hashlib.sha256(blob[:newline] + b"\n" + body).hexdigest()
    if stored_sum != actual_sum:
        raise ValueError(f"corrupt checkpoint {path}: checksum mismatch")
    payload = torch.load(io.BytesIO(body), weights_only=False)
    return Checkpoint(
        version=header["version"],
        config_hash=header["config_hash"],
        step=header["step"],
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        model_config=payload["model_config"],
        trainer_config=payload["trainer_config"],
        vocab=Vocabulary(words=payload["vocab_words"]),
        loss_history=payload["loss_history"],
    )


def restore_trainer(trainer: Trainer, checkpoint: Checkpoint) -> None:
    """Load checkpoint state into a trainer built with the same configuration."""
    if checkpoint.config_hash != trainer.config_hash:
        raise ValueError(
            f"config hash mismatch: checkpoint {checkpoint.config_hash}, "
            f"trainer {trainer.config_hash}")
    trainer.model.load_state_dict(checkpoint.model_state)
    trainer.optimizer.load_state_dict(checkpoint.optimizer_state)
    trainer.step = checkpoint.step
    trainer.loss_history = [LossBreakdown(**b) for b in checkpoint.loss_history]


def model_config_from_dict(payload: dict) -> ModelConfig:
    return ModelConfig(
        ecg=EcgEncoderConfig(**payload["ecg"]),
        text=TextEncoderConfig(**payload["text"]),
        fusion=FusionConfig(**payload["fusion"]),
        mem=MemDecoderConfig(**payload["mem"]),
        proj_dim=payload["proj_dim"],
        ets_normalize=payload["ets_normalize"],
    )


def trainer_config_from_dict(payload: dict) -> TrainerConfig:
    return TrainerConfig(
        batch_size=payload["batch_size"],
        seed=payload["seed"],
        optimizer=OptimizerConfig(**payload["optimizer"]),
        schedule=ScheduleConfig(**payload["schedule"]),
        mask=MaskConfig(**payload["mask"]),
        n3s=N3SConfig(**payload["n3s"]),
        use_n3s=payload["use_n3s"],
        weights=LossWeights(**payload["weights"]),
        mlm_reduction=payload["mlm_reduction"],
        mem_reduction=payload["mem_reduction"],
        mem_masked_only=payload["mem_masked_only"],
    )


def load_model_for_eval(path: str | Path) -> tuple[PretrainModel, Vocabulary, str]:
    """Rebuild the trained model from a checkpoint; returns (model, vocab, hash)."""
    checkpoint = load_checkpoint(path)
    config = model_config_from_dict(checkpoint.model_config)
    model = PretrainModel(config)
    model.load_state_dict(checkpoint.model_state)
    model.eval()
    return model, checkpoint.vocab, checkpoint.config_hash


def pretrain(examples: Sequence[PairedExample], model_config: ModelConfig,
             trainer_config: TrainerConfig, out_dir: str | Path,
             log_name: str = "train_log.jsonl",
             checkpoint_name: str = "checkpoint.ckpt",
             resume_from: str | Path | None = None,
             stop_after: int | None = None) -> tuple[Trainer, Path, Path]:
    """Run the full pretraining pipeline and write the log plus checkpoint.

    The text encoder's vocabulary is always rebuilt from the training corpus,
    and the vocab size recorded in the model configuration before the model is
    instantiated. ``stop_after`` interrupts the run at an earlier step without
    changing the schedule (so it can be resumed under the same config hash).
    Returns (trainer, checkpoint_path, log_path).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.build(ex.report.normalized for ex in examples)
    model_config = replace(
        model_config, text=replace(model_config.text, vocab_size=vocab.size))

    torch.manual_seed(trainer_config.seed)
    model = PretrainModel(model_config)

    index = None
    if trainer_config.use_n3s:
        index = build_index([(ex.id, ex.report.normalized) for ex in examples],
                            embedder_id=trainer_config.n3s.embedder_id)

    trainer = Trainer(model, examples, vocab, trainer_config, index=index)
    if resume_from is not None:
        restore_trainer(trainer, load_checkpoint(resume_from))

    target_step = trainer_config.schedule.total_steps
    if stop_after is not None:
        target_step = min(target_step, stop_after)
    log_path = out / log_name
    checkpoint_path = out / checkpoint_name
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(json.dumps({"config_hash": trainer.config_hash}, sort_keys=True) + "\n")
        while trainer.step < target_step:
            breakdown, metrics = trainer.train_step()
            record = {
                "step": trainer.step,
                "lr": metrics["lr"],
                "mlm": breakdown.mlm,
                "mem": breakdown.mem,
                "etm": breakdown.etm,
                "ets": breakdown.ets,
                "total": breakdown.total,
                "etm_acc": metrics["etm_acc"],
            }
            log.write(json.dumps(record, sort_keys=True) + "\n")
    save_checkpoint(trainer, checkpoint_path)
    return trainer, checkpoint_path, log_path
