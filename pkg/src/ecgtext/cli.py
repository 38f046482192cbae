"""Command-line pipeline: synth-data, build-index, pretrain, zero-shot, probe.

Every command is deterministic given its flags and --seed, and each run writes
a sidecar ``run_config.json`` whose ``config_hash`` is the stable digest of the
canonical flag serialization. Exit codes: 0 success, 1 runtime failure,
2 usage error (bad flags or missing input files).

Reference-scale values from the original training recipe are noted in the
flag help strings; the active defaults are desk-scale so everything runs on a
laptop CPU.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import corpus, evalsuite, n3s, trainer as trainer_mod
from .encoders import EcgEncoderConfig, TextEncoderConfig
from .fusion import FusionConfig
from .masking import MaskConfig
from .model import ModelConfig
from .objectives import LossWeights, MemDecoderConfig


class UsageError(Exception):
    """Bad flag values or missing input files; maps to exit code 2."""


def stable_digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def _require_file(path: str, what: str) -> Path:
    resolved = Path(path)
    if not resolved.exists():
        raise UsageError(f"{what} not found: {resolved}")
    return resolved


def _write_run_config(out_dir: Path, command: str, payload: dict) -> str:
    digest = stable_digest({"command": command, **payload})
    record = {"command": command, "config_hash": digest, **payload}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def cmd_synth_data(args: argparse.Namespace) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be >= 2")
    if args.holdout_n < 0:
        raise UsageError("--holdout-n must be >= 0")
    config = corpus.SynthConfig(
        n_examples=args.n + args.holdout_n,
        n_classes=args.classes,
        length_l=args.length,
        n_leads=args.leads,
        sample_rate_hz=args.sample_rate,
        noise_std=args.noise_std,
        duplicate_text_fraction=args.duplicate_fraction,
        phrases_per_class=args.phrases_per_class,
        seed=args.seed,
    )
    out = Path(args.out)
    examples = corpus.generate_examples(config)
    corpus.save_dataset(examples[:args.n], out, manifest_name="manifest.jsonl")
    if args.holdout_n:
        corpus.save_dataset(examples[args.n:], out, manifest_name="holdout.jsonl")

    names = corpus.class_names(args.classes)
    descriptions = [corpus.class_phrases(c, config.phrases_per_class)[0]
                    for c in range(args.classes)]
    evalsuite.save_prompts(
        evalsuite.ClassPromptSet(class_names=names, descriptions=descriptions),
        out / "prompts.tsv")

    digest = _write_run_config(out, "synth-data", asdict(config))
    print(f"wrote {args.n} examples (+{args.holdout_n} holdout) under {out} "
          f"[config {digest}]")
    return 0


def cmd_build_index(args: argparse.Namespace) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    manifest = corpus.read_manifest(manifest_path)
    index = n3s.build_index([(e.id, e.text) for e in manifest.entries])
    digest = stable_digest({"command": "build-index", "manifest": str(manifest_path),
                            "embedder_id": index.embedder_id})
    n3s.save_index(index, args.out, extra_header={"config_hash": digest})
    print(f"indexed {index.size} reports into {args.out} [config {digest}]")
    return 0


def _model_config_from_args(args: argparse.Namespace) -> ModelConfig:
    return ModelConfig(
        ecg=EcgEncoderConfig(
            conv_channels=args.conv_channels,
            conv_kernels=args.conv_kernels,
            conv_strides=args.conv_strides,
            embed_dim=args.embed_dim,
            n_layers=args.ecg_layers,
            n_heads=args.n_heads,
            ffn_dim=args.ffn_dim,
            pos_conv_kernel=args.pos_conv_kernel,
            pos_conv_groups=args.pos_conv_groups,
            in_channels=args.leads,
        ),
        text=TextEncoderConfig(
            embed_dim=args.embed_dim,
            n_layers=args.text_layers,
            n_heads=args.n_heads,
            ffn_dim=args.ffn_dim,
            max_len=args.max_len,
        ),
        fusion=FusionConfig(
            embed_dim=args.embed_dim,
            n_heads=args.n_heads,
            n_blocks=args.fusion_blocks,
        ),
        mem=MemDecoderConfig(
            decoder_dim=args.decoder_dim,
            n_layers=args.decoder_layers,
            n_heads=args.decoder_heads,
        ),
        proj_dim=args.proj_dim,
        ets_normalize=args.ets_normalize,
    )


def _trainer_config_from_args(args: argparse.Namespace) -> trainer_mod.TrainerConfig:
    ratios = (args.warmup_ratio, args.hold_ratio, args.decay_ratio)
    return trainer_mod.TrainerConfig(
        batch_size=args.batch_size,
        seed=args.seed,
        optimizer=trainer_mod.OptimizerConfig(
            peak_lr=args.peak_lr, beta1=args.beta1, beta2=args.beta2,
            eps=args.eps, weight_decay=args.weight_decay),
        schedule=trainer_mod.ScheduleConfig(
            total_steps=args.steps, ratios=ratios,
            init_lr_scale=args.init_lr_scale, final_lr_scale=args.final_lr_scale),
        mask=MaskConfig(
            lead_mask_prob=args.lead_mask_prob,
            input_dropout_prob=args.input_dropout,
            mlm_mask_ratio=args.mlm_ratio,
            seed=args.seed),
        n3s=n3s.N3SConfig(k=args.n3s_k, negative_fraction=args.negative_fraction,
                          seed=args.seed),
        use_n3s=not args.no_n3s,
        weights=LossWeights(mlm=args.w_mlm, mem=args.w_mem,
                            etm=args.w_etm, ets=args.w_ets),
        mlm_reduction=args.mlm_reduction,
        mem_reduction=args.mem_reduction,
        mem_masked_only=args.mem_masked_only,
    )


def cmd_pretrain(args: argparse.Namespace) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    if args.resume is not None:
        _require_file(args.resume, "resume checkpoint")
    examples = corpus.load_dataset(manifest_path)
    if not examples:
        raise UsageError(f"manifest {manifest_path} is empty")
    leads = examples[0].ecg.n_leads
    if args.leads != leads:
        args.leads = leads   # model input width must match the data
    model_config = _model_config_from_args(args)
    trainer_config = _trainer_config_from_args(args)

    out = Path(args.out_dir)
    digest = _write_run_config(out, "pretrain", {
        "manifest": str(manifest_path),
        "model": asdict(model_config),
        "trainer": asdict(trainer_config),
    })
    run_trainer, checkpoint_path, log_path = trainer_mod.pretrain(
        examples, model_config, trainer_config, out, resume_from=args.resume,
        stop_after=args.stop_after)
    final = run_trainer.loss_history[-1] if run_trainer.loss_history else None
    summary = f"total {final.total:.4f}" if final else "no steps run"
    print(f"pretrained {run_trainer.step} steps -> {checkpoint_path} "
          f"({summary}) [config {digest}]")
    return 0


def cmd_zero_shot(args: argparse.Namespace) -> int:
    checkpoint_path = _require_file(args.checkpoint, "checkpoint")
    manifest_path = _require_file(args.manifest, "manifest")
    prompts_path = _require_file(args.prompts, "prompts file")
    model, vocab, digest = trainer_mod.load_model_for_eval(checkpoint_path)
    examples = corpus.load_dataset(manifest_path)
    prompts = evalsuite.load_prompts(prompts_path)
    matrix = evalsuite.zero_shot_scores(model, examples, prompts, vocab)
    record = evalsuite.write_metrics(args.out, "zero_shot", matrix, digest,
                                     extra={"classes": prompts.class_names})
    print(f"zero-shot macro AUC {record['auc_macro']:.4f} "
          f"({record['n_examples']} examples) -> {args.out}")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    checkpoint_path = _require_file(args.checkpoint, "checkpoint")
    train_path = _require_file(args.train_manifest, "train manifest")
    test_path = _require_file(args.test_manifest, "test manifest")
    for fraction in args.fraction:
        if not 0 < fraction <= 1:
            raise UsageError(f"--fraction values must be in (0, 1], got {fraction}")
    model, _, digest = trainer_mod.load_model_for_eval(checkpoint_path)
    train_examples = corpus.load_dataset(train_path)
    test_examples = corpus.load_dataset(test_path)
    classes = [ex.latent_class for ex in train_examples + test_examples]
    if any(c is None for c in classes):
        raise ValueError("linear probing requires latent class labels")
    n_classes = max(classes) + 1

    train_features = evalsuite.extract_features(model, train_examples)
    test_features = evalsuite.extract_features(model, test_examples)
    train_labels = evalsuite.one_hot_labels(train_examples, n_classes)
    test_labels = evalsuite.one_hot_labels(test_examples, n_classes)

    records = []
    for fraction in args.fraction:
        macro, per_class = evalsuite.linear_probe(
            train_features, train_labels, test_features, test_labels,
            train_fraction=fraction, seed=args.seed)
        records.append({
            "task": "linear_probe",
            "fraction": fraction,
            "auc_macro": macro,
            "per_class_auc": [None if np.isnan(v) else float(v) for v in per_class],
            "n_examples": len(test_examples),
            "config_hash": digest,
        })
        print(f"probe fraction {fraction:g}: macro AUC {macro:.4f}")
    Path(args.out).write_text(json.dumps(records, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
    return 0


def _apply_config_overrides(subparser: argparse.ArgumentParser,
                            args: argparse.Namespace) -> None:
    """--config JSON supplies values for flags left at their defaults."""
    if getattr(args, "config", None) is None:
        return
    path = _require_file(args.config, "config file")
    overrides = json.loads(path.read_text(encoding="utf-8"))
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r}")
        if getattr(args, dest) == subparser.get_default(dest):
            if isinstance(value, list):
                value = tuple(value)
            setattr(args, dest, value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecgtext",
        description="Contrastive masked ECG-text pretraining and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth-data", help="generate a synthetic ECG-text corpus")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--n", type=int, default=2000, help="number of training examples")
    synth.add_argument("--classes", type=int, default=4, help="number of latent classes (>= 2)")
    synth.add_argument("--length", type=int, default=512, help="samples per recording")
    synth.add_argument("--leads", type=int, default=4, help="leads per recording")
    synth.add_argument("--sample-rate", type=float, default=128.0, help="Hz")
    synth.add_argument("--noise-std", type=float, default=0.05, help="noise std in mV")
    synth.add_argument("--duplicate-fraction", type=float, default=0.5,
                       help="share of examples reusing their class's canonical phrase")
    synth.add_argument("--phrases-per-class", type=int, default=4)
    synth.add_argument("--holdout-n", type=int, default=0,
                       help="extra examples written to holdout.jsonl")
    synth.add_argument("--seed", type=int, default=7)
    synth.set_defaults(func=cmd_synth_data)

    index = sub.add_parser("build-index", help="build the report embedding index")
    index.add_argument("--manifest", required=True)
    index.add_argument("--out", required=True, help="index file to write")
    index.set_defaults(func=cmd_build_index)

    pre = sub.add_parser("pretrain", help="run pretraining on a corpus manifest")
    pre.add_argument("--manifest", required=True)
    pre.add_argument("--out-dir", required=True)
    pre.add_argument("--config", default=None,
                     help="JSON file overriding flags left at their defaults")
    pre.add_argument("--steps", type=int, default=3000,
                     help="total steps (reference scale: 300000)")
    pre.add_argument("--batch-size", type=int, default=16,
                     help="batch size (reference scale: 128)")
    pre.add_argument("--peak-lr", type=float, default=5e-5)
    pre.add_argument("--beta1", type=float, default=0.9)
    pre.add_argument("--beta2", type=float, default=0.98)
    pre.add_argument("--eps", type=float, default=1e-6)
    pre.add_argument("--weight-decay", type=float, default=0.01)
    pre.add_argument("--warmup-ratio", type=float, default=0.1)
    pre.add_argument("--hold-ratio", type=float, default=0.4)
    pre.add_argument("--decay-ratio", type=float, default=0.5)
    pre.add_argument("--init-lr-scale", type=float, default=0.01)
    pre.add_argument("--final-lr-scale", type=float, default=0.05)
    pre.add_argument("--lead-mask-prob", type=float, default=0.5)
    pre.add_argument("--input-dropout", type=float, default=0.1)
    pre.add_argument("--mlm-ratio", type=float, default=0.15)
    pre.add_argument("--w-mlm", type=float, default=1.0)
    pre.add_argument("--w-mem", type=float, default=1.0)
    pre.add_argument("--w-etm", type=float, default=1.0)
    pre.add_argument("--w-ets", type=float, default=1.0)
    pre.add_argument("--n3s-k", type=int, default=64)
    pre.add_argument("--negative-fraction", type=float, default=0.5)
    pre.add_argument("--no-n3s", action="store_true",
                     help="replace N3S with uniform random negative sampling")
    pre.add_argument("--embed-dim", type=int, default=64,
                     help="encoder width (reference scale: 768)")
    pre.add_argument("--ecg-layers", type=int, default=2,
                     help="ECG transformer layers (reference scale: 8)")
    pre.add_argument("--text-layers", type=int, default=2)
    pre.add_argument("--fusion-blocks", type=int, default=1)
    pre.add_argument("--n-heads", type=int, default=4,
                     help="attention heads (reference scale: 12)")
    pre.add_argument("--ffn-dim", type=int, default=256,
                     help="feed-forward width (reference scale: 3072)")
    pre.add_argument("--conv-channels", type=_int_tuple, default=(32, 64))
    pre.add_argument("--conv-kernels", type=_int_tuple, default=(7, 3))
    pre.add_argument("--conv-strides", type=_int_tuple, default=(4, 2))
    pre.add_argument("--pos-conv-kernel", type=int, default=15,
                     help="positional conv kernel (reference scale: 31)")
    pre.add_argument("--pos-conv-groups", type=int, default=4,
                     help="positional conv groups (reference scale: 16)")
    pre.add_argument("--decoder-dim", type=int, default=32,
                     help="reconstruction decoder width (reference scale: 384)")
    pre.add_argument("--decoder-layers", type=int, default=1)
    pre.add_argument("--decoder-heads", type=int, default=4)
    pre.add_argument("--max-len", type=int, default=32, help="token sequence length")
    pre.add_argument("--proj-dim", type=int, default=768,
                     help="contrastive projection width")
    pre.add_argument("--ets-normalize", action="store_true",
                     help="unit-normalize embeddings with learnable temperature/bias")
    pre.add_argument("--mlm-reduction", choices=("sequence_sum", "token_mean"),
                     default="sequence_sum")
    pre.add_argument("--mem-reduction", choices=("sample_sum", "element_mean"),
                     default="sample_sum")
    pre.add_argument("--mem-masked-only", action="store_true",
                     help="restrict reconstruction error to corrupted positions")
    pre.add_argument("--leads", type=int, default=4,
                     help="expected input leads (overridden by the manifest)")
    pre.add_argument("--resume", default=None, help="checkpoint to resume from")
    pre.add_argument("--stop-after", type=int, default=None,
                     help="interrupt after this many steps without changing the schedule")
    pre.add_argument("--seed", type=int, default=0)
    pre.set_defaults(func=cmd_pretrain, subparser=pre)

    zs = sub.add_parser("zero-shot", help="zero-shot classification metrics")
    zs.add_argument("--checkpoint", required=True)
    zs.add_argument("--manifest", required=True, help="evaluation manifest")
    zs.add_argument("--prompts", required=True, help="class_name<TAB>description file")
    zs.add_argument("--out", required=True, help="metrics JSON to write")
    zs.set_defaults(func=cmd_zero_shot)

    probe = sub.add_parser("probe", help="linear probing metrics")
    probe.add_argument("--checkpoint", required=True)
    probe.add_argument("--train-manifest", required=True)
    probe.add_argument("--test-manifest", required=True)
    probe.add_argument("--fraction", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    probe.add_argument("--out", required=True, help="metrics JSON to write")
    probe.add_argument("--seed", type=int, default=0)
    probe.set_defaults(func=cmd_probe)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "pretrain":
            _apply_config_overrides(args.subparser, args)
        torch.manual_seed(getattr(args, "seed", 0))
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
