"""Command-line entry point wiring the modules into reproducible runs.

Subcommands: build-data, train, eval, score, analyze, grad-check. Every run
writes its resolved configuration into the output directory. Options may
come from a JSON config file (--config); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import pipeline
from .core import VoicespanError
from .data import (
    CorpusConfig,
    Manifest,
    ManifestParseError,
    build_synthetic,
    format_stats_table,
    load_manifest,
    save_manifest,
    split,
    stats,
)
from .model import FusionTagger, ModelConfig, Vocab
from .scoring import bucket_report, format_report, pct, report_to_kv
from .template import ParseMode, align_to_source, parse_tagged
from .train import (
    TrainConfig,
    grad_check,
    load_base_weights,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics_log,
)

OUT_ROOT_ENV = "VOICESPAN_OUT_ROOT"


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _resolve(args: argparse.Namespace, file_cfg: dict, key: str, default):
    """Precedence: explicit flag > config file > built-in default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in file_cfg:
        return file_cfg[key]
    return default


def _write_run_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def cmd_build_data(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    resolved = {
        "size": int(_resolve(args, file_cfg, "size", 2700)),
        "ambiguous_fraction": float(_resolve(args, file_cfg, "ambiguous", 0.5)),
        "seed": int(_resolve(args, file_cfg, "seed", 0)),
        "ratios": _resolve(args, file_cfg, "ratios", [0.74, 0.074, 0.186]),
        "max_shift": float(_resolve(args, file_cfg, "max_shift", 0.3)),
        "max_interjection": int(_resolve(args, file_cfg, "max_interjection", 2)),
    }
    out_dir = Path(args.out or (_out_root() / "data"))
    _write_run_config(out_dir, resolved)
    corpus_cfg = CorpusConfig(
        size=resolved["size"],
        ambiguous_fraction=resolved["ambiguous_fraction"],
        seed=resolved["seed"],
        max_shift=resolved["max_shift"],
        max_interjection=resolved["max_interjection"],
    )
    manifest = build_synthetic(corpus_cfg, out_dir)
    parts = split(manifest, tuple(resolved["ratios"]), seed=resolved["seed"])
    table = []
    for name, part in zip(("train", "dev", "test"), parts):
        save_manifest(part, out_dir / f"{name}.tsv")
        table.append((name, stats(part, base_dir=out_dir)))
    table.append(("all", stats(manifest, base_dir=out_dir)))
    print(format_stats_table(table))
    return 0


def _build_model(vocab: Vocab, text_only: bool, seed: int) -> FusionTagger:
    torch.manual_seed(seed)
    cfg = ModelConfig(use_speech=not text_only)
    return FusionTagger(cfg, vocab)


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = _load_config_file(args.config)
    resolved = {
        "data": _resolve(args, file_cfg, "data", None),
        "text_only": bool(args.text_only or file_cfg.get("text_only", False)),
        "init_from": _resolve(args, file_cfg, "init_from", None),
        "epochs": int(_resolve(args, file_cfg, "epochs", TrainConfig.epochs)),
        "learning_rate": float(_resolve(args, file_cfg, "lr", TrainConfig.learning_rate)),
        "batch_size": int(_resolve(args, file_cfg, "batch_size", TrainConfig.batch_size)),
        "seed": int(_resolve(args, file_cfg, "seed", 0)),
    }
    if resolved["data"] is None:
        raise VoicespanError("train requires --data (or 'data' in --config)")
    data_dir = Path(resolved["data"])
    out_dir = Path(args.out or (_out_root() / "train"))
    _write_run_config(out_dir, resolved)

    train_manifest = load_manifest(data_dir / "train.tsv")
    dev_manifest = load_manifest(data_dir / "dev.tsv")
    text_only = resolved["text_only"]

    if resolved["init_from"]:
        base_model, _ = load_checkpoint(resolved["init_from"])
        vocab = base_model.vocab
        torch.manual_seed(resolved["seed"])
        model = FusionTagger(
            replace(base_model.cfg, use_speech=not text_only), vocab
        )
        load_base_weights(model, resolved["init_from"])
    else:
        vocab = Vocab.from_corpus([ex.tokens for ex in train_manifest.rows])
        model = _build_model(vocab, text_only, resolved["seed"])

    train_cfg = TrainConfig(
        epochs=resolved["epochs"],
        learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"],
        seed=resolved["seed"],
    )
    result = train(
        model,
        train_manifest,
        dev_manifest,
        base_dir=data_dir,
        cfg=train_cfg,
        train_base=text_only,
    )
    model.load_state_dict(result.best_state)
    counts = model.count_parameters()
    meta = {
        "stage": "text-only" if text_only else "multimodal",
        "best_epoch": result.best_epoch,
        "best_dev_f1": round(result.best_f1, 6),
    }
    save_checkpoint(model, out_dir / "model.ckpt", meta=meta)
    write_metrics_log(result.metrics, out_dir / "metrics.tsv")
    print(
        f"best dev F1 {pct(result.best_f1)} at epoch {result.best_epoch}; "
        f"params total {counts['total']} trainable {counts['trainable']} "
        f"({100 * counts['trainable'] / counts['total']:.1f}%)"
    )
    print(f"checkpoint: {out_dir / 'model.ckpt'}")
    return 0


def _eval_outcome_text(outcome: pipeline.EvalOutcome) -> str:
    parts = [format_report(outcome.report)]
    for label, rep in outcome.subset_reports.items():
        parts.append(f"\n[{label} subset]")
        parts.append(format_report(rep))
    parts.append(
        f"\nparse_failures {outcome.parse_failures}\n"
        f"spans_dropped {outcome.spans_dropped}"
    )
    return "\n".join(parts)


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = Path(args.out or (_out_root() / "eval"))
    _write_run_config(
        out_dir, {"checkpoint": args.ckpt, "manifest": args.manifest}
    )
    model, _ = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    feats = (
        pipeline.encoder_features(model, manifest, Path(args.manifest).parent)
        if model.cfg.use_speech
        else None
    )
    model.eval()
    outcome = pipeline.evaluate(model, manifest, feats, with_subsets=True)
    text = _eval_outcome_text(outcome)
    (out_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    kv = report_to_kv(outcome.report) + (
        f"\nparse_failures {outcome.parse_failures}"
        f"\nspans_dropped {outcome.spans_dropped}\n"
    )
    (out_dir / "report.kv").write_text(kv, encoding="utf-8")
    (out_dir / "predictions.txt").write_text(
        "".join(f"{p.example_id}\t{p.tagged}\n" for p in outcome.predictions),
        encoding="utf-8",
    )
    print(text)
    return 0


def _load_predictions(path: Path, gold: Manifest) -> list[set]:
    by_id = {}
    for line_no, line in enumerate(
        path.read_text(encoding="utf-8").splitlines(), 1
    ):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ManifestParseError("expected 'id<TAB>tagged text'", line_no)
        ex_id, _, tagged = line.partition("\t")
        if ex_id in by_id:
            raise ManifestParseError(f"duplicate prediction for {ex_id}", line_no)
        by_id[ex_id] = tagged
    known = {ex.id for ex in gold.rows}
    unknown = sorted(set(by_id) - known)
    if unknown:
        raise ManifestParseError(f"prediction for unknown id {unknown[0]}", 0)
    preds = []
    for ex in gold.rows:
        tagged = by_id.get(ex.id, "")
        decoded, spans = parse_tagged(tagged, ParseMode.LENIENT)
        preds.append(align_to_source(ex.tokens, decoded, spans, ParseMode.LENIENT))
    return preds


def cmd_score(args: argparse.Namespace) -> int:
    gold = load_manifest(args.gold, check_audio=False)
    preds = _load_predictions(Path(args.pred), gold)
    report = bucket_report(gold.rows, preds)
    print(format_report(report))
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    gold = load_manifest(args.gold, check_audio=False)
    preds = _load_predictions(Path(args.pred), gold)
    print(format_report(bucket_report(gold.rows, preds)))
    for label, flag in (("ambiguous", True), ("unambiguous", False)):
        rows = [ex for ex in gold.rows if ex.ambiguous is flag]
        sub_preds = [
            p for ex, p in zip(gold.rows, preds) if ex.ambiguous is flag
        ]
        print(f"\n[{label} subset]")
        print(format_report(bucket_report(rows, sub_preds)))
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    err = grad_check(seed=args.seed if args.seed is not None else 0)
    print(f"max relative gradient error: {err:.3e}")
    if err >= 1e-3:
        raise VoicespanError(f"gradient check failed: {err:.3e} >= 1e-3")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voicespan",
        description="Speech+text opinion span tagging experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="generate a synthetic corpus + splits")
    p.add_argument("--size", type=int)
    p.add_argument("--ambiguous", type=float, help="ambiguous example fraction")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-shift", type=float, dest="max_shift")
    p.add_argument("--max-interjection", type=int, dest="max_interjection")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="train the tagger")
    p.add_argument("--data", help="directory with train.tsv/dev.tsv")
    p.add_argument("--text-only", action="store_true")
    p.add_argument("--init-from", dest="init_from", help="base LM checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a manifest and score it")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score an external predictions file")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("analyze", help="length-bucket and subset breakdown")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (VoicespanError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
