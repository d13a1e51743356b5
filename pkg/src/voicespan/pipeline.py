"""Glue between corpus rows and the model: feature caching, target
construction, greedy decoding, and corpus-level evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .audio import log_mel, read_wav
from .core import Example, OpinionSpan
from .data import Manifest
from .model import PROMPT_TOKENS, FusedSequence, FusionTagger, Vocab
from .scoring import EvalReport, bucket_report
from .template import (
    MalformedTemplateError,
    ParseMode,
    align_to_source,
    encode_tagged,
    parse_tagged,
    tagged_to_tokens,
    tokens_to_tagged,
)


def target_token_ids(vocab: Vocab, example: Example) -> list[int]:
    """BOS + tagged-output tokens + EOS, as vocabulary ids."""
    tagged = encode_tagged(example.tokens, example.gold)
    return (
        [vocab.bos_id] + vocab.encode(tagged_to_tokens(tagged)) + [vocab.eos_id]
    )


def prompt_ids(vocab: Vocab, example: Example) -> list[int]:
    return vocab.encode(PROMPT_TOKENS + example.tokens)


def encoder_features(
    model: FusionTagger, manifest: Manifest, base_dir: Path | str
) -> dict[str, torch.Tensor]:
    """Frozen-encoder outputs per example id, computed once up front."""
    base = Path(base_dir)
    feats: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for ex in manifest.rows:
            if ex.audio is None:
                continue
            mel = log_mel(read_wav(base / ex.audio))
            feats[ex.id] = model.encode_speech(mel).detach()
    return feats


def build_fused(
    model: FusionTagger,
    example: Example,
    feats: dict[str, torch.Tensor] | None,
) -> FusedSequence:
    """Fused prefix for one example; text-only when feats is None."""
    h_text = model.embed_text(prompt_ids(model.vocab, example))
    if feats is None or not model.cfg.use_speech or example.id not in feats:
        return model.fuse(h_text, None)
    return model.fuse(h_text, model.adapt(feats[example.id]))


@dataclass
class Prediction:
    example_id: str
    tagged: str
    spans: set[OpinionSpan]
    strict_ok: bool
    spans_dropped: int


@dataclass
class EvalOutcome:
    report: EvalReport
    predictions: list[Prediction]
    parse_failures: int
    spans_dropped: int
    subset_reports: dict[str, EvalReport] = field(default_factory=dict)


def decode_example(
    model: FusionTagger,
    example: Example,
    feats: dict[str, torch.Tensor] | None,
) -> Prediction:
    """Greedy decode -> lenient parse -> lenient alignment to the source."""
    fused = build_fused(model, example, feats)
    budget = min(
        2 * len(example.tokens) + 10,
        model.cfg.max_seq_len - len(fused) - 1,
    )
    out_ids = model.generate(fused, max_new_tokens=budget)
    tagged = tokens_to_tagged(model.vocab.decode(out_ids))
    decoded, raw_spans = parse_tagged(tagged, ParseMode.LENIENT)
    aligned = align_to_source(example.tokens, decoded, raw_spans, ParseMode.LENIENT)
    try:
        parse_tagged(tagged, ParseMode.STRICT)
        strict_ok = True
    except MalformedTemplateError:
        strict_ok = False
    return Prediction(
        example_id=example.id,
        tagged=tagged,
        spans=aligned,
        strict_ok=strict_ok,
        spans_dropped=len(raw_spans) - len(aligned),
    )


def evaluate(
    model: FusionTagger,
    manifest: Manifest,
    feats: dict[str, torch.Tensor] | None,
    with_subsets: bool = False,
) -> EvalOutcome:
    """Decode every example and score with length buckets; optionally adds
    ambiguous / unambiguous subset reports."""
    predictions = [decode_example(model, ex, feats) for ex in manifest.rows]
    report = bucket_report(manifest.rows, [p.spans for p in predictions])
    outcome = EvalOutcome(
        report=report,
        predictions=predictions,
        parse_failures=sum(1 for p in predictions if not p.strict_ok),
        spans_dropped=sum(p.spans_dropped for p in predictions),
    )
    if with_subsets:
        for label, flag in (("ambiguous", True), ("unambiguous", False)):
            rows = [ex for ex in manifest.rows if ex.ambiguous is flag]
            preds = [
                p.spans
                for ex, p in zip(manifest.rows, predictions)
                if ex.ambiguous is flag
            ]
            outcome.subset_reports[label] = bucket_report(rows, preds)
    return outcome
