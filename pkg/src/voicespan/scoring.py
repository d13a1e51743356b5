"""Exact-match span scoring: micro P/R/F1, per-polarity and length buckets."""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import Example, OpinionSpan, Polarity, VoicespanError


class LengthMismatchError(VoicespanError):
    pass


@dataclass(frozen=True)
class PRF:
    tp: int
    pred: int
    gold: int
    precision: float
    recall: float
    f1: float


def _prf(tp: int, pred: int, gold: int) -> PRF:
    # All-empty corpora score perfect by convention; a zero denominator
    # otherwise pins the affected rate to 0 so reports stay total.
    if pred == 0 and gold == 0:
        return PRF(tp, pred, gold, 1.0, 1.0, 1.0)
    p = tp / pred if pred else 0.0
    r = tp / gold if gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(tp, pred, gold, p, r, f1)


@dataclass(frozen=True)
class EvalReport:
    tp: int
    pred_count: int
    gold_count: int
    precision: float
    recall: float
    f1: float
    per_polarity: dict[Polarity, PRF] = field(default_factory=dict)
    per_bucket: dict[str, tuple[float, float, float, int]] = field(
        default_factory=dict
    )


def _report(tp: int, pred: int, gold: int, by_pol: dict[Polarity, list[int]]) -> EvalReport:
    overall = _prf(tp, pred, gold)
    per_pol = {pol: _prf(*counts) for pol, counts in by_pol.items()}
    return EvalReport(
        tp=tp,
        pred_count=pred,
        gold_count=gold,
        precision=overall.precision,
        recall=overall.recall,
        f1=overall.f1,
        per_polarity=per_pol,
    )


def score(pairs: list[tuple[set[OpinionSpan], set[OpinionSpan]]]) -> EvalReport:
    """Micro-averaged exact-tuple-match scores over (gold, pred) pairs."""
    tp = pred = gold = 0
    by_pol = {pol: [0, 0, 0] for pol in Polarity}
    for gold_set, pred_set in pairs:
        tp += len(gold_set & pred_set)
        pred += len(pred_set)
        gold += len(gold_set)
        for pol in Polarity:
            g = {s for s in gold_set if s.polarity is pol}
            p = {s for s in pred_set if s.polarity is pol}
            counts = by_pol[pol]
            counts[0] += len(g & p)
            counts[1] += len(p)
            counts[2] += len(g)
    return _report(tp, pred, gold, by_pol)


def oracle_score(pairs: list[tuple[set[OpinionSpan], set[OpinionSpan]]]) -> EvalReport:
    """Brute-force re-computation of score() used only as a cross-check.

    Every (start, end, polarity) triple is materialized and compared with
    nested loops; no set machinery is shared with score().
    """
    tp = pred = gold = 0
    by_pol = {pol: [0, 0, 0] for pol in Polarity}
    for gold_set, pred_set in pairs:
        gold_triples = [(s.start, s.end, s.polarity.value) for s in gold_set]
        pred_triples = [(s.start, s.end, s.polarity.value) for s in pred_set]
        for gt in gold_triples:
            for pt in pred_triples:
                if gt[0] == pt[0] and gt[1] == pt[1] and gt[2] == pt[2]:
                    tp += 1
                    by_pol[Polarity(gt[2])][0] += 1
        pred += len(pred_triples)
        gold += len(gold_triples)
        for pt in pred_triples:
            by_pol[Polarity(pt[2])][1] += 1
        for gt in gold_triples:
            by_pol[Polarity(gt[2])][2] += 1
    return _report(tp, pred, gold, by_pol)


DEFAULT_BUCKET_EDGES = (8, 16)


def bucket_labels(edges=DEFAULT_BUCKET_EDGES) -> list[str]:
    labels = []
    lo = 1
    for edge in edges:
        labels.append(f"{lo}-{edge}")
        lo = edge + 1
    labels.append(f">{edges[-1]}")
    return labels


def bucket_report(
    examples: list[Example],
    preds: list[set[OpinionSpan]],
    edges=DEFAULT_BUCKET_EDGES,
) -> EvalReport:
    """Overall report plus per-sentence-length-bucket breakdown.

    Sentences are assigned by token count to [1..e1], [e1+1..e2], ...,
    (last edge, inf); each bucket is scored independently.
    """
    if len(examples) != len(preds):
        raise LengthMismatchError(
            f"{len(examples)} examples vs {len(preds)} prediction sets"
        )
    if list(edges) != sorted(set(edges)):
        raise ValueError("bucket edges must be strictly increasing")
    labels = bucket_labels(edges)
    buckets: dict[str, list[tuple[set, set]]] = {lab: [] for lab in labels}
    pairs = []
    for ex, pred in zip(examples, preds):
        n = len(ex.tokens)
        idx = sum(1 for e in edges if n > e)
        buckets[labels[idx]].append((set(ex.gold), pred))
        pairs.append((set(ex.gold), pred))
    overall = score(pairs)
    per_bucket = {}
    for lab in labels:
        rep = score(buckets[lab])
        per_bucket[lab] = (rep.precision, rep.recall, rep.f1, len(buckets[lab]))
    return EvalReport(
        tp=overall.tp,
        pred_count=overall.pred_count,
        gold_count=overall.gold_count,
        precision=overall.precision,
        recall=overall.recall,
        f1=overall.f1,
        per_polarity=overall.per_polarity,
        per_bucket=per_bucket,
    )


def pct(x: float) -> str:
    """Percentage with two decimals, the format used in report tables."""
    return f"{100 * x:.2f}"


def format_report(report: EvalReport) -> str:
    """Human-readable table. Percentages carry two decimals."""
    lines = [
        f"{'':12s} {'P':>8s} {'R':>8s} {'F1':>8s} {'tp':>6s} {'pred':>6s} {'gold':>6s}",
        f"{'overall':12s} {pct(report.precision):>8s} {pct(report.recall):>8s} "
        f"{pct(report.f1):>8s} {report.tp:>6d} {report.pred_count:>6d} "
        f"{report.gold_count:>6d}",
    ]
    for pol in Polarity:
        if pol in report.per_polarity:
            r = report.per_polarity[pol]
            lines.append(
                f"{pol.value:12s} {pct(r.precision):>8s} {pct(r.recall):>8s} "
                f"{pct(r.f1):>8s} {r.tp:>6d} {r.pred:>6d} {r.gold:>6d}"
            )
    if report.per_bucket:
        lines.append(f"{'bucket':12s} {'P':>8s} {'R':>8s} {'F1':>8s} {'sents':>6s}")
        for lab, (p, r, f1, n) in report.per_bucket.items():
            lines.append(
                f"{lab:12s} {pct(p):>8s} {pct(r):>8s} {pct(f1):>8s} {n:>6d}"
            )
    return "\n".join(lines)


def report_to_kv(report: EvalReport) -> str:
    """Machine-readable key/value serialization, one pair per line."""
    rows = [
        ("tp", str(report.tp)),
        ("pred_count", str(report.pred_count)),
        ("gold_count", str(report.gold_count)),
        ("precision", pct(report.precision)),
        ("recall", pct(report.recall)),
        ("f1", pct(report.f1)),
    ]
    for pol in Polarity:
        if pol in report.per_polarity:
            r = report.per_polarity[pol]
            key = pol.value.lower()
            rows += [
                (f"{key}.tp", str(r.tp)),
                (f"{key}.pred", str(r.pred)),
                (f"{key}.gold", str(r.gold)),
                (f"{key}.precision", pct(r.precision)),
                (f"{key}.recall", pct(r.recall)),
                (f"{key}.f1", pct(r.f1)),
            ]
    for lab, (p, r, f1, n) in report.per_bucket.items():
        rows += [
            (f"bucket.{lab}.precision", pct(p)),
            (f"bucket.{lab}.recall", pct(r)),
            (f"bucket.{lab}.f1", pct(f1)),
            (f"bucket.{lab}.sentences", str(n)),
        ]
    return "\n".join(f"{k} {v}" for k, v in rows)
