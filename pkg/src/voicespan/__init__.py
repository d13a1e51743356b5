"""Speech+text opinion span tagging toolkit."""

from .core import Example, OpinionSpan, Polarity, tokenize, validate_spans
from .scoring import EvalReport, bucket_report, oracle_score, score
from .template import ParseMode, align_to_source, encode_tagged, parse_tagged

__all__ = [
    "Example",
    "OpinionSpan",
    "Polarity",
    "tokenize",
    "validate_spans",
    "EvalReport",
    "bucket_report",
    "oracle_score",
    "score",
    "ParseMode",
    "align_to_source",
    "encode_tagged",
    "parse_tagged",
]

__version__ = "0.1.0"
