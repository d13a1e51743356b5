"""Core domain types: polarity, token spans, examples, and span validation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


class VoicespanError(Exception):
    """Base class for every error raised by this package."""


class IoFailureError(VoicespanError):
    """Underlying file I/O failed (missing file, permissions, short write)."""


class InvalidSpansError(VoicespanError):
    """A span set fails validation against its token sequence."""

    def __init__(self, message: str, span: "OpinionSpan"):
        super().__init__(message)
        self.span = span


class OutOfBoundsError(InvalidSpansError):
    pass


class EmptySpanError(InvalidSpansError):
    pass


class OverlapError(InvalidSpansError):
    pass


class Polarity(enum.Enum):
    """Sentiment polarity of an opinion span.

    Serialized lowercase ("pos"/"neg") inside tagged templates and
    uppercase ("POS"/"NEG") in manifest files.
    """

    POS = "POS"
    NEG = "NEG"

    @property
    def tag(self) -> str:
        return self.value.lower()

    @classmethod
    def from_tag(cls, tag: str) -> "Polarity":
        return cls(tag.upper())


@dataclass(frozen=True, order=True)
class OpinionSpan:
    """Half-open [start, end) token span carrying a polarity.

    Bounds against a concrete sentence are checked by validate_spans,
    not at construction.
    """

    start: int
    end: int
    polarity: Polarity

    def __repr__(self) -> str:
        return f"({self.start},{self.end},{self.polarity.value})"


# Whitespace-free, non-empty word strings; joining with single spaces and
# re-splitting reproduces the list.
TokenSeq = list[str]


@dataclass(frozen=True)
class Example:
    """One corpus row: sentence tokens, optional audio, gold spans."""

    id: str
    tokens: TokenSeq
    audio: Optional[Path] = None
    gold: frozenset[OpinionSpan] = field(default_factory=frozenset)
    ambiguous: bool = False

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("example id cannot be empty")
        object.__setattr__(self, "gold", frozenset(self.gold))
        validate_spans(self.tokens, self.gold)


def tokenize(text: str) -> TokenSeq:
    """Split text on whitespace runs, replacing angle brackets in tokens.

    Total function: any Unicode string is accepted; empty input yields an
    empty sequence. "<" and ">" become "(" and ")" so no token can collide
    with a tag marker.
    """
    return [tok.replace("<", "(").replace(">", ")") for tok in text.split()]


def validate_spans(tokens: TokenSeq, spans) -> None:
    """Check spans are in-bounds, non-empty, and pairwise non-overlapping.

    Raises the first violation in (start, end) order: EmptySpanError,
    OutOfBoundsError, or OverlapError, each naming the offending span.
    """
    n = len(tokens)
    ordered = sorted(spans)
    for span in ordered:
        if span.end <= span.start:
            raise EmptySpanError(f"empty span {span}", span)
        if span.start < 0 or span.end > n:
            raise OutOfBoundsError(
                f"span {span} out of bounds for {n} tokens", span
            )
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start < prev.end:
            raise OverlapError(f"span {cur} overlaps {prev}", cur)


def spans_valid(tokens: TokenSeq, spans) -> bool:
    """True iff validate_spans passes."""
    try:
        validate_spans(tokens, spans)
    except InvalidSpansError:
        return False
    return True
