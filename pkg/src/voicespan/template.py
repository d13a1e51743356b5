"""Inline-tag template codec: encode gold spans, parse generated text back.

The canonical surface form wraps each span's tokens as "<pos>first ... last</pos>"
with the markers abutting the first and last span token and single spaces
everywhere else. The parser accepts arbitrary strings (markers may appear
anywhere) and, in lenient mode, never fails.
"""

from __future__ import annotations

import enum
import re

from .core import (
    OpinionSpan,
    Polarity,
    TokenSeq,
    VoicespanError,
    validate_spans,
)

OPEN_MARKERS = {"<pos>": Polarity.POS, "<neg>": Polarity.NEG}
CLOSE_MARKERS = {"</pos>": Polarity.POS, "</neg>": Polarity.NEG}
MARKERS = sorted(OPEN_MARKERS) + sorted(CLOSE_MARKERS)

_MARKER_RE = re.compile(r"(</?(?:pos|neg)>)")


class ParseMode(enum.Enum):
    STRICT = "strict"
    LENIENT = "lenient"


class MalformedTemplateError(VoicespanError):
    """Strict parse failure; carries the character position and the rule."""

    def __init__(self, message: str, position: int, rule: str):
        super().__init__(f"{message} (char {position}, rule {rule})")
        self.position = position
        self.rule = rule


class TokenMismatchError(VoicespanError):
    """Strict alignment failure at the first diverging token index."""

    def __init__(self, index: int, source_tok: str, decoded_tok: str):
        super().__init__(
            f"token {index}: decoded {decoded_tok!r} != source {source_tok!r}"
        )
        self.index = index


def encode_tagged(tokens: TokenSeq, spans) -> str:
    """Render tokens with each span wrapped in its polarity markers."""
    validate_spans(tokens, spans)
    opens = {s.start: s.polarity for s in spans}
    closes = {s.end - 1: s.polarity for s in spans}
    parts = []
    for i, tok in enumerate(tokens):
        piece = tok
        if i in opens:
            piece = f"<{opens[i].tag}>" + piece
        if i in closes:
            piece = piece + f"</{closes[i].tag}>"
        parts.append(piece)
    return " ".join(parts)


def parse_tagged(tagged: str, mode: ParseMode = ParseMode.LENIENT):
    """Parse a (possibly malformed) tagged string into tokens and spans.

    Strict mode raises MalformedTemplateError on nesting, unclosed or
    mismatched tags, a close with no open region, or an empty region.
    Lenient mode recovers, applying rules left-to-right: an open inside an
    open region closes the previous region first; an unclosed tag closes at
    end of string; a wrong-polarity close uses the open tag's polarity; a
    stray close is discarded; empty regions are dropped.

    Returns (tokens, spans). The tokens never contain a marker string.
    """
    tokens: TokenSeq = []
    spans: set[OpinionSpan] = set()
    open_pol: Polarity | None = None
    open_start = 0
    pos = 0

    def close_region(pol: Polarity) -> None:
        nonlocal open_pol
        if len(tokens) > open_start:
            spans.add(OpinionSpan(open_start, len(tokens), pol))
        elif mode is ParseMode.STRICT:
            raise MalformedTemplateError("empty tagged region", pos, "empty-region")
        open_pol = None

    for piece in _MARKER_RE.split(tagged):
        if piece in OPEN_MARKERS:
            if open_pol is not None:
                if mode is ParseMode.STRICT:
                    raise MalformedTemplateError("nested open tag", pos, "nesting")
                close_region(open_pol)
            open_pol = OPEN_MARKERS[piece]
            open_start = len(tokens)
        elif piece in CLOSE_MARKERS:
            if open_pol is None:
                if mode is ParseMode.STRICT:
                    raise MalformedTemplateError(
                        "close tag with no open region", pos, "stray-close"
                    )
            else:
                if CLOSE_MARKERS[piece] is not open_pol and mode is ParseMode.STRICT:
                    raise MalformedTemplateError(
                        "close tag polarity mismatch", pos, "mismatched-close"
                    )
                close_region(open_pol)
        else:
            tokens.extend(piece.split())
        pos += len(piece)

    if open_pol is not None:
        if mode is ParseMode.STRICT:
            raise MalformedTemplateError("unclosed tag at end", pos, "unclosed")
        close_region(open_pol)

    return tokens, spans


def align_to_source(
    source: TokenSeq,
    decoded: TokenSeq,
    spans,
    mode: ParseMode = ParseMode.LENIENT,
) -> set[OpinionSpan]:
    """Re-index spans from a decoded token sequence onto the source sentence.

    Strict mode requires decoded == source and returns the spans unchanged.
    Lenient mode aligns decoded to source by longest common subsequence
    (exact token equality, ties resolved toward the earliest source index);
    a span survives only if every one of its tokens aligns and the aligned
    source indices form one contiguous ascending run.
    """
    validate_spans(decoded, spans)
    if mode is ParseMode.STRICT:
        for i, (src, dec) in enumerate(zip(source, decoded)):
            if src != dec:
                raise TokenMismatchError(i, src, dec)
        if len(source) != len(decoded):
            i = min(len(source), len(decoded))
            raise TokenMismatchError(
                i,
                source[i] if i < len(source) else "<end>",
                decoded[i] if i < len(decoded) else "<end>",
            )
        return set(spans)

    mapping = _lcs_map(decoded, source)
    out: set[OpinionSpan] = set()
    for span in spans:
        images = [mapping.get(i) for i in range(span.start, span.end)]
        if None in images:
            continue
        if all(b == a + 1 for a, b in zip(images, images[1:])):
            out.add(OpinionSpan(images[0], images[-1] + 1, span.polarity))
    return out


def _lcs_map(decoded: TokenSeq, source: TokenSeq) -> dict[int, int]:
    """Map decoded index -> source index along one maximum LCS alignment.

    Greedy reconstruction: take a match whenever it preserves optimality
    (this picks the earliest source index for each matched decoded token);
    on skip ties, drop the decoded token first.
    """
    n, m = len(decoded), len(source)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, nxt = dp[i], dp[i + 1]
        for j in range(m - 1, -1, -1):
            if decoded[i] == source[j]:
                row[j] = 1 + nxt[j + 1]
            else:
                row[j] = max(nxt[j], row[j + 1])
    mapping: dict[int, int] = {}
    i = j = 0
    while i < n and j < m:
        if decoded[i] == source[j] and dp[i][j] == 1 + dp[i + 1][j + 1]:
            mapping[i] = j
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return mapping


def tagged_to_tokens(tagged: str) -> TokenSeq:
    """Split a tagged string into model tokens, markers standing alone."""
    out: TokenSeq = []
    for piece in _MARKER_RE.split(tagged):
        if piece in OPEN_MARKERS or piece in CLOSE_MARKERS:
            out.append(piece)
        else:
            out.extend(piece.split())
    return out


def tokens_to_tagged(tokens: TokenSeq) -> str:
    """Join model tokens back into surface form, gluing markers to words.

    Open markers attach to the following token, close markers to the
    preceding one, so canonical encodings round-trip exactly.
    """
    text = ""
    glue = False
    for tok in tokens:
        if tok in CLOSE_MARKERS:
            text += tok
            glue = False
        elif tok in OPEN_MARKERS:
            text += ("" if glue or not text else " ") + tok
            glue = True
        else:
            text += ("" if glue or not text else " ") + tok
            glue = False
    return text
