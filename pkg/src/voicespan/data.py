"""Synthetic corpus construction, manifest persistence, splits, and stats.

Sentences come from a closed template grammar over a small review-style
lexicon. A configurable fraction of examples is "ambiguous": their opinion
word is polarity-neutral on paper and the gold polarity is dealt per lexeme
from a balanced random deck, then written only into the audio prosody, so
text alone carries no polarity information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import ProsodyConfig, add_misalignment, synth_utterance, wav_duration, write_wav
from .core import Example, OpinionSpan, Polarity, TokenSeq, VoicespanError


class EmptyVocabError(VoicespanError):
    pass


class ManifestParseError(VoicespanError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingAudioError(VoicespanError):
    def __init__(self, path):
        super().__init__(f"audio file missing: {path}")
        self.path = path


class BadRatiosError(VoicespanError):
    pass


@dataclass(frozen=True)
class GrammarVocab:
    """Word groups feeding the sentence templates."""

    determiners: tuple[str, ...] = ("the", "this", "that", "my", "our", "their")
    nouns: tuple[str, ...] = (
        "movie", "film", "plot", "acting", "script", "show", "sequel",
        "ending", "cast", "dialogue", "soundtrack", "pacing", "story",
        "finale", "premise",
    )
    verbs: tuple[str, ...] = ("was", "is", "seemed", "felt", "sounded", "looked")
    intensifiers: tuple[str, ...] = ("really", "quite", "truly", "somewhat", "rather")
    pos_lexemes: tuple[str, ...] = (
        "great", "wonderful", "superb", "delightful", "brilliant",
        "charming", "excellent", "lovely", "inspired", "fantastic",
    )
    neg_lexemes: tuple[str, ...] = (
        "awful", "terrible", "boring", "dreadful", "clumsy",
        "painful", "messy", "tedious", "hollow", "grating",
    )
    neutral_lexemes: tuple[str, ...] = (
        "intense", "striking", "unusual", "bold", "wild", "raw",
        "peculiar", "dramatic", "unexpected", "quirky", "surreal", "chaotic",
    )
    plain_predicates: tuple[str, ...] = (
        "a remake", "the pilot", "in color", "on screen", "in theaters",
        "part two", "a musical", "over budget",
    )
    openers: tuple[str, ...] = (
        "to be fair", "in the end", "after the credits rolled",
        "for what it is worth", "looking back on it", "once the lights came up",
    )
    tails: tuple[str, ...] = (
        "tonight", "overall", "somehow", "in every scene", "from start to finish",
    )
    connectors: tuple[str, ...] = ("and", "but", "while", "yet")

    def groups(self) -> dict[str, tuple[str, ...]]:
        return {
            name: getattr(self, name)
            for name in (
                "determiners", "nouns", "verbs", "intensifiers", "pos_lexemes",
                "neg_lexemes", "neutral_lexemes", "plain_predicates", "openers",
                "tails", "connectors",
            )
        }

    def all_words(self) -> list[str]:
        words: set[str] = set()
        for group in self.groups().values():
            for phrase in group:
                words.update(phrase.split())
        return sorted(words)


@dataclass(frozen=True)
class CorpusConfig:
    size: int = 2700
    ambiguous_fraction: float = 0.5
    vocab: GrammarVocab = field(default_factory=GrammarVocab)
    seed: int = 0
    max_shift: float = 0.3
    max_interjection: int = 2
    prosody: ProsodyConfig = field(default_factory=ProsodyConfig)

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError("size must be >= 1")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            raise ValueError("ambiguous_fraction must be in [0, 1]")


@dataclass
class Manifest:
    rows: list[Example]
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class CorpusStats:
    sentence_count: int
    pos_span_count: int
    neg_span_count: int
    total_minutes: float


class _BalancedDeck:
    """Deals POS/NEG per key, keeping each key's tally within one of even."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._decks: dict[str, list[Polarity]] = {}

    def deal(self, key: str) -> Polarity:
        deck = self._decks.setdefault(key, [])
        if not deck:
            deck.extend([Polarity.POS, Polarity.NEG])
            if self._rng.integers(2):
                deck.reverse()
        return deck.pop()


def _pick(rng: np.random.Generator, group: tuple[str, ...]) -> str:
    return group[int(rng.integers(len(group)))]


def _opinion_clause(rng, vocab, lexeme: str):
    """det noun verb [intensifier] lexeme -> (tokens, span offsets)."""
    tokens = [
        _pick(rng, vocab.determiners),
        _pick(rng, vocab.nouns),
        _pick(rng, vocab.verbs),
    ]
    span_start = len(tokens)
    if rng.random() < 0.5:
        tokens.append(_pick(rng, vocab.intensifiers))
    tokens.append(lexeme)
    return tokens, span_start, len(tokens)


def _plain_clause(rng, vocab):
    tokens = [
        _pick(rng, vocab.determiners),
        _pick(rng, vocab.nouns),
        _pick(rng, vocab.verbs),
    ]
    tokens.extend(_pick(rng, vocab.plain_predicates).split())
    return tokens


def _generate_sentence(rng, vocab, ambiguous: bool, deck: _BalancedDeck):
    tokens: TokenSeq = []
    spans: list[OpinionSpan] = []
    if rng.random() < 0.3:
        tokens.extend(_pick(rng, vocab.openers).split())
    if ambiguous:
        lexeme = _pick(rng, vocab.neutral_lexemes)
        clause, rel_start, rel_end = _opinion_clause(rng, vocab, lexeme)
        spans.append(
            OpinionSpan(len(tokens) + rel_start, len(tokens) + rel_end, deck.deal(lexeme))
        )
        tokens.extend(clause)
    else:
        n_clauses = int(rng.choice([1, 2, 3], p=[0.55, 0.33, 0.12]))
        for k in range(n_clauses):
            if k > 0:
                tokens.append(_pick(rng, vocab.connectors))
            if rng.random() < 0.8:
                polarity = Polarity.POS if rng.integers(2) else Polarity.NEG
                lexicon = (
                    vocab.pos_lexemes if polarity is Polarity.POS else vocab.neg_lexemes
                )
                clause, rel_start, rel_end = _opinion_clause(
                    rng, vocab, _pick(rng, lexicon)
                )
                spans.append(
                    OpinionSpan(len(tokens) + rel_start, len(tokens) + rel_end, polarity)
                )
                tokens.extend(clause)
            else:
                tokens.extend(_plain_clause(rng, vocab))
    if rng.random() < 0.4:
        tokens.extend(_pick(rng, vocab.tails).split())
    return tokens, frozenset(spans)


def build_synthetic(config: CorpusConfig, out_dir: Path | str) -> Manifest:
    """Generate sentences, synthesize their audio, and write everything.

    Audio lands under out_dir/audio/, one WAV per example. The returned
    manifest (also written to out_dir/manifest.tsv) is fully deterministic
    for a given config.
    """
    for name, group in config.vocab.groups().items():
        if not group:
            raise EmptyVocabError(f"vocab group {name!r} is empty")
    out = Path(out_dir)
    audio_dir = out / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    deck = _BalancedDeck(rng)
    n_ambiguous = int(round(config.size * config.ambiguous_fraction))
    flags = np.zeros(config.size, dtype=bool)
    flags[:n_ambiguous] = True
    rng.shuffle(flags)

    rows: list[Example] = []
    for idx in range(config.size):
        tokens, gold = _generate_sentence(rng, config.vocab, bool(flags[idx]), deck)
        ex_seed = int(rng.integers(2**31))
        clean = synth_utterance(tokens, gold, config.prosody, seed=ex_seed)
        noisy = add_misalignment(
            clean, config.max_shift, config.max_interjection, seed=ex_seed + 1
        )
        rel_path = Path("audio") / f"utt{idx:05d}.wav"
        write_wav(noisy, out / rel_path)
        rows.append(
            Example(
                id=f"utt{idx:05d}",
                tokens=tokens,
                audio=rel_path,
                gold=gold,
                ambiguous=bool(flags[idx]),
            )
        )
    manifest = Manifest(
        rows=rows,
        meta={
            "seed": str(config.seed),
            "size": str(config.size),
            "ambiguous_fraction": repr(config.ambiguous_fraction),
            "max_shift": repr(config.max_shift),
            "max_interjection": str(config.max_interjection),
            "split": "all",
        },
    )
    save_manifest(manifest, out / "manifest.tsv")
    return manifest


def _format_spans(spans) -> str:
    if not spans:
        return "-"
    return ";".join(f"{s.start}:{s.end}:{s.polarity.value}" for s in sorted(spans))


def _parse_spans(text: str) -> frozenset[OpinionSpan]:
    if text == "-":
        return frozenset()
    spans = []
    for part in text.split(";"):
        start_s, end_s, pol_s = part.split(":")
        spans.append(OpinionSpan(int(start_s), int(end_s), Polarity(pol_s)))
    return frozenset(spans)


def save_manifest(manifest: Manifest, path: Path | str) -> None:
    """Write `# key=value` metadata lines, then one TAB-separated record per
    example: id, tokens, audio path (or -), spans (or -), ambiguity flag."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in sorted(manifest.meta.items())]
    for ex in manifest.rows:
        audio = str(ex.audio) if ex.audio is not None else "-"
        lines.append(
            "\t".join(
                [
                    ex.id,
                    " ".join(ex.tokens),
                    audio,
                    _format_spans(ex.gold),
                    "1" if ex.ambiguous else "0",
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: Path | str, check_audio: bool = True) -> Manifest:
    """Parse a manifest file; audio paths are resolved against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    meta: dict[str, str] = {}
    rows: list[Example] = []
    base = path.parent
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, value = body.partition("=")
                meta[key.strip()] = value.strip()
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ManifestParseError(f"expected 5 fields, got {len(fields)}", line_no)
        ex_id, tokens_s, audio_s, spans_s, flag_s = fields
        if flag_s not in ("0", "1"):
            raise ManifestParseError(f"bad ambiguity flag {flag_s!r}", line_no)
        try:
            gold = _parse_spans(spans_s)
            ex = Example(
                id=ex_id,
                tokens=tokens_s.split(),
                audio=Path(audio_s) if audio_s != "-" else None,
                gold=gold,
                ambiguous=flag_s == "1",
            )
        except (ValueError, KeyError, VoicespanError) as exc:
            raise ManifestParseError(str(exc), line_no) from exc
        if ex.audio is not None and check_audio and not (base / ex.audio).exists():
            raise MissingAudioError(base / ex.audio)
        rows.append(ex)
    seen = set()
    for ex in rows:
        if ex.id in seen:
            raise ManifestParseError(f"duplicate id {ex.id}", 0)
        seen.add(ex.id)
    return Manifest(rows=rows, meta=meta)


def split(
    manifest: Manifest, ratios: tuple[float, float, float], seed: int = 0
) -> tuple[Manifest, Manifest, Manifest]:
    """Deterministic shuffled train/dev/test partition, stratified on the
    ambiguity flag so each split's ambiguous share tracks the corpus."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise BadRatiosError(f"need 3 positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatiosError(f"ratios sum to {sum(ratios)!r}, not 1")
    rng = np.random.default_rng(seed)
    parts: list[list[Example]] = [[], [], []]
    for stratum in (
        [ex for ex in manifest.rows if ex.ambiguous],
        [ex for ex in manifest.rows if not ex.ambiguous],
    ):
        order = rng.permutation(len(stratum))
        sizes = _allocate(len(stratum), ratios)
        offset = 0
        for part, size in zip(parts, sizes):
            part.extend(stratum[i] for i in order[offset : offset + size])
            offset += size
    index = {ex.id: i for i, ex in enumerate(manifest.rows)}
    names = ("train", "dev", "test")
    out = []
    for name, part in zip(names, parts):
        part.sort(key=lambda ex: index[ex.id])
        out.append(Manifest(rows=part, meta={**manifest.meta, "split": name}))
    return tuple(out)


def _allocate(total: int, ratios) -> list[int]:
    """Largest-remainder apportionment of `total` into len(ratios) parts."""
    raw = [total * r for r in ratios]
    sizes = [int(x) for x in raw]
    remainders = sorted(
        range(len(ratios)), key=lambda i: (raw[i] - sizes[i], -i), reverse=True
    )
    for i in range(total - sum(sizes)):
        sizes[remainders[i % len(ratios)]] += 1
    return sizes


def stats(manifest: Manifest, base_dir: Path | str | None = None) -> CorpusStats:
    """Sentence and per-polarity span counts plus total audio minutes."""
    pos = neg = 0
    seconds = 0.0
    base = Path(base_dir) if base_dir is not None else Path(".")
    for ex in manifest.rows:
        for span in ex.gold:
            if span.polarity is Polarity.POS:
                pos += 1
            else:
                neg += 1
        if ex.audio is not None:
            wav = base / ex.audio
            if not wav.exists():
                raise MissingAudioError(wav)
            seconds += wav_duration(wav)
    return CorpusStats(
        sentence_count=len(manifest.rows),
        pos_span_count=pos,
        neg_span_count=neg,
        total_minutes=round(seconds / 60.0, 1),
    )


def format_stats_table(named_stats: list[tuple[str, CorpusStats]]) -> str:
    lines = [f"{'Split':10s} {'#Sent':>7s} {'#POS':>7s} {'#NEG':>7s} {'Minutes':>8s}"]
    for name, st in named_stats:
        lines.append(
            f"{name:10s} {st.sentence_count:>7d} {st.pos_span_count:>7d} "
            f"{st.neg_span_count:>7d} {st.total_minutes:>8.1f}"
        )
    return "\n".join(lines)
