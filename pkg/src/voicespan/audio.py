"""Waveform I/O, log-mel features, and prosody-bearing utterance synthesis.

Audio is mono PCM16 at 16 kHz throughout. Opinion polarity is written into
the waveform as a pitch sweep (rising for positive, falling for negative)
plus an emphasis gain on the span's tokens, so the polarity of an otherwise
neutral sentence is recoverable from sound alone.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import IoFailureError, Polarity, TokenSeq, VoicespanError, validate_spans

SAMPLE_RATE = 16_000
WIN_SAMPLES = 400
HOP_SAMPLES = 160
N_FFT = 512
N_MELS = 80
MEL_FMAX = 8_000.0
TONE_AMPLITUDE = 0.3
FILLER_SECONDS = 0.1
FILLER_PITCH = 600.0


class UnsupportedFormatError(VoicespanError):
    pass


class TooShortError(VoicespanError):
    pass


@dataclass
class RawAudio:
    """Float samples in [-1, 1] at a fixed 16 kHz rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelFeatures:
    """T x B matrix of log-mel energies with 10 ms hop."""

    frames: np.ndarray
    frame_hop: float = HOP_SAMPLES / SAMPLE_RATE
    n_mels: int = N_MELS


@dataclass(frozen=True)
class ProsodyConfig:
    token_duration: float = 0.2
    gap: float = 0.05
    base_pitch: float = 330.0
    pos_sweep: tuple[float, float] = (220.0, 440.0)
    neg_sweep: tuple[float, float] = (440.0, 220.0)
    emphasis_gain: float = 1.5
    noise_level: float = 0.01

    def __post_init__(self) -> None:
        values = (
            self.token_duration,
            self.gap,
            self.base_pitch,
            *self.pos_sweep,
            *self.neg_sweep,
            self.emphasis_gain,
            self.noise_level,
        )
        if any(v <= 0 for v in values):
            raise ValueError("all prosody parameters must be positive")
        if self.emphasis_gain < 1.0:
            raise ValueError("emphasis_gain must be >= 1")


def write_wav(audio: RawAudio, path: Path | str) -> None:
    """Write mono PCM16 RIFF at 16 kHz."""
    quantized = np.round(np.clip(audio.samples, -1.0, 1.0) * 32767.0)
    data = quantized.astype("<i2").tobytes()
    try:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(audio.sample_rate)
            fh.writeframes(data)
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def read_wav(path: Path | str) -> RawAudio:
    """Read a mono PCM16 16 kHz file; anything else is rejected."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            frames = fh.readframes(fh.getnframes())
    except FileNotFoundError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    except (wave.Error, EOFError, OSError) as exc:
        raise UnsupportedFormatError(f"not a readable WAV file: {path}: {exc}") from exc
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: expected 16-bit PCM, got width {width}")
    if rate != SAMPLE_RATE:
        raise UnsupportedFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32767.0
    return RawAudio(samples=samples, sample_rate=rate)


def wav_duration(path: Path | str) -> float:
    """Duration in seconds from the header alone (format-checked)."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise UnsupportedFormatError(f"{path}: not mono PCM16")
            return fh.getnframes() / fh.getframerate()
    except (wave.Error, EOFError, OSError) as exc:
        raise UnsupportedFormatError(f"not a readable WAV file: {path}: {exc}") from exc


def mel_frame_count(n_samples: int) -> int:
    return 1 + (n_samples - WIN_SAMPLES) // HOP_SAMPLES


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int) -> np.ndarray:
    """Triangular filters over 0..8 kHz, (n_mels, n_fft//2 + 1)."""
    edges_hz = _mel_to_hz(np.linspace(0.0, _hz_to_mel(MEL_FMAX), n_mels + 2))
    bin_hz = np.arange(N_FFT // 2 + 1) * (SAMPLE_RATE / N_FFT)
    bank = np.zeros((n_mels, len(bin_hz)))
    for i in range(n_mels):
        lo, center, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        bank[i] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


_FILTERBANK_CACHE: dict[int, np.ndarray] = {}


def log_mel(audio: RawAudio, bins: int = N_MELS) -> MelFeatures:
    """Hann-windowed magnitude spectrogram through a mel filterbank, logged.

    Frame count is 1 + floor((n_samples - 400) / 160); the floor inside the
    log is 1e-10, so silence maps to ln(1e-10) everywhere.
    """
    n = len(audio.samples)
    if n < WIN_SAMPLES:
        raise TooShortError(f"need >= {WIN_SAMPLES} samples, got {n}")
    n_frames = mel_frame_count(n)
    stride = audio.samples.strides[0]
    windows = np.lib.stride_tricks.as_strided(
        audio.samples,
        shape=(n_frames, WIN_SAMPLES),
        strides=(HOP_SAMPLES * stride, stride),
        writeable=False,
    )
    spectrum = np.abs(np.fft.rfft(windows * np.hanning(WIN_SAMPLES), n=N_FFT, axis=1))
    if bins not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[bins] = _mel_filterbank(bins)
    energies = spectrum @ _FILTERBANK_CACHE[bins].T
    return MelFeatures(frames=np.log(energies + 1e-10), n_mels=bins)


def _token_tone(polarity: Polarity | None, cfg: ProsodyConfig) -> np.ndarray:
    n = round(cfg.token_duration * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    if polarity is None:
        phase = 2.0 * np.pi * cfg.base_pitch * t
        return TONE_AMPLITUDE * np.sin(phase)
    f_lo, f_hi = cfg.pos_sweep if polarity is Polarity.POS else cfg.neg_sweep
    # linear chirp: phase is the integral of the instantaneous frequency
    phase = 2.0 * np.pi * (f_lo * t + (f_hi - f_lo) * t**2 / (2.0 * cfg.token_duration))
    tone = TONE_AMPLITUDE * cfg.emphasis_gain * np.sin(phase)
    return np.clip(tone, -1.0, 1.0)


def synth_utterance(
    tokens: TokenSeq,
    spans,
    cfg: ProsodyConfig = ProsodyConfig(),
    seed: int = 0,
) -> RawAudio:
    """One tone segment per token, polarity encoded as sweep direction.

    Neutral tokens are a flat sine at base_pitch; tokens inside a span sweep
    the polarity's frequency pair and carry the emphasis gain. Segments are
    separated by silent gaps, then Gaussian noise is added. Deterministic
    for a given seed.
    """
    validate_spans(tokens, spans)
    polarity_at: dict[int, Polarity] = {}
    for span in spans:
        for i in range(span.start, span.end):
            polarity_at[i] = span.polarity
    gap = np.zeros(round(cfg.gap * SAMPLE_RATE))
    segments = []
    for i in range(len(tokens)):
        if i > 0:
            segments.append(gap)
        segments.append(_token_tone(polarity_at.get(i), cfg))
    signal = np.concatenate(segments) if segments else np.zeros(0)
    rng = np.random.default_rng(seed)
    signal = signal + cfg.noise_level * rng.standard_normal(len(signal))
    return RawAudio(samples=np.clip(signal, -1.0, 1.0))


def add_misalignment(
    audio: RawAudio,
    max_shift: float = 0.3,
    max_interjection: int = 2,
    seed: int = 0,
) -> RawAudio:
    """Prepend a random low-noise offset and splice in short filler tones.

    With max_shift == 0 and max_interjection == 0 the input is returned
    unchanged. Output length is input + offset + 0.1 s per interjection.
    Deterministic for a given seed.
    """
    if max_shift < 0:
        raise ValueError("max_shift must be >= 0")
    if max_shift == 0 and max_interjection == 0:
        return audio
    rng = np.random.default_rng(seed)
    offset_n = round(rng.uniform(0.0, max_shift) * SAMPLE_RATE)
    lead = 0.005 * rng.standard_normal(offset_n)
    signal = np.concatenate([lead, audio.samples])
    n_fillers = int(rng.integers(0, max_interjection + 1))
    filler_n = round(FILLER_SECONDS * SAMPLE_RATE)
    t = np.arange(filler_n) / SAMPLE_RATE
    envelope = np.hanning(filler_n)
    filler = 0.2 * envelope * np.sin(2.0 * np.pi * FILLER_PITCH * t)
    positions = sorted(
        (int(rng.integers(0, len(signal) + 1)) for _ in range(n_fillers)),
        reverse=True,
    )
    for pos in positions:
        signal = np.concatenate([signal[:pos], filler, signal[pos:]])
    return RawAudio(samples=np.clip(signal, -1.0, 1.0))
