"""Speech+text fusion tagger model.

A small decoder-only transformer LM reads a fused prefix (prompt + sentence
token embeddings followed by adapted speech embeddings) and emits the
sentence re-rendered with inline polarity tags. The speech path is a frozen
convolutional encoder feeding a trainable conv+bottleneck adapter that maps
speech features into the text embedding space; the LM itself is adapted only
through low-rank (LoRA) updates on the attention query/value projections.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import MelFeatures, TooShortError
from .core import VoicespanError
from .template import MARKERS

PROMPT_TOKENS = ["extract", "opinions", ":"]

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = [PAD, BOS, EOS, UNK]


class DimMismatchError(VoicespanError):
    pass


class ShapeMismatchError(VoicespanError):
    pass


class SequenceTooLongError(VoicespanError):
    pass


class UnknownTokenError(VoicespanError):
    pass


class EmptyMaskError(VoicespanError):
    pass


class Vocab:
    """Word-level vocabulary: specials, tag markers, then corpus words."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_corpus(cls, token_seqs) -> "Vocab":
        words = set(PROMPT_TOKENS)
        for seq in token_seqs:
            words.update(seq)
        return cls(SPECIAL_TOKENS + MARKERS + sorted(words - set(MARKERS)))

    def encode(self, tokens) -> list[int]:
        return [self.index.get(tok, self.unk_id) for tok in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    speech_enc_dim: int = 64
    enc_channels: int = 96
    adapter_channels: int = 32
    adapter_conv_layers: int = 3
    adapter_kernel: int = 3
    adapter_stride: int = 2
    adapter_pad: int = 1
    bottleneck_rank: int = 16
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    max_seq_len: int = 160
    n_mels: int = 80
    use_speech: bool = True

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.speech_enc_dim != self.d_model:
            raise ValueError(
                "speech_enc_dim must equal d_model for the adapter residual"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def conv_out_len(length: int, kernel: int = 3, stride: int = 2, pad: int = 1) -> int:
    return (length + 2 * pad - kernel) // stride + 1


def encoder_output_length(n_frames: int) -> int:
    return conv_out_len(conv_out_len(n_frames))


def adapter_output_length(n_frames: int, cfg: ModelConfig = ModelConfig()) -> int:
    length = n_frames
    for _ in range(cfg.adapter_conv_layers):
        length = conv_out_len(
            length, cfg.adapter_kernel, cfg.adapter_stride, cfg.adapter_pad
        )
    return length


def sinusoidal_positions(max_len: int, d_model: int) -> torch.Tensor:
    position = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(
        torch.arange(0, d_model, 2, dtype=torch.float64)
        * (-math.log(10000.0) / d_model)
    )
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq)
    return table


def lora_apply(
    weight: torch.Tensor,
    lora_a: torch.Tensor,
    lora_b: torch.Tensor,
    alpha: float,
    x: torch.Tensor,
    dropout: nn.Module | None = None,
) -> torch.Tensor:
    """W x plus the scaled low-rank update (alpha/r) * B (A x).

    x has shape (..., d_in); weight (d_out, d_in); lora_a (r, d_in);
    lora_b (d_out, r).
    """
    if (
        x.shape[-1] != weight.shape[1]
        or lora_a.shape[1] != weight.shape[1]
        or lora_b.shape[0] != weight.shape[0]
        or lora_b.shape[1] != lora_a.shape[0]
    ):
        raise ShapeMismatchError(
            f"x {tuple(x.shape)}, W {tuple(weight.shape)}, "
            f"A {tuple(lora_a.shape)}, B {tuple(lora_b.shape)}"
        )
    rank = lora_a.shape[0]
    dropped = dropout(x) if dropout is not None else x
    return F.linear(x, weight) + (alpha / rank) * F.linear(F.linear(dropped, lora_a), lora_b)


class LoRALinear(nn.Module):
    """Frozen linear projection with a trainable low-rank bypass.

    lora_B starts at zero, so an untrained layer computes exactly the base
    projection; disabling LoRA gives the same result bit for bit.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.base = nn.Linear(d_in, d_out)
        self.lora_A = nn.Parameter(torch.empty(rank, d_in))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
        nn.init.normal_(self.lora_A, std=0.02)
        self.alpha = alpha
        self.dropout = nn.Dropout(dropout)
        self.enabled = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # Both paths share the bias-free matmul so that a zero lora_B is
        # bit-transparent against the disabled path.
        if not self.enabled:
            return F.linear(x, self.base.weight) + self.base.bias
        return (
            lora_apply(
                self.base.weight, self.lora_A, self.lora_B, self.alpha, x, self.dropout
            )
            + self.base.bias
        )


class Block(nn.Module):
    """Pre-norm transformer block; q and v projections carry LoRA."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.q = LoRALinear(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)
        self.k = nn.Linear(d, d)
        self.v = LoRALinear(d, d, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)
        self.o = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.f1 = nn.Linear(d, cfg.ffn_dim)
        self.f2 = nn.Linear(cfg.ffn_dim, d)

    def forward(self, x: torch.Tensor, attn_bias: torch.Tensor) -> torch.Tensor:
        bsz, length, d = x.shape
        a = self.ln1(x)
        shape = (bsz, length, self.n_heads, self.head_dim)
        q = self.q(a).view(shape).transpose(1, 2)
        k = self.k(a).view(shape).transpose(1, 2)
        v = self.v(a).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim) + attn_bias
        att = torch.softmax(scores, dim=-1)
        x = x + self.o((att @ v).transpose(1, 2).reshape(bsz, length, d))
        return x + self.f2(F.gelu(self.f1(self.ln2(x))))


class SpeechEncoder(nn.Module):
    """Two stride-2 conv layers over mel frames plus a linear projection.

    Stays frozen for its whole life as the stand-in for a pretrained
    acoustic encoder. A pretrained encoder's defining property is that it
    preserves the acoustic content, so the frozen weights are initialized
    as noisy near-identity filters (delta kernels on the center tap) rather
    than pure noise; a purely random frozen stack scrambles the fine
    spectro-temporal patterns that carry prosody.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv1d(cfg.n_mels, cfg.enc_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(cfg.enc_channels, cfg.enc_channels, 3, stride=2, padding=1)
        self.proj = nn.Linear(cfg.enc_channels, cfg.speech_enc_dim)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                nn.init.normal_(conv.weight, std=0.02)
                conv.bias.zero_()
                out_ch, in_ch, kernel = conv.weight.shape
                for ch in range(out_ch):
                    conv.weight[ch, ch % in_ch, kernel // 2] += 1.0
            nn.init.normal_(self.proj.weight, std=0.02)
            self.proj.bias.zero_()
            for ch in range(self.proj.weight.shape[0]):
                self.proj.weight[ch, ch % self.proj.weight.shape[1]] += 1.0

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: (T, n_mels) -> (T', speech_enc_dim)
        x = mel.t().unsqueeze(0)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.proj(x.squeeze(0).t())


class Adapter(nn.Module):
    """Conv subsampling stack and bottleneck mapping speech features to the
    text embedding space; the residual wraps the bottleneck only."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        convs = []
        channels = cfg.speech_enc_dim
        for layer in range(cfg.adapter_conv_layers):
            out_channels = (
                cfg.d_model
                if layer == cfg.adapter_conv_layers - 1
                else cfg.adapter_channels
            )
            convs.append(
                nn.Conv1d(
                    channels,
                    out_channels,
                    cfg.adapter_kernel,
                    stride=cfg.adapter_stride,
                    padding=cfg.adapter_pad,
                )
            )
            channels = out_channels
        self.convs = nn.ModuleList(convs)
        self.down = nn.Linear(cfg.d_model, cfg.bottleneck_rank)
        self.up = nn.Linear(cfg.bottleneck_rank, cfg.d_model)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        # feats: (T, speech_enc_dim) -> (T'', d_model)
        x = feats.t().unsqueeze(0)
        for conv in self.convs:
            if x.shape[-1] == 0:
                raise TooShortError("adapter conv stage would emit length 0")
            x = F.gelu(conv(x))
        y = x.squeeze(0).t()
        return y + self.up(F.gelu(self.down(y)))


@dataclass
class FusedSequence:
    """Text embeddings followed by speech embeddings, boundary recorded."""

    embeddings: torch.Tensor
    n_text: int

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class Logits:
    """Per-position next-token scores with labels and the loss mask."""

    logits: torch.Tensor
    labels: torch.Tensor
    mask: torch.Tensor


class FusionTagger(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.d_model
        self.tok_emb = nn.Embedding(len(vocab), d)
        nn.init.normal_(self.tok_emb.weight, std=1.0 / math.sqrt(d))
        # derived from config, so kept out of checkpoints
        self.register_buffer(
            "pos", sinusoidal_positions(cfg.max_seq_len, d), persistent=False
        )
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, len(vocab), bias=False)
        if cfg.use_speech:
            self.encoder = SpeechEncoder(cfg)
            self.adapter = Adapter(cfg)
        self.double()
        self.apply_partition()

    # -- parameter partition -------------------------------------------------

    @staticmethod
    def group_of(name: str) -> str:
        """Canonical group of a parameter: adapter and LoRA tensors train,
        everything else (base LM, speech encoder) is frozen."""
        if "lora_" in name or name.startswith("adapter."):
            return "trainable"
        return "frozen"

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"frozen": [], "trainable": []}
        for name, _ in self.named_parameters():
            groups[self.group_of(name)].append(name)
        return groups

    def apply_partition(self, train_base: bool = False) -> None:
        """Set requires_grad per group. train_base=True flips the base LM
        (not the speech encoder) to trainable for the text-only stage."""
        for name, param in self.named_parameters():
            if self.group_of(name) == "trainable":
                param.requires_grad_(True)
            elif train_base and not name.startswith("encoder."):
                param.requires_grad_(True)
            else:
                param.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def set_lora_enabled(self, enabled: bool) -> None:
        for module in self.modules():
            if isinstance(module, LoRALinear):
                module.enabled = enabled

    # -- spec operations ------------------------------------------------------

    def embed_text(self, ids, offset: int = 0) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and int(ids.max()) >= len(self.vocab):
            raise UnknownTokenError(f"token id {int(ids.max())} >= vocab size")
        if offset + len(ids) > self.cfg.max_seq_len:
            raise SequenceTooLongError(
                f"{offset + len(ids)} positions > max_seq_len {self.cfg.max_seq_len}"
            )
        scale = math.sqrt(self.cfg.d_model)
        return self.tok_emb(ids) * scale + self.pos[offset : offset + len(ids)]

    def encode_speech(self, mel) -> torch.Tensor:
        if not self.cfg.use_speech:
            raise VoicespanError("text-only model has no speech encoder")
        frames = mel.frames if isinstance(mel, MelFeatures) else mel
        if len(frames) == 0:
            raise TooShortError("empty mel input")
        x = torch.as_tensor(np.asarray(frames), dtype=torch.float64)
        return self.encoder(x)

    def adapt(self, feats: torch.Tensor) -> torch.Tensor:
        if len(feats) == 0:
            raise TooShortError("empty speech features")
        return self.adapter(feats)

    def fuse(self, h_text: torch.Tensor, h_speech: torch.Tensor | None) -> FusedSequence:
        if h_speech is None or h_speech.shape[0] == 0:
            return FusedSequence(h_text, h_text.shape[0])
        if h_text.shape[1] != h_speech.shape[1]:
            raise DimMismatchError(
                f"text dim {h_text.shape[1]} != speech dim {h_speech.shape[1]}"
            )
        return FusedSequence(torch.cat([h_text, h_speech]), h_text.shape[0])

    def forward(self, fused: FusedSequence, target_ids) -> Logits:
        prefix_len = len(fused)
        target_ids = list(target_ids)
        total = prefix_len + len(target_ids)
        if total > self.cfg.max_seq_len:
            raise SequenceTooLongError(f"{total} > max_seq_len {self.cfg.max_seq_len}")
        tgt = self.embed_text(target_ids, offset=prefix_len)
        x = torch.cat([fused.embeddings, tgt]).unsqueeze(0)
        hidden = self._transform(x)
        logits = self.head(self.ln_f(hidden))[0]
        labels = torch.full((total,), self.vocab.pad_id, dtype=torch.long)
        mask = torch.zeros(total, dtype=torch.bool)
        if target_ids:
            labels[prefix_len - 1 : prefix_len - 1 + len(target_ids)] = torch.tensor(
                target_ids, dtype=torch.long
            )
            mask[prefix_len - 1 : prefix_len - 1 + len(target_ids)] = True
        return Logits(logits=logits, labels=labels, mask=mask)

    @torch.no_grad()
    def generate(self, fused: FusedSequence, max_new_tokens: int) -> list[int]:
        """Greedy decode from a forced BOS after the prefix; stops at EOS.

        Ties take the lowest token id. Returns generated ids without the
        BOS or the terminating EOS.
        """
        prefix_len = len(fused)
        if prefix_len + 1 > self.cfg.max_seq_len:
            raise SequenceTooLongError(
                f"prefix {prefix_len} leaves no room (max {self.cfg.max_seq_len})"
            )
        was_training = self.training
        self.eval()
        try:
            seq = torch.cat(
                [fused.embeddings, self.embed_text([self.vocab.bos_id], offset=prefix_len)]
            )
            out: list[int] = []
            for _ in range(max_new_tokens):
                hidden = self._transform(seq.unsqueeze(0))
                logits = self.head(self.ln_f(hidden[0, -1]))
                token = int(np.argmax(logits.numpy()))
                if token == self.vocab.eos_id:
                    break
                out.append(token)
                if seq.shape[0] + 1 > self.cfg.max_seq_len:
                    break
                seq = torch.cat(
                    [seq, self.embed_text([token], offset=seq.shape[0])]
                )
            return out
        finally:
            self.train(was_training)

    # -- batched internals ----------------------------------------------------

    def _transform(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        bsz, length, _ = x.shape
        causal = torch.triu(
            torch.full((length, length), float("-inf"), dtype=torch.float64), diagonal=1
        )
        bias = causal.expand(bsz, 1, length, length)
        if valid is not None:
            key_bias = torch.where(valid, 0.0, float("-inf")).to(torch.float64)
            bias = bias + key_bias[:, None, None, :]
        hidden = x
        for block in self.blocks:
            hidden = block(hidden, bias)
        return hidden

    def batch_logits(self, items: list[tuple[FusedSequence, list[int]]]):
        """Right-padded batch forward. Returns (logits, labels, mask)."""
        lengths = [len(fused) + len(tgt) for fused, tgt in items]
        max_len = max(lengths)
        if max_len > self.cfg.max_seq_len:
            raise SequenceTooLongError(f"{max_len} > max_seq_len {self.cfg.max_seq_len}")
        bsz = len(items)
        d = self.cfg.d_model
        x = torch.zeros(bsz, max_len, d, dtype=torch.float64)
        labels = torch.full((bsz, max_len), self.vocab.pad_id, dtype=torch.long)
        mask = torch.zeros(bsz, max_len, dtype=torch.bool)
        valid = torch.zeros(bsz, max_len, dtype=torch.bool)
        for b, (fused, tgt) in enumerate(items):
            prefix_len = len(fused)
            total = prefix_len + len(tgt)
            row = torch.cat([fused.embeddings, self.embed_text(tgt, offset=prefix_len)])
            x[b, :total] = row
            valid[b, :total] = True
            labels[b, prefix_len - 1 : prefix_len - 1 + len(tgt)] = torch.tensor(
                tgt, dtype=torch.long
            )
            mask[b, prefix_len - 1 : prefix_len - 1 + len(tgt)] = True
        hidden = self._transform(x, valid)
        return self.head(self.ln_f(hidden)), labels, mask

    def count_parameters(self) -> dict[str, int]:
        counts = {"frozen": 0, "trainable": 0}
        for name, param in self.named_parameters():
            counts[self.group_of(name)] += param.numel()
        counts["total"] = counts["frozen"] + counts["trainable"]
        return counts


def loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    token_mean: bool = False,
) -> torch.Tensor:
    """Cross entropy over masked positions: per-sequence token NLLs are
    summed, then averaged over the batch. token_mean=True divides each
    sequence by its masked-token count instead."""
    if logits.dim() == 2:
        logits, targets, mask = (
            logits.unsqueeze(0),
            targets.unsqueeze(0),
            mask.unsqueeze(0),
        )
    if int(mask.sum()) == 0:
        raise EmptyMaskError("loss mask selects no positions")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    per_seq = (nll * mask).sum(dim=-1)
    if token_mean:
        per_seq = per_seq / mask.sum(dim=-1).clamp(min=1)
    return per_seq.mean()
