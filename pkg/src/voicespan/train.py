"""Fine-tuning loop, gradient checking, and checkpoint serialization."""

from __future__ import annotations

import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .core import IoFailureError, VoicespanError
from .data import Manifest
from .model import FusionTagger, ModelConfig, Vocab, loss

CHECKPOINT_MAGIC = "voicespan-checkpoint"
CHECKPOINT_VERSION = 1


class DivergedLossError(VoicespanError):
    pass


class VersionMismatchError(VoicespanError):
    pass


class CorruptFileError(VoicespanError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 5e-5
    batch_size: int = 8
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float = 1.0
    eval_every: int = 1
    token_mean: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_precision: float
    dev_recall: float
    dev_f1: float
    wall_seconds: float

    def to_line(self) -> str:
        return "\t".join(
            [
                str(self.epoch),
                f"{self.train_loss:.6f}",
                f"{self.dev_loss:.6f}",
                f"{self.dev_precision:.4f}",
                f"{self.dev_recall:.4f}",
                f"{self.dev_f1:.4f}",
                f"{self.wall_seconds:.2f}",
            ]
        )


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    best_epoch: int
    best_f1: float
    best_state: dict = field(repr=False, default_factory=dict)


def make_optimizer(model: FusionTagger, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.trainable_parameters(),
        lr=cfg.learning_rate,
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_step(
    model: FusionTagger,
    optimizer: torch.optim.Optimizer,
    items,
    cfg: TrainConfig,
) -> float:
    logits, labels, mask = model.batch_logits(items)
    step_loss = loss(logits, labels, mask, token_mean=cfg.token_mean)
    if not torch.isfinite(step_loss):
        raise DivergedLossError(f"non-finite loss {step_loss.item()!r}")
    optimizer.zero_grad()
    step_loss.backward()
    torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), cfg.grad_clip)
    optimizer.step()
    return float(step_loss.detach())


def _dev_loss(model: FusionTagger, items, batch_size: int, token_mean: bool) -> float:
    was_training = model.training
    model.eval()
    losses = []
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            batch = items[start : start + batch_size]
            logits, labels, mask = model.batch_logits(batch)
            losses.append(float(loss(logits, labels, mask, token_mean=token_mean)))
    model.train(was_training)
    return float(np.mean(losses))


def train(
    model: FusionTagger,
    train_manifest: Manifest,
    dev_manifest: Manifest,
    base_dir: Path | str,
    cfg: TrainConfig,
    train_base: bool = False,
) -> TrainResult:
    """Run the fine-tuning loop; only the trainable group is updated.

    Each epoch shuffles deterministically, pads batches to their longest
    sequence, clips the global trainable gradient norm, then measures dev
    loss and dev F1 through the full decode -> parse -> align -> score
    pipeline (never teacher forcing). The best-dev-F1 parameter state is
    retained, earliest epoch winning ties.
    """
    torch.manual_seed(cfg.seed)
    model.apply_partition(train_base=train_base)
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)

    use_speech = model.cfg.use_speech
    train_feats = (
        pipeline.encoder_features(model, train_manifest, base_dir) if use_speech else None
    )
    dev_feats = (
        pipeline.encoder_features(model, dev_manifest, base_dir) if use_speech else None
    )
    train_targets = [
        pipeline.target_token_ids(model.vocab, ex) for ex in train_manifest.rows
    ]
    dev_items_spec = [
        (ex, pipeline.target_token_ids(model.vocab, ex)) for ex in dev_manifest.rows
    ]

    metrics: list[EpochMetrics] = []
    best_f1 = -1.0
    best_epoch = -1
    best_state: dict = {}
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        step_losses = []
        for batch_idx in _epoch_batches(len(train_manifest.rows), cfg.batch_size, rng):
            items = [
                (
                    pipeline.build_fused(
                        model, train_manifest.rows[i], train_feats
                    ),
                    train_targets[i],
                )
                for i in sorted(batch_idx)
            ]
            step_losses.append(train_step(model, optimizer, items, cfg))
        with torch.no_grad():
            dev_items = [
                (pipeline.build_fused(model, ex, dev_feats), tgt)
                for ex, tgt in dev_items_spec
            ]
        dev_loss = _dev_loss(model, dev_items, cfg.batch_size, cfg.token_mean)
        model.eval()
        outcome = pipeline.evaluate(model, dev_manifest, dev_feats)
        model.train()
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=float(np.mean(step_losses)),
                dev_loss=dev_loss,
                dev_precision=outcome.report.precision,
                dev_recall=outcome.report.recall,
                dev_f1=outcome.report.f1,
                wall_seconds=time.perf_counter() - t0,
            )
        )
        if outcome.report.f1 > best_f1:
            best_f1 = outcome.report.f1
            best_epoch = epoch
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
    return TrainResult(
        metrics=metrics, best_epoch=best_epoch, best_f1=best_f1, best_state=best_state
    )


def write_metrics_log(metrics: list[EpochMetrics], path: Path | str) -> None:
    header = "epoch\ttrain_loss\tdev_loss\tdev_P\tdev_R\tdev_F1\twall_seconds"
    lines = [header] + [m.to_line() for m in metrics]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- gradient checking ---------------------------------------------------------


def grad_check(
    model_cfg: ModelConfig | None = None,
    seed: int = 0,
    samples_per_tensor: int = 20,
    min_total: int = 200,
    step: float = 1e-5,
    only: str | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Builds a fixed 2-example micro-batch on a small randomized model (all
    trainable tensors perturbed away from init so low-rank gradients are
    non-vacuous), then samples coordinates from every trainable tensor.
    Relative error uses an absolute floor of 1e-6 to keep near-zero
    gradients from amplifying finite-difference noise. `only` restricts the
    check to tensors whose name contains the substring.
    """
    cfg = model_cfg or ModelConfig(max_seq_len=96)
    torch.manual_seed(seed)
    vocab = Vocab.from_corpus([["alpha", "beta", "gamma", "delta"]])
    model = FusionTagger(cfg, vocab)
    model.apply_partition(train_base=False)
    model.eval()

    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.requires_grad:
                param.add_(
                    torch.as_tensor(
                        0.05 * rng.standard_normal(tuple(param.shape)),
                        dtype=torch.float64,
                    )
                )

    items = []
    for n_frames, n_text, n_tgt in ((37, 5, 7), (52, 6, 9)):
        mel = rng.standard_normal((n_frames, cfg.n_mels))
        with torch.no_grad():
            feats = model.encode_speech(mel)
        text_ids = rng.integers(0, len(vocab), n_text).tolist()
        target_ids = rng.integers(0, len(vocab), n_tgt).tolist()
        items.append((feats, text_ids, target_ids))

    def total_loss() -> torch.Tensor:
        batch = []
        for feats, text_ids, target_ids in items:
            h_text = model.embed_text(text_ids)
            fused = model.fuse(h_text, model.adapt(feats))
            batch.append((fused, target_ids))
        logits, labels, mask = model.batch_logits(batch)
        return loss(logits, labels, mask)

    model.zero_grad()
    total_loss().backward()
    tensors = [
        (name, p) for name, p in model.named_parameters() if p.requires_grad
    ]
    if only is not None:
        tensors = [(name, p) for name, p in tensors if only in name]
    if not tensors:
        raise ValueError(f"no trainable tensors match {only!r}")
    per_tensor = max(
        samples_per_tensor, -(-min_total // len(tensors))
    )
    max_err = 0.0
    for _, param in tensors:
        flat = param.detach().view(-1)
        grad = param.grad.detach().view(-1)
        k = min(per_tensor, flat.numel())
        coords = rng.choice(flat.numel(), size=k, replace=False)
        for idx in coords:
            idx = int(idx)
            original = float(flat[idx])
            with torch.no_grad():
                flat[idx] = original + step
                plus = float(total_loss())
                flat[idx] = original - step
                minus = float(total_loss())
                flat[idx] = original
            numeric = (plus - minus) / (2 * step)
            analytic = float(grad[idx])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            max_err = max(max_err, abs(analytic - numeric) / denom)
    return max_err


# -- checkpoint serialization ---------------------------------------------------


def group_hash(model: FusionTagger, group: str) -> str:
    """SHA-256 over a parameter group's raw bytes, in name order."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if model.group_of(name) == group:
            digest.update(param.detach().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    model: FusionTagger, path: Path | str, meta: dict | None = None
) -> None:
    """Text header (config, vocab, tensor table) + float64 LE blobs."""
    records = []
    offset = 0
    tensors = list(model.named_parameters())
    for name, param in tensors:
        shape = ",".join(str(s) for s in param.shape) or "scalar"
        numel = param.numel()
        records.append(
            f"tensor {name} {model.group_of(name)} {shape} {offset} {numel}"
        )
        offset += numel * 8
    header_lines = [
        f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}",
        f"config {model.cfg.to_json()}",
        f"vocab {json.dumps(model.vocab.tokens)}",
        f"meta {json.dumps(meta or {}, sort_keys=True)}",
        *records,
        f"data {offset}",
    ]
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header_lines) + "\n").encode("utf-8"))
            for _, param in tensors:
                fh.write(
                    param.detach().numpy().astype("<f8", copy=False).tobytes()
                )
    except OSError as exc:
        raise IoFailureError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: Path | str) -> tuple[FusionTagger, dict]:
    """Rebuild the model from a checkpoint; validates version, the tensor
    table, and the data section length."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailureError(f"cannot read checkpoint {path}: {exc}") from exc
    stream = io.BytesIO(blob)

    def next_line() -> str:
        line = stream.readline()
        if not line.endswith(b"\n"):
            raise CorruptFileError("truncated header")
        return line.decode("utf-8").rstrip("\n")

    first = next_line()
    if not first.startswith(CHECKPOINT_MAGIC):
        raise CorruptFileError(f"bad magic line {first!r}")
    if first != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
        raise VersionMismatchError(f"unsupported checkpoint version: {first!r}")

    def expect(keyword: str) -> str:
        line = next_line()
        if not line.startswith(keyword + " "):
            raise CorruptFileError(f"expected {keyword!r} line, got {line!r}")
        return line[len(keyword) + 1 :]

    try:
        cfg = ModelConfig.from_json(expect("config"))
        vocab = Vocab(json.loads(expect("vocab")))
        meta = json.loads(expect("meta"))
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptFileError(f"bad header payload: {exc}") from exc

    records = []
    while True:
        line = next_line()
        if line.startswith("data "):
            data_bytes = int(line.split()[1])
            break
        if not line.startswith("tensor "):
            raise CorruptFileError(f"unexpected header line {line!r}")
        parts = line.split()
        if len(parts) != 6:
            raise CorruptFileError(f"bad tensor record {line!r}")
        _, name, group, shape_s, offset_s, numel_s = parts
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        records.append((name, group, shape, int(offset_s), int(numel_s)))

    data = blob[stream.tell() :]
    if len(data) != data_bytes:
        raise CorruptFileError(
            f"data section is {len(data)} bytes, header says {data_bytes}"
        )
    expected_offset = 0
    for name, _, shape, offset, numel in records:
        if offset != expected_offset or numel != int(np.prod(shape or (1,))):
            raise CorruptFileError(f"inconsistent tensor record for {name}")
        expected_offset = offset + numel * 8

    with torch.random.fork_rng():
        torch.manual_seed(0)
        model = FusionTagger(cfg, vocab)
    state = {}
    for name, group, shape, offset, numel in records:
        arr = np.frombuffer(data, dtype="<f8", count=numel, offset=offset)
        state[name] = torch.as_tensor(arr.copy()).reshape(shape)
        if model.group_of(name) != group:
            raise CorruptFileError(f"group tag mismatch for {name}")
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptFileError(f"tensor table does not match model: {exc}") from exc
    model.apply_partition()
    return model, meta


def load_base_weights(model: FusionTagger, base_ckpt: Path | str) -> dict:
    """Copy the LM tensors of a text-only checkpoint into a fusion model.

    Speech encoder and adapter tensors keep their fresh initialization; the
    checkpoint must not contain any tensor the model lacks.
    """
    base_model, meta = load_checkpoint(base_ckpt)
    result = model.load_state_dict(base_model.state_dict(), strict=False)
    if result.unexpected_keys:
        raise CorruptFileError(
            f"base checkpoint has unexpected tensors: {result.unexpected_keys}"
        )
    for key in result.missing_keys:
        if not (key.startswith("encoder.") or key.startswith("adapter.")):
            raise CorruptFileError(f"base checkpoint is missing LM tensor {key}")
    return meta
