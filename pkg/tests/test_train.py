import numpy as np
import pytest
import torch

from voicespan import pipeline
from voicespan.model import FusionTagger, ModelConfig, Vocab
from voicespan.train import (
    CorruptFileError,
    DivergedLossError,
    TrainConfig,
    VersionMismatchError,
    _epoch_batches,
    grad_check,
    group_hash,
    load_base_weights,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train,
    train_step,
    write_metrics_log,
)


class TestConfig:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 15
        assert cfg.learning_rate == 5e-5
        assert cfg.batch_size == 8
        assert cfg.weight_decay == 0.01
        assert cfg.betas == (0.9, 0.999)
        assert cfg.eps == 1e-8
        assert cfg.grad_clip == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)


class TestBatching:
    def test_sixteen_examples_batch_eight_is_two_steps(self):
        rng = np.random.default_rng(0)
        batches = list(_epoch_batches(16, 8, rng))
        assert len(batches) == 2
        assert sorted(int(i) for b in batches for i in b) == list(range(16))

    def test_shuffle_deterministic(self):
        one = [b.tolist() for b in _epoch_batches(10, 4, np.random.default_rng(5))]
        two = [b.tolist() for b in _epoch_batches(10, 4, np.random.default_rng(5))]
        assert one == two


class TestGradCheck:
    def test_all_trainable_tensors(self):
        assert grad_check(seed=0) < 1e-3

    def test_adapter_subset(self):
        assert grad_check(seed=1, only="adapter.", min_total=60) < 1e-3

    def test_lora_subset(self):
        assert grad_check(seed=2, only="lora_", min_total=60) < 1e-3


def _fit(model, corpus, epochs=1, lr=1e-3, train_base=False, seed=0):
    cfg = TrainConfig(epochs=epochs, learning_rate=lr, batch_size=8, seed=seed)
    return train(
        model,
        corpus["train"],
        corpus["dev"],
        base_dir=corpus["dir"],
        cfg=cfg,
        train_base=train_base,
    )


class TestTrainLoop:
    def test_freeze_contract(self, tiny_corpus, tiny_model):
        frozen_before = group_hash(tiny_model, "frozen")
        trainable_before = group_hash(tiny_model, "trainable")
        _fit(tiny_model, tiny_corpus, epochs=2)
        assert group_hash(tiny_model, "frozen") == frozen_before
        assert group_hash(tiny_model, "trainable") != trainable_before

    def test_text_only_stage_trains_base_but_not_encoder(self, tiny_corpus):
        vocab = Vocab.from_corpus([ex.tokens for ex in tiny_corpus["all"].rows])
        torch.manual_seed(3)
        model = FusionTagger(ModelConfig(use_speech=False), vocab)
        before = group_hash(model, "frozen")
        _fit(model, tiny_corpus, train_base=True)
        assert group_hash(model, "frozen") != before

    def test_metrics_log_and_determinism(self, tiny_corpus, tmp_path):
        vocab = Vocab.from_corpus([ex.tokens for ex in tiny_corpus["all"].rows])
        results = []
        for _ in range(2):
            torch.manual_seed(7)
            model = FusionTagger(ModelConfig(), vocab)
            results.append(_fit(model, tiny_corpus, epochs=2, seed=9))
        fields = lambda res: [
            (m.epoch, m.train_loss, m.dev_loss, m.dev_f1) for m in res.metrics
        ]
        assert fields(results[0]) == fields(results[1])
        write_metrics_log(results[0].metrics, tmp_path / "metrics.tsv")
        lines = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert lines[0].split("\t") == [
            "epoch", "train_loss", "dev_loss", "dev_P", "dev_R", "dev_F1",
            "wall_seconds",
        ]
        assert len(lines) == 3

    def test_best_state_tracks_dev_f1(self, tiny_corpus, tiny_model):
        result = _fit(tiny_model, tiny_corpus, epochs=2)
        best = max(m.dev_f1 for m in result.metrics)
        assert result.best_f1 == best
        assert result.metrics[result.best_epoch - 1].dev_f1 == best

    def test_diverged_loss_detected(self, tiny_corpus, tiny_model):
        with torch.no_grad():
            tiny_model.adapter.up.weight.fill_(float("inf"))
        optimizer = make_optimizer(tiny_model, TrainConfig())
        ex = tiny_corpus["train"].rows[0]
        feats = pipeline.encoder_features(
            tiny_model, tiny_corpus["train"], tiny_corpus["dir"]
        )
        items = [
            (
                pipeline.build_fused(tiny_model, ex, feats),
                pipeline.target_token_ids(tiny_model.vocab, ex),
            )
        ]
        with pytest.raises(DivergedLossError):
            train_step(tiny_model, optimizer, items, TrainConfig())


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_model, path, meta={"stage": "test"})
        loaded, meta = load_checkpoint(path)
        assert meta == {"stage": "test"}
        assert loaded.cfg == tiny_model.cfg
        assert loaded.vocab.tokens == tiny_model.vocab.tokens
        for (name_a, a), (name_b, b) in zip(
            tiny_model.named_parameters(), loaded.named_parameters()
        ):
            assert name_a == name_b
            assert torch.equal(a, b)

    def test_round_trip_forward_identical(self, tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_model, path)
        loaded, _ = load_checkpoint(path)
        tiny_model.eval()
        loaded.eval()
        ids = [5, 6, 7, 8]
        tgt = [1, 9, 2]
        with torch.no_grad():
            a = tiny_model.forward(tiny_model.fuse(tiny_model.embed_text(ids), None), tgt)
            b = loaded.forward(loaded.fuse(loaded.embed_text(ids), None), tgt)
        assert torch.equal(a.logits, b.logits)

    def test_truncated_file(self, tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 999])
        with pytest.raises(CorruptFileError):
            load_checkpoint(path)

    def test_version_bump(self, tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_model, path)
        blob = path.read_bytes().replace(b"-checkpoint v1\n", b"-checkpoint v2\n", 1)
        path.write_bytes(blob)
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint\n")
        with pytest.raises(CorruptFileError):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "a.ckpt", meta={"k": 1})
        save_checkpoint(tiny_model, tmp_path / "b.ckpt", meta={"k": 1})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


class TestBaseWeights:
    def test_text_only_base_into_fusion_model(self, tiny_corpus, tmp_path):
        vocab = Vocab.from_corpus([ex.tokens for ex in tiny_corpus["all"].rows])
        torch.manual_seed(1)
        base = FusionTagger(ModelConfig(use_speech=False), vocab)
        names = {n for n, _ in base.named_parameters()}
        assert not any(n.startswith(("encoder.", "adapter.")) for n in names)
        save_checkpoint(base, tmp_path / "base.ckpt")

        torch.manual_seed(2)
        fusion = FusionTagger(ModelConfig(use_speech=True), vocab)
        load_base_weights(fusion, tmp_path / "base.ckpt")
        base_params = dict(base.named_parameters())
        for name, param in fusion.named_parameters():
            if name in base_params:
                assert torch.equal(param, base_params[name])

    def test_fusion_checkpoint_rejected_as_base_for_text_only(
        self, tiny_corpus, tmp_path
    ):
        vocab = Vocab.from_corpus([ex.tokens for ex in tiny_corpus["all"].rows])
        torch.manual_seed(1)
        fusion = FusionTagger(ModelConfig(use_speech=True), vocab)
        save_checkpoint(fusion, tmp_path / "fusion.ckpt")
        text_only = FusionTagger(ModelConfig(use_speech=False), vocab)
        with pytest.raises(CorruptFileError):
            load_base_weights(text_only, tmp_path / "fusion.ckpt")
