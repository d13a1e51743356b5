import math

import numpy as np
import pytest
import torch

from voicespan.audio import TooShortError
from voicespan.model import (
    BOS,
    EOS,
    PAD,
    UNK,
    DimMismatchError,
    EmptyMaskError,
    FusionTagger,
    ModelConfig,
    SequenceTooLongError,
    ShapeMismatchError,
    UnknownTokenError,
    Vocab,
    adapter_output_length,
    conv_out_len,
    encoder_output_length,
    lora_apply,
    loss,
)
from voicespan.template import MARKERS


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    vocab = Vocab.from_corpus([["alpha", "beta", "gamma", "delta", "eps"]])
    return FusionTagger(ModelConfig(), vocab)


def random_fused(model, rng, n_text=6, n_frames=60):
    ids = rng.integers(0, len(model.vocab), n_text).tolist()
    h_text = model.embed_text(ids)
    mel = rng.standard_normal((n_frames, model.cfg.n_mels))
    with torch.no_grad():
        h_speech = model.adapt(model.encode_speech(mel))
    return model.fuse(h_text, h_speech)


class TestVocab:
    def test_layout(self, model):
        vocab = model.vocab
        assert vocab.tokens[:4] == [PAD, BOS, EOS, UNK]
        assert set(MARKERS) <= set(vocab.tokens)
        assert "extract" in vocab.tokens and ":" in vocab.tokens

    def test_unknown_maps_to_unk(self, model):
        assert model.vocab.encode(["zzz-not-there"]) == [model.vocab.unk_id]

    def test_round_trip(self, model):
        ids = model.vocab.encode(["alpha", "<pos>", "beta"])
        assert model.vocab.decode(ids) == ["alpha", "<pos>", "beta"]


class TestShapes:
    def test_conv_length_law(self):
        for length in range(1, 1001):
            assert conv_out_len(length) == (length + 2 - 3) // 2 + 1

    def test_encoder_chain(self, model):
        rng = np.random.default_rng(0)
        for frames, expect in ((98, 25), (4, 1)):
            feats = model.encode_speech(rng.standard_normal((frames, 80)))
            assert feats.shape == (expect, model.cfg.speech_enc_dim)
            assert encoder_output_length(frames) == expect

    def test_adapter_chain(self, model):
        rng = np.random.default_rng(1)
        for frames, expect in ((100, 13), (8, 1), (1, 1)):
            out = model.adapt(
                torch.as_tensor(
                    rng.standard_normal((frames, model.cfg.speech_enc_dim))
                )
            )
            assert out.shape == (expect, model.cfg.d_model)
            assert adapter_output_length(frames) == expect

    def test_empty_speech_rejected(self, model):
        with pytest.raises(TooShortError):
            model.encode_speech(np.zeros((0, 80)))
        with pytest.raises(TooShortError):
            model.adapt(torch.zeros(0, 64))

    def test_embed_shape_and_determinism(self, model):
        ids = [5, 6, 7]
        one = model.embed_text(ids)
        assert one.shape == (3, 64)
        assert torch.equal(one, model.embed_text(ids))

    def test_unknown_token_id(self, model):
        with pytest.raises(UnknownTokenError):
            model.embed_text([len(model.vocab)])

    def test_fuse_shapes(self, model):
        h_text = model.embed_text([4, 5, 6, 7, 8, 9, 10, 11, 12, 13])
        h_speech = torch.zeros(13, 64, dtype=torch.float64)
        fused = model.fuse(h_text, h_speech)
        assert fused.embeddings.shape == (23, 64)
        assert fused.n_text == 10

    def test_fuse_empty_speech_is_identity(self, model):
        h_text = model.embed_text([4, 5])
        fused = model.fuse(h_text, None)
        assert torch.equal(fused.embeddings, h_text)
        fused2 = model.fuse(h_text, torch.zeros(0, 64, dtype=torch.float64))
        assert torch.equal(fused2.embeddings, h_text)

    def test_fuse_dim_mismatch(self, model):
        with pytest.raises(DimMismatchError):
            model.fuse(model.embed_text([4]), torch.zeros(3, 32, dtype=torch.float64))


class TestLora:
    def test_zero_b_is_identity(self):
        rng = np.random.default_rng(0)
        weight = torch.as_tensor(rng.standard_normal((8, 8)))
        lora_a = torch.as_tensor(rng.standard_normal((2, 8)))
        lora_b = torch.zeros(8, 2, dtype=torch.float64)
        x = torch.as_tensor(rng.standard_normal(8))
        assert torch.equal(
            lora_apply(weight, lora_a, lora_b, 16.0, x), x @ weight.t()
        )

    def test_zero_base_gives_scaled_low_rank(self):
        rng = np.random.default_rng(1)
        lora_a = torch.as_tensor(rng.standard_normal((4, 8)))
        lora_b = torch.as_tensor(rng.standard_normal((8, 4)))
        x = torch.as_tensor(rng.standard_normal(8))
        out = lora_apply(torch.zeros(8, 8, dtype=torch.float64), lora_a, lora_b, 4.0, x)
        assert torch.allclose(out, lora_b @ (lora_a @ x))

    def test_scale_factor_two(self):
        # rank 8 with alpha 16 doubles the low-rank path
        rng = np.random.default_rng(2)
        lora_a = torch.as_tensor(rng.standard_normal((8, 8)))
        lora_b = torch.as_tensor(rng.standard_normal((8, 8)))
        x = torch.as_tensor(rng.standard_normal(8))
        zero = torch.zeros(8, 8, dtype=torch.float64)
        out = lora_apply(zero, lora_a, lora_b, 16.0, x)
        assert torch.allclose(out, 2.0 * (lora_b @ (lora_a @ x)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            lora_apply(
                torch.zeros(8, 8, dtype=torch.float64),
                torch.zeros(2, 7, dtype=torch.float64),
                torch.zeros(8, 2, dtype=torch.float64),
                16.0,
                torch.zeros(8, dtype=torch.float64),
            )

    def test_model_level_transparency(self, model):
        model.eval()
        rng = np.random.default_rng(3)
        for trial in range(5):
            fused = random_fused(model, rng)
            tgt = rng.integers(0, len(model.vocab), 6).tolist()
            with torch.no_grad():
                on = model.forward(fused, tgt).logits
                model.set_lora_enabled(False)
                off = model.forward(fused, tgt).logits
                model.set_lora_enabled(True)
            assert torch.equal(on, off)


class TestForward:
    def test_logit_and_mask_shapes(self, model):
        rng = np.random.default_rng(4)
        h_text = model.embed_text(rng.integers(0, len(model.vocab), 10).tolist())
        h_speech = torch.as_tensor(rng.standard_normal((13, 64)))
        fused = model.fuse(h_text, h_speech)
        assert len(fused) == 23
        tgt = rng.integers(0, len(model.vocab), 12).tolist()
        out = model.forward(fused, tgt)
        assert out.logits.shape == (35, len(model.vocab))
        assert int(out.mask.sum()) == 12
        first = int(out.mask.nonzero()[0])
        assert first == len(fused) - 1

    def test_rows_normalize(self, model):
        rng = np.random.default_rng(5)
        out = model.forward(random_fused(model, rng), [4, 5, 6])
        sums = torch.softmax(out.logits, dim=-1).sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_causality(self, model):
        model.eval()
        rng = np.random.default_rng(6)
        fused = random_fused(model, rng)
        tgt = rng.integers(4, len(model.vocab), 8).tolist()
        with torch.no_grad():
            base = model.forward(fused, tgt).logits
            changed = list(tgt)
            changed[5] = (changed[5] + 1) % len(model.vocab)
            other = model.forward(fused, changed).logits
        boundary = len(fused) + 5
        assert torch.equal(base[:boundary], other[:boundary])
        assert not torch.equal(base[boundary:], other[boundary:])

    def test_sequence_too_long(self, model):
        fused = model.fuse(model.embed_text([4] * 10), None)
        with pytest.raises(SequenceTooLongError):
            model.forward(fused, [4] * (model.cfg.max_seq_len - 9))

    def test_text_only_degenerate_case(self, model):
        # empty speech block must reproduce a pure text LM forward
        model.eval()
        ids = [4, 5, 6, 7]
        tgt = [1, 8, 9, 2]
        with torch.no_grad():
            fused = model.fuse(model.embed_text(ids), None)
            via_fuse = model.forward(fused, tgt).logits
            direct = model.forward(
                type(fused)(model.embed_text(ids), 4), tgt
            ).logits
        assert torch.equal(via_fuse, direct)

    def test_batch_matches_single(self, model):
        model.eval()
        rng = np.random.default_rng(7)
        items = []
        singles = []
        for n_text, n_tgt in ((4, 5), (7, 3), (6, 8)):
            fused = random_fused(model, rng, n_text=n_text)
            tgt = rng.integers(0, len(model.vocab), n_tgt).tolist()
            items.append((fused, tgt))
            with torch.no_grad():
                singles.append(model.forward(fused, tgt))
        with torch.no_grad():
            logits, labels, mask = model.batch_logits(items)
        for b, single in enumerate(singles):
            n = single.logits.shape[0]
            assert torch.allclose(logits[b, :n], single.logits, atol=1e-12)
            assert torch.equal(labels[b, :n], single.labels)
            assert torch.equal(mask[b, :n], single.mask)
            assert not mask[b, n:].any()


class TestLoss:
    def test_uniform_logits(self):
        vocab_size = 64
        logits = torch.zeros(1, vocab_size, dtype=torch.float64)
        value = loss(logits, torch.tensor([3]), torch.tensor([True]))
        assert float(value) == pytest.approx(math.log(64), abs=1e-9)

    def test_confident_logits_approach_zero(self):
        logits = torch.full((1, 16), -1e4, dtype=torch.float64)
        logits[0, 5] = 1e4
        value = loss(logits, torch.tensor([5]), torch.tensor([True]))
        assert float(value) < 1e-8

    def test_batch_mean_of_sequence_sums(self):
        rng = np.random.default_rng(8)
        logits = torch.as_tensor(rng.standard_normal((1, 6, 16)))
        targets = torch.as_tensor(rng.integers(0, 16, (1, 6)))
        mask = torch.tensor([[False, True, True, True, False, False]])
        single = loss(logits, targets, mask)
        doubled = loss(
            logits.repeat(2, 1, 1), targets.repeat(2, 1), mask.repeat(2, 1)
        )
        assert float(single) == pytest.approx(float(doubled), abs=1e-12)

    def test_token_mean_flag(self):
        rng = np.random.default_rng(9)
        logits = torch.as_tensor(rng.standard_normal((1, 4, 16)))
        targets = torch.as_tensor(rng.integers(0, 16, (1, 4)))
        mask = torch.tensor([[True, True, False, False]])
        summed = loss(logits, targets, mask)
        mean = loss(logits, targets, mask, token_mean=True)
        assert float(mean) == pytest.approx(float(summed) / 2, rel=1e-12)

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            loss(
                torch.zeros(1, 4, 8, dtype=torch.float64),
                torch.zeros(1, 4, dtype=torch.long),
                torch.zeros(1, 4, dtype=torch.bool),
            )


class TestGenerate:
    def test_zero_budget(self, model):
        rng = np.random.default_rng(10)
        assert model.generate(random_fused(model, rng), 0) == []

    def test_deterministic(self, model):
        rng = np.random.default_rng(11)
        fused = random_fused(model, rng)
        assert model.generate(fused, 10) == model.generate(fused, 10)

    def test_emits_only_vocab_ids(self, model):
        rng = np.random.default_rng(12)
        out = model.generate(random_fused(model, rng), 10)
        assert all(0 <= tok < len(model.vocab) for tok in out)
        assert model.vocab.eos_id not in out

    def test_prefix_too_long(self, model):
        embeddings = torch.zeros(
            model.cfg.max_seq_len, model.cfg.d_model, dtype=torch.float64
        )
        from voicespan.model import FusedSequence

        with pytest.raises(SequenceTooLongError):
            model.generate(FusedSequence(embeddings, 4), 4)


class TestPartition:
    def test_every_tensor_in_exactly_one_group(self, model):
        groups = model.parameter_groups()
        names = {name for name, _ in model.named_parameters()}
        assert set(groups["frozen"]) | set(groups["trainable"]) == names
        assert not set(groups["frozen"]) & set(groups["trainable"])

    def test_trainable_is_adapter_and_lora_only(self, model):
        for name in model.parameter_groups()["trainable"]:
            assert "lora_" in name or name.startswith("adapter.")
        for name in model.parameter_groups()["frozen"]:
            assert "lora_" not in name and not name.startswith("adapter.")

    def test_lora_b_zero_init(self, model):
        for name, param in model.named_parameters():
            if "lora_B" in name:
                assert torch.equal(param, torch.zeros_like(param))

    def test_trainable_fraction_under_15_percent(self, model):
        counts = model.count_parameters()
        assert counts["trainable"] / counts["total"] < 0.15

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=30, n_heads=4)
        with pytest.raises(ValueError):
            ModelConfig(lora_rank=0)
