import torch

from voicespan import pipeline
from voicespan.core import OpinionSpan, Polarity
from voicespan.model import PROMPT_TOKENS
from voicespan.template import encode_tagged, tagged_to_tokens


class TestTargets:
    def test_layout(self, tiny_model):
        vocab = tiny_model.vocab
        from voicespan.core import Example

        example = Example(
            id="x",
            tokens=["the", "movie", "was", "great"],
            gold={OpinionSpan(3, 4, Polarity.POS)},
        )
        ids = pipeline.target_token_ids(vocab, example)
        assert ids[0] == vocab.bos_id
        assert ids[-1] == vocab.eos_id
        middle = vocab.decode(ids[1:-1])
        assert middle == tagged_to_tokens(encode_tagged(example.tokens, example.gold))

    def test_prompt_prefix(self, tiny_model):
        from voicespan.core import Example

        example = Example(id="x", tokens=["fine"])
        ids = pipeline.prompt_ids(tiny_model.vocab, example)
        assert tiny_model.vocab.decode(ids)[:3] == PROMPT_TOKENS


class TestFeatures:
    def test_encoder_features_cover_manifest(self, tiny_corpus, tiny_model):
        feats = pipeline.encoder_features(
            tiny_model, tiny_corpus["dev"], tiny_corpus["dir"]
        )
        assert set(feats) == {ex.id for ex in tiny_corpus["dev"].rows}
        for tensor in feats.values():
            assert tensor.dtype == torch.float64
            assert tensor.shape[1] == tiny_model.cfg.speech_enc_dim

    def test_build_fused_boundary(self, tiny_corpus, tiny_model):
        ex = tiny_corpus["dev"].rows[0]
        feats = pipeline.encoder_features(
            tiny_model, tiny_corpus["dev"], tiny_corpus["dir"]
        )
        fused = pipeline.build_fused(tiny_model, ex, feats)
        assert fused.n_text == len(PROMPT_TOKENS) + len(ex.tokens)
        assert len(fused) > fused.n_text
        text_only = pipeline.build_fused(tiny_model, ex, None)
        assert len(text_only) == text_only.n_text


class TestDecode:
    def test_untrained_model_decodes_totally(self, tiny_corpus, tiny_model):
        # garbage generations must still parse, align, and score
        tiny_model.eval()
        outcome = pipeline.evaluate(tiny_model, tiny_corpus["dev"], None)
        assert len(outcome.predictions) == len(tiny_corpus["dev"].rows)
        assert 0.0 <= outcome.report.f1 <= 1.0
        assert outcome.parse_failures >= 0
        assert outcome.spans_dropped >= 0

    def test_subset_reports(self, tiny_corpus, tiny_model):
        tiny_model.eval()
        outcome = pipeline.evaluate(
            tiny_model, tiny_corpus["dev"], None, with_subsets=True
        )
        assert set(outcome.subset_reports) == {"ambiguous", "unambiguous"}

    def test_decode_deterministic(self, tiny_corpus, tiny_model):
        tiny_model.eval()
        ex = tiny_corpus["dev"].rows[0]
        one = pipeline.decode_example(tiny_model, ex, None)
        two = pipeline.decode_example(tiny_model, ex, None)
        assert one.tagged == two.tagged
        assert one.spans == two.spans
