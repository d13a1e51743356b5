import pytest
import torch

from voicespan.data import CorpusConfig, build_synthetic, split
from voicespan.model import FusionTagger, ModelConfig, Vocab


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """24-example corpus with audio, split 16/4/4, shared across tests."""
    out = tmp_path_factory.mktemp("tiny")
    manifest = build_synthetic(
        CorpusConfig(size=24, ambiguous_fraction=0.5, seed=123), out
    )
    train, dev, test = split(manifest, (16 / 24, 4 / 24, 4 / 24), seed=123)
    return {"dir": out, "all": manifest, "train": train, "dev": dev, "test": test}


@pytest.fixture()
def tiny_model(tiny_corpus):
    vocab = Vocab.from_corpus([ex.tokens for ex in tiny_corpus["all"].rows])
    torch.manual_seed(11)
    return FusionTagger(ModelConfig(), vocab)
