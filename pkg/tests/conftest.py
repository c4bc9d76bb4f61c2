import numpy as np
import pytest

from usted.corpus import CorruptionConfig, synth_text_corpus
from usted.features import render_speech
from usted.model import Model, ModelConfig, TaskSlot
from usted.tasks import Batch, Modality, SpeechDataset, TaskRegistry, TaskSpec, TextDataset
from usted.tokenizer import train_subword


@pytest.fixture(scope="session")
def sentences():
    return synth_text_corpus(seed=11, n=80).english


@pytest.fixture(scope="session")
def vocab(sentences):
    return train_subword(sentences, 60)


@pytest.fixture(scope="session")
def short_sentences(sentences):
    return sorted(sentences, key=lambda s: (len(s), s))[:8]


@pytest.fixture
def registry():
    return TaskRegistry([
        TaskSpec("asr", Modality.SPEECH),
        TaskSpec("mlm", Modality.TEXT, vocabulary="text", corruption=CorruptionConfig(mask_rate=0.4)),
    ])


@pytest.fixture
def datasets(registry, short_sentences, vocab):
    rng = np.random.default_rng(0)
    speech = SpeechDataset(0, [render_speech(s, 0.05, rng) for s in short_sentences], short_sentences, vocab)
    text = TextDataset(1, short_sentences, short_sentences, vocab, vocab, registry[1].corruption)
    return [speech, text]


@pytest.fixture
def make_config(vocab):
    """Factory for a tiny two-task configuration; keyword arguments override fields."""
    def make(**overrides):
        fields = dict(
            tasks=[TaskSlot("asr", Modality.SPEECH), TaskSlot("mlm", Modality.TEXT, len(vocab))],
            output_vocab_size=len(vocab),
            encoder_layers=2,
            shared_layers=1,
            hidden_units=6,
            attention_heads=2,
            attention_dim=5,
            decoder_layers=1,
            embedding_dim=7,
        )
        fields.update(overrides)
        return ModelConfig(**fields)
    return make


@pytest.fixture
def model(make_config):
    return Model.initialize(make_config(), seed=3)


@pytest.fixture
def speech_batch(datasets):
    ds = datasets[0]
    return Batch.collate(0, [ds.sample(i) for i in range(4)])


@pytest.fixture
def text_batch(datasets):
    ds = datasets[1]
    rng = np.random.default_rng(5)
    return Batch.collate(1, [ds.sample(i, rng) for i in range(4)])
