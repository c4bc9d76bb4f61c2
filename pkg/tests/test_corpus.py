from collections import Counter

import numpy as np
import pytest

from usted.constants import MASK_WORD
from usted.corpus import (
    Cipher,
    CipherConfig,
    CorruptionConfig,
    Grammar,
    LexEntry,
    ManifestRow,
    Reorder,
    Template,
    corrupt_mlm,
    default_grammar,
    read_manifest,
    resolve_input,
    synth_text_corpus,
    write_manifest,
)
from usted.features import DataError


class TestGrammar:

    def test_default_vocabulary(self):
        grammar = default_grammar()
        words = grammar.words()
        assert len(grammar.templates) == 6
        assert len(words) == len(set(words))
        assert all(w.isalpha() and w.islower() for w in words)

    def test_sentences_use_grammar_words(self):
        words = set(default_grammar().words())
        corpus = synth_text_corpus(seed=1, n=200)
        assert len(corpus.english) == 200
        assert corpus.foreign is None
        assert all(set(s.split()) <= words for s in corpus.english)

    def test_deterministic(self):
        assert synth_text_corpus(seed=4, n=50) == synth_text_corpus(seed=4, n=50)
        assert synth_text_corpus(seed=4, n=50) != synth_text_corpus(seed=5, n=50)

    def test_unigram_distribution_matches_samples(self):
        grammar = default_grammar()
        expected = grammar.unigram_distribution()
        assert sum(expected.values()) == pytest.approx(1.0)
        counts = Counter(w for s in synth_text_corpus(seed=2, n=5000).english for w in s.split())
        n = sum(counts.values())
        assert max(abs(counts[w] / n - p) for w, p in expected.items()) < 0.01

    def test_literal_slots(self):
        grammar = Grammar([Template("hello NOUN")], {"NOUN": [LexEntry("world")]})
        assert synth_text_corpus(seed=0, n=3, grammar=grammar).english == ["hello world"] * 3
        assert grammar.unigram_distribution() == {"hello": 0.5, "world": 0.5}

    @pytest.mark.parametrize("grammar", [
        Grammar([], {"A": [LexEntry("x")]}),
        Grammar([Template("A", 0.0)], {"A": [LexEntry("x")]}),
        Grammar([Template("A")], {"A": []}),
        Grammar([Template("A")], {"A": [LexEntry("x", -1.0)]}),
    ])
    def test_invalid(self, grammar):
        with pytest.raises(DataError):
            grammar.validate()

    def test_negative_count(self):
        with pytest.raises(ValueError, match="non-negative"):
            synth_text_corpus(seed=0, n=-1)

    def test_json_round_trip(self):
        grammar = default_grammar()
        assert Grammar.from_json(grammar.to_json()) == grammar


class TestCipher:

    @pytest.fixture
    def words(self):
        return default_grammar().words()

    @pytest.mark.parametrize("reorder", list(Reorder))
    def test_invertible(self, words, reorder):
        cipher = Cipher(CipherConfig("fr", seed=3, reorder=reorder), words)
        for sentence in synth_text_corpus(seed=9, n=100).english:
            foreign = cipher.encipher(sentence)
            assert foreign != sentence
            assert cipher.decipher(foreign) == sentence

    def test_injective(self, words):
        cipher = Cipher(CipherConfig("de"), words)
        assert len(cipher.vocabulary()) == len(words)

    def test_languages_differ(self, words):
        a = Cipher(CipherConfig("fr"), words)
        b = Cipher(CipherConfig("de"), words)
        assert a.vocabulary() != b.vocabulary()

    def test_swap_reorders_pairs(self):
        cipher = Cipher(CipherConfig("xx", reorder=Reorder.SWAP), ["a", "b", "c"])
        forward = {w: cipher.encipher(w) for w in "abc"}
        assert cipher.encipher("a b c").split() == [forward["b"], forward["a"], forward["c"]]

    def test_swap_offset_keeps_first_word(self):
        cipher = Cipher(CipherConfig("xx", reorder=Reorder.SWAP_OFFSET), ["a", "b", "c"])
        forward = {w: cipher.encipher(w) for w in "abc"}
        assert cipher.encipher("a b c").split() == [forward["a"], forward["c"], forward["b"]]

    def test_aligned_corpus(self, words):
        cipher = Cipher(CipherConfig("fr"), words)
        corpus = synth_text_corpus(seed=0, n=20, cipher=cipher)
        assert corpus.foreign == [cipher.encipher(s) for s in corpus.english]

    def test_unknown_word(self, words):
        with pytest.raises(DataError, match="no entry"):
            Cipher(CipherConfig("fr"), words).encipher("zebra")


class TestCorruption:

    def test_rate_bounds(self):
        rng = np.random.default_rng(0)
        words = "the dog sees a cat".split()
        assert corrupt_mlm(words, CorruptionConfig(0.0), rng) == (words, words)
        corrupted, target = corrupt_mlm(words, CorruptionConfig(1.0), rng)
        assert corrupted == [MASK_WORD] * 5
        assert target == words

    def test_empirical_rate(self):
        rng = np.random.default_rng(1)
        words = ["w"] * 20000
        corrupted, _ = corrupt_mlm(words, CorruptionConfig(0.4), rng)
        assert corrupted.count(MASK_WORD) / len(words) == pytest.approx(0.4, abs=0.02)

    def test_empty(self):
        with pytest.raises(DataError, match="empty"):
            corrupt_mlm([], CorruptionConfig(), np.random.default_rng(0))

    @pytest.mark.parametrize("rate", [-0.1, 1.5])
    def test_rate_out_of_range(self, rate):
        with pytest.raises(ValueError, match="mask_rate"):
            CorruptionConfig(rate)

    def test_json_seed_name(self):
        assert CorruptionConfig(0.2, 7).to_json() == {"mask_rate": 0.2, "rng_seed": 7}
        assert CorruptionConfig.from_json({"rng_seed": 3}).seed == 3


class TestManifest:

    def test_round_trip(self, tmp_path):
        rows = [ManifestRow("asr", "features/a.feat", "the dog"), ManifestRow("mlm", "a <mask>", "a cat")]
        path = tmp_path / "train.tsv"
        write_manifest(path, rows)
        assert read_manifest(path) == rows

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("# task\tinput\ttarget\n\nmt\tle chat\tthe cat\n", encoding="utf-8")
        assert read_manifest(path) == [ManifestRow("mt", "le chat", "the cat")]

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("asr\tonly-two\n", encoding="utf-8")
        with pytest.raises(DataError, match=r"m.tsv:1: expected 3"):
            read_manifest(path)

    def test_resolve_input(self, tmp_path):
        manifest = tmp_path / "data" / "train.tsv"
        assert resolve_input(manifest, "features/x.feat") == tmp_path / "data" / "features" / "x.feat"
        absolute = tmp_path / "elsewhere.feat"
        assert resolve_input(manifest, str(absolute)) == absolute
