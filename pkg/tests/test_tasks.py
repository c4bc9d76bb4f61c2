import numpy as np
import pytest

from usted.constants import BOS, EOS, MASK, PAD
from usted.corpus import CorruptionConfig, ManifestRow, write_manifest
from usted.features import DataError, FrameSequence, render_speech, write_features
from usted.tasks import (
    Batch,
    BatchSampler,
    BatchStream,
    Modality,
    Sample,
    SpeechDataset,
    TaskRegistry,
    TaskSpec,
    TextDataset,
    encode_target,
    load_datasets,
)


class TestTaskSpec:

    @pytest.mark.parametrize("kwargs,match", [
        (dict(name="", modality=Modality.SPEECH), "non-empty word"),
        (dict(name="a b", modality=Modality.SPEECH), "non-empty word"),
        (dict(name="mt", modality=Modality.TEXT), "needs an input vocabulary"),
        (dict(name="asr", modality=Modality.SPEECH, vocabulary="text"), "takes no input vocabulary"),
        (dict(name="lm", modality=Modality.NONE, corruption=CorruptionConfig()), "only text tasks"),
        (dict(name="asr", modality=Modality.SPEECH, loss_weight=-1.0), "non-negative"),
    ])
    def test_invalid(self, kwargs, match):
        with pytest.raises(ValueError, match=match):
            TaskSpec(**kwargs)

    def test_json(self):
        spec = TaskSpec.from_json({"name": "mlm", "modality": "text", "vocabulary": "text",
                                   "corruption": {"mask_rate": 0.2}})
        assert spec.corruption == CorruptionConfig(0.2)
        assert spec.loss_weight == 1.0
        assert TaskSpec.from_json(spec.to_json()) == spec


class TestRegistry:

    def test_ids_follow_order(self, registry):
        assert registry.names == ["asr", "mlm"]
        assert registry.index("mlm") == 1
        assert registry[0].modality is Modality.SPEECH

    def test_unknown(self, registry):
        with pytest.raises(DataError, match="unknown task 'mt'"):
            registry.index("mt")
        with pytest.raises(DataError, match="unknown task id 2"):
            registry[2]

    def test_duplicate(self):
        with pytest.raises(DataError, match="duplicate"):
            TaskRegistry([TaskSpec("asr", Modality.SPEECH), TaskSpec("asr", Modality.SPEECH)])

    def test_empty(self):
        with pytest.raises(DataError, match="at least one task"):
            TaskRegistry([])


class TestSample:

    def test_target_must_end_in_eos(self):
        with pytest.raises(DataError, match="ending in EOS"):
            Sample(0, np.array([5, 6]), np.array([7, 8]))
        with pytest.raises(DataError, match="ending in EOS"):
            Sample(0, np.array([5, 6]), np.array([], dtype=np.int64))

    @pytest.mark.parametrize("token", [PAD, BOS, EOS])
    def test_input_reserved_ids(self, token):
        with pytest.raises(DataError, match="must not contain"):
            Sample(0, np.array([5, token]), np.array([7, EOS]))

    def test_mask_is_a_valid_input(self):
        assert Sample(0, np.array([MASK, 5]), np.array([7, EOS])).input_length == 2

    def test_encode_target(self, vocab):
        target = encode_target(vocab, "the cat")
        assert target[-1] == EOS
        assert vocab.decode(target) == "the cat"


class TestBatch:

    def test_speech_collate(self, datasets):
        ds = datasets[0]
        samples = [ds.sample(i) for i in range(3)]
        batch = Batch.collate(0, samples)
        assert batch.is_speech
        assert batch.inputs.shape == (3, max(len(s.input) for s in samples), 192)
        for b, s in enumerate(samples):
            n = len(s.input)
            assert np.array_equal(batch.inputs[b, :n], s.input.frames)
            assert not batch.inputs[b, n:].any()
            assert np.array_equal(batch.targets[b, :len(s.target)], s.target)
            assert (batch.targets[b, len(s.target):] == PAD).all()
        assert batch.input_mask().sum() == batch.input_lengths.sum()
        assert batch.token_count == sum(len(s.target) for s in samples)

    def test_text_collate_pads_with_pad(self):
        samples = [Sample(1, [5], [6, EOS]), Sample(1, [5, 7, 8], [EOS])]
        batch = Batch.collate(1, samples)
        assert batch.inputs.tolist() == [[5, PAD, PAD], [5, 7, 8]]
        assert batch.targets.tolist() == [[6, EOS], [EOS, PAD]]
        assert batch.target_mask().tolist() == [[True, True], [True, False]]

    def test_decoder_only_inputs(self):
        batch = Batch.collate(2, [Sample(2, np.zeros(0), [6, EOS])])
        assert batch.inputs.shape == (1, 0)
        assert not batch.is_speech

    def test_pad_to(self):
        batch = Batch.collate(1, [Sample(1, [5], [EOS])], input_pad_to=4, target_pad_to=3)
        assert batch.inputs.shape == (1, 4)
        assert batch.targets.shape == (1, 3)

    def test_padded_and_subset(self, speech_batch):
        padded = speech_batch.padded(extra_inputs=2, extra_targets=1)
        assert padded.inputs.shape[1] == speech_batch.inputs.shape[1] + 2
        assert padded.targets.shape[1] == speech_batch.targets.shape[1] + 1
        assert np.array_equal(padded.input_lengths, speech_batch.input_lengths)
        sub = speech_batch.subset([2])
        assert sub.size == 1
        assert np.array_equal(sub.targets[0], speech_batch.targets[2])

    def test_rejects_mixed_tasks(self):
        with pytest.raises(DataError, match="other tasks"):
            Batch.collate(1, [Sample(1, [5], [EOS]), Sample(0, [5], [EOS])])

    def test_rejects_empty(self):
        with pytest.raises(DataError, match="empty batch"):
            Batch.collate(0, [])


class TestDatasets:

    def test_speech_inputs_are_stacked(self, short_sentences, vocab):
        features = [render_speech(s) for s in short_sentences[:2]]
        ds = SpeechDataset(0, features, short_sentences[:2], vocab)
        assert len(ds) == 2
        assert ds.inputs[0].dim == 3 * 64
        assert len(ds.inputs[0]) == -(-len(features[0]) // 3)

    def test_mismatched_lengths(self, vocab):
        with pytest.raises(DataError, match="transcripts"):
            SpeechDataset(0, [FrameSequence(np.zeros((3, 2)))], [], vocab)
        with pytest.raises(DataError, match="targets"):
            TextDataset(0, ["a"], [], vocab)

    def test_corruption_rate_zero_is_clean(self, short_sentences, vocab):
        ds = TextDataset(1, short_sentences, short_sentences, vocab, vocab, CorruptionConfig(0.0))
        sample = ds.sample(0)
        assert np.array_equal(sample.input, vocab.encode(short_sentences[0]))

    def test_corruption_rate_one_masks_every_word(self, short_sentences, vocab):
        ds = TextDataset(1, short_sentences, short_sentences, vocab, vocab, CorruptionConfig(1.0))
        sample = ds.sample(0, np.random.default_rng(0))
        assert sample.input.tolist() == [MASK] * len(short_sentences[0].split())
        assert vocab.decode(sample.target) == short_sentences[0]

    def test_corruption_needs_rng(self, datasets):
        with pytest.raises(DataError, match="random generator"):
            datasets[1].sample(0)

    def test_decoder_only(self, short_sentences, vocab):
        ds = TextDataset(2, ["-"] * 3, short_sentences[:3], vocab)
        assert ds.modality is Modality.NONE
        assert ds.sample(1).input_length == 0

    def test_corruption_without_vocabulary(self, vocab):
        with pytest.raises(DataError, match="needs an input vocabulary"):
            TextDataset(0, ["a"], ["a"], vocab, None, CorruptionConfig())


class TestLoadDatasets:

    @pytest.fixture
    def manifest(self, tmp_path, short_sentences):
        (tmp_path / "features").mkdir()
        rows = []
        for i, s in enumerate(short_sentences[:3]):
            write_features(tmp_path / "features" / f"asr-{i}.feat", render_speech(s))
            rows.append(ManifestRow("asr", f"features/asr-{i}.feat", s))
            rows.append(ManifestRow("mlm", s, s))
        rows.append(ManifestRow("mt", "x", "y"))
        path = tmp_path / "train.tsv"
        write_manifest(path, rows)
        return path

    def test_unregistered_task(self, manifest, registry, vocab):
        with pytest.raises(DataError, match="unregistered task 'mt'"):
            load_datasets(manifest, registry, vocab, {"text": vocab})

    def test_skip_unknown(self, manifest, registry, vocab, short_sentences):
        speech, text = load_datasets(manifest, registry, vocab, {"text": vocab}, skip_unknown=True)
        assert len(speech) == len(text) == 3
        assert speech.transcripts == short_sentences[:3]
        assert text.corruption == CorruptionConfig(0.4)

    def test_unknown_vocabulary(self, manifest, registry, vocab):
        with pytest.raises(DataError, match="unknown vocabulary 'text'"):
            load_datasets(manifest, registry, vocab, {}, skip_unknown=True)


class TestSampler:

    def test_deterministic(self, registry, datasets):
        a = BatchSampler(registry, datasets, 2, seed=7)
        b = BatchSampler(registry, datasets, 2, seed=7)
        assert [a.next_plan() for _ in range(20)] == [b.next_plan() for _ in range(20)]

    def test_uniform_task_choice(self, registry, datasets):
        sampler = BatchSampler(registry, datasets, 1, seed=0)
        tasks = [sampler.next_plan().task for _ in range(2000)]
        assert 0.45 < np.mean(tasks) < 0.55

    def test_uniform_task_choice_three_tasks(self, registry, datasets, short_sentences, vocab):
        three = TaskRegistry(list(registry) + [TaskSpec("mt", Modality.TEXT, vocabulary="text")])
        mt = TextDataset(2, short_sentences, short_sentences, vocab, vocab)
        sampler = BatchSampler(three, datasets + [mt], 2, seed=11)
        counts = np.bincount([sampler.next_plan().task for _ in range(30_000)], minlength=3)
        np.testing.assert_allclose(counts / 30_000, 1 / 3, atol=0.02)

    def test_epoch_without_replacement(self, registry, datasets):
        sampler = BatchSampler(registry, datasets, 4, seed=3)
        seen = {0: [], 1: []}
        while min(len(v) for v in seen.values()) < 2:
            plan = sampler.next_plan()
            seen[plan.task].append(plan.indices)
        for plans in seen.values():
            assert sorted(plans[0] + plans[1]) == list(range(8))

    def test_remainder_dropped(self, registry, datasets):
        sampler = BatchSampler(registry, datasets, 3, seed=1)
        for _ in range(50):
            plan = sampler.next_plan()
            assert len(plan.indices) == 3
            assert len(set(plan.indices)) == 3

    def test_build_is_pure(self, registry, datasets):
        sampler = BatchSampler(registry, datasets, 4, seed=2)
        plan = sampler.next_plan()
        while plan.task != 1:
            plan = sampler.next_plan()
        first, second = sampler.build(plan), sampler.build(plan)
        assert np.array_equal(first.inputs, second.inputs)

    def test_batch_smaller_than_dataset_required(self, registry, datasets):
        with pytest.raises(DataError, match="fewer than the batch size"):
            BatchSampler(registry, datasets, 9)

    def test_dataset_count(self, registry, datasets):
        with pytest.raises(DataError, match="2 tasks registered but 1"):
            BatchSampler(registry, datasets[:1], 2)

    @pytest.mark.parametrize("workers", [1, 3])
    def test_stream_matches_sequential(self, registry, datasets, workers):
        sequential = BatchSampler(registry, datasets, 2, seed=11)
        expected = [sequential.sample_batch() for _ in range(10)]
        with BatchStream(BatchSampler(registry, datasets, 2, seed=11), workers=workers) as stream:
            got = [next(stream) for _ in range(10)]
        for e, g in zip(expected, got):
            assert e.task == g.task
            assert np.array_equal(e.inputs, g.inputs)
            assert np.array_equal(e.targets, g.targets)
