import numpy as np
import pytest

from usted.constants import BOS, EOS
from usted.model import Model, ModelConfig, ModelError, TaskSlot, param_count, parameter_shapes
from usted.numerics import Tape, Tensor, backward, check_parameter_gradients
from usted.tasks import Batch, Modality, Sample


def _with_lm(make_config, **overrides):
    base = make_config()
    return make_config(tasks=base.tasks + [TaskSlot("lm", Modality.NONE)], **overrides)


class TestConfig:

    @pytest.mark.parametrize("shared", [-1, 3])
    def test_shared_layers_range(self, make_config, shared):
        with pytest.raises(ModelError, match="outside"):
            make_config(shared_layers=shared)

    def test_reserved_only_vocabulary(self, make_config):
        with pytest.raises(ModelError, match="only reserved tokens"):
            make_config(output_vocab_size=5)

    def test_text_slot_needs_vocabulary(self, make_config):
        with pytest.raises(ModelError, match="input vocabulary size"):
            make_config(tasks=[TaskSlot("mt", Modality.TEXT)])
        with pytest.raises(ModelError, match="input vocabulary size"):
            make_config(tasks=[TaskSlot("asr", Modality.SPEECH, 10)])

    def test_duplicate_tasks(self, make_config):
        with pytest.raises(ModelError, match="duplicate"):
            make_config(tasks=[TaskSlot("asr", Modality.SPEECH), TaskSlot("asr", Modality.SPEECH)])

    def test_json_and_digest(self, make_config):
        config = make_config()
        assert ModelConfig.from_json(config.to_json()) == config
        assert config.digest() == make_config().digest()
        assert config.digest() != make_config(shared_layers=2).digest()

    def test_task_index(self, make_config):
        assert make_config().task_index("mlm") == 1
        with pytest.raises(ModelError, match="unknown task"):
            make_config().task_index("mt")


class TestParameterLayout:

    def test_names(self, make_config):
        names = set(parameter_shapes(make_config()))
        assert "tasks.asr.adapter.weight" in names
        assert "tasks.asr.encoder.0.fwd.w_x" in names
        assert "tasks.asr.encoder.1.fwd.w_x" not in names
        assert "tasks.mlm.embedding" in names
        assert "tasks.asr.embedding" not in names
        assert "tasks.mlm.task_embedding" in names
        assert "shared.encoder.0.bwd.b" in names
        assert "decoder.attention.1.v" in names
        assert "decoder.lstm.0.w_h" in names

    @pytest.mark.parametrize("shared", [0, 1, 2])
    @pytest.mark.parametrize("task_embedding", [True, False])
    def test_closed_form_counts(self, make_config, shared, task_embedding):
        config = _with_lm(make_config, shared_layers=shared, use_task_embedding=task_embedding, decoder_layers=2)
        shapes = parameter_shapes(config)
        sizes = {name: int(np.prod(shape)) for name, shape in shapes.items()}
        counts = param_count(config)

        assert counts["total"] == sum(sizes.values())
        assert counts["shared"] == sum(v for n, v in sizes.items() if n.startswith("shared."))
        assert counts["decoder"] == sum(v for n, v in sizes.items() if n.startswith("decoder."))
        for task in ("asr", "mlm"):
            own = sum(v for n, v in sizes.items() if n.startswith(f"tasks.{task}."))
            assert counts[f"path.{task}"] == own + counts["shared"]
        assert counts["path.lm"] == 0
        assert not any(n.startswith("tasks.lm.") for n in shapes)

    def test_sharing_moves_parameters(self, make_config):
        # total size does not depend on K for a single task
        single = [TaskSlot("asr", Modality.SPEECH)]
        totals = {param_count(make_config(tasks=single, shared_layers=k))["total"] for k in range(3)}
        assert len(totals) == 1

    def test_sharing_shrinks_multitask_model(self, make_config):
        totals = [param_count(make_config(shared_layers=k))["total"] for k in range(3)]
        assert totals[0] > totals[1] > totals[2]
        paths = {param_count(make_config(shared_layers=k))["path.asr"] for k in range(3)}
        assert len(paths) == 1


class TestInitialization:

    def test_deterministic(self, make_config):
        a = Model.initialize(make_config(), seed=1).state_dict()
        b = Model.initialize(make_config(), seed=1).state_dict()
        assert all(np.array_equal(a[n], b[n]) for n in a)

    def test_salt_and_seed(self, make_config):
        base = Model.initialize(make_config(), seed=1)["decoder.output.weight"].data
        assert not np.array_equal(base, Model.initialize(make_config(), seed=2)["decoder.output.weight"].data)
        assert not np.array_equal(base, Model.initialize(make_config(), seed=1, salt="x")["decoder.output.weight"].data)

    def test_keyed_by_name(self, make_config):
        with_emb = Model.initialize(make_config(use_task_embedding=True), seed=4)
        without = Model.initialize(make_config(use_task_embedding=False), seed=4)
        name = "shared.encoder.0.fwd.w_x"
        assert np.array_equal(with_emb[name].data, without[name].data)

    def test_ranges(self, model):
        for name, p in model.params.items():
            if name.endswith((".b", ".bias", ".task_embedding")):
                assert not p.data.any(), name
            else:
                assert np.abs(p.data).max() <= 0.05
                assert p.requires_grad

    def test_parameter_mismatch(self, make_config, model):
        params = dict(model.params)
        params.pop("decoder.output.bias")
        with pytest.raises(ModelError, match="missing"):
            Model(make_config(), params)
        params["decoder.output.bias"] = Tensor(np.zeros(3))
        with pytest.raises(ModelError, match="shapes do not match"):
            Model(make_config(), params)

    def test_state_dict_round_trip(self, make_config, model):
        other = Model.initialize(make_config(), seed=99)
        other.load_state_dict(model.state_dict())
        assert all(np.array_equal(other[n].data, model[n].data) for n in model.params)
        with pytest.raises(ModelError, match="missing parameter"):
            other.load_state_dict({})

    def test_snapshot_is_independent(self, model):
        copy = model.snapshot()
        copy["decoder.output.bias"].data[:] = 1.0
        assert not model["decoder.output.bias"].data.any()


class TestForward:

    def test_loss_is_sum_of_per_sample(self, model, speech_batch):
        nll = model.forward_nll(speech_batch)
        assert nll.loss.item() == pytest.approx(nll.per_sample.sum(), rel=1e-12)
        assert (nll.per_sample > 0).all()

    @pytest.mark.parametrize("batch_name", ["speech_batch", "text_batch"])
    def test_padding_invariance(self, model, request, batch_name):
        batch = request.getfixturevalue(batch_name)
        plain = model.forward_nll(batch).per_sample
        padded = model.forward_nll(batch.padded(extra_inputs=3, extra_targets=2)).per_sample
        np.testing.assert_allclose(padded, plain, rtol=1e-9)

    def test_batch_composition_invariance(self, model, speech_batch):
        together = model.forward_nll(speech_batch).per_sample
        for i in range(speech_batch.size):
            alone = model.forward_nll(speech_batch.subset([i])).per_sample
            assert alone[0] == pytest.approx(together[i], rel=1e-9)

    def test_uniform_output_layer(self, model, text_batch):
        model["decoder.output.weight"].data[:] = 0.0
        nll = model.forward_nll(text_batch)
        vocab = model.config.output_vocab_size
        np.testing.assert_allclose(nll.per_sample, text_batch.target_lengths * np.log(vocab), rtol=1e-12)

    @pytest.mark.parametrize("task_embedding,extra", [(True, 1), (False, 0)])
    def test_memory_length(self, make_config, speech_batch, task_embedding, extra):
        model = Model.initialize(make_config(use_task_embedding=task_embedding), seed=0)
        memory = model.encode(0, speech_batch.inputs, speech_batch.input_lengths)
        assert memory.values.shape == (4, speech_batch.inputs.shape[1] + extra, 2 * model.config.hidden_units)
        assert np.array_equal(memory.mask.sum(axis=1), speech_batch.input_lengths + extra)
        assert len(memory.keys) == model.config.attention_heads

    def test_attention_weights_respect_mask(self, model, speech_batch):
        memory = model.encode(0, speech_batch.inputs, speech_batch.input_lengths)
        _, _, weights = model.decode_step(model.initial_state(4), [BOS] * 4, memory)
        assert len(weights) == model.config.attention_heads
        for w in weights:
            np.testing.assert_allclose(w.data.sum(axis=1), 1.0)
            assert not w.data[~memory.mask].any()

    def test_attention_weights_are_distributions(self, make_config):
        model = Model.initialize(make_config(attention_heads=4), seed=8)
        for k in range(4):
            model[f"decoder.attention.{k}.v"].data *= 200.0
        rng = np.random.default_rng(21)
        width = model.config.input_dim
        for _ in range(20):
            lengths = rng.integers(1, 9, size=4)
            inputs = rng.normal(size=(4, int(lengths.max()), width))
            memory = model.encode(0, inputs, lengths)
            for _ in range(50):
                query = Tensor(rng.normal(scale=3.0, size=(4, model.config.decoder_units)))
                _, weights = model.attend(memory, query)
                assert len(weights) == 4
                for w in weights:
                    assert (w.data >= 0).all()
                    assert np.abs(w.data.sum(axis=1) - 1.0).max() < 1e-12

    def test_decoder_only_task(self, make_config):
        model = Model.initialize(_with_lm(make_config), seed=0)
        batch = Batch.collate(2, [Sample(2, np.zeros(0), [7, 9, EOS]), Sample(2, np.zeros(0), [EOS])])
        memory = model.encode(2, batch.inputs, batch.input_lengths)
        context, weights = model.attend(memory, Tensor(np.ones((2, model.config.decoder_units))))
        assert not context.data.any()
        assert weights == []
        nll = model.forward_nll(batch)
        assert nll.per_sample.shape == (2,)

    def test_wrong_frame_width(self, model):
        with pytest.raises(ModelError, match="expects B x N x"):
            model.encode(0, np.zeros((1, 3, 10)), [3])

    def test_inconsistent_lengths(self, model):
        with pytest.raises(ModelError, match="inconsistent"):
            model.encode(1, np.full((1, 3), 7), [4])

    def test_bad_previous_token(self, model, text_batch):
        memory = model.encode(1, text_batch.inputs, text_batch.input_lengths)
        with pytest.raises(ModelError, match="outside output vocabulary"):
            model.decode_step(model.initial_state(4), [BOS, BOS, BOS, 10_000], memory)

    def test_unknown_task(self, model):
        with pytest.raises(ModelError, match="unknown task id"):
            model.slot(5)


class TestGradients:

    @pytest.mark.timeout(120)
    @pytest.mark.parametrize("batch_name", ["speech_batch", "text_batch"])
    def test_full_model_gradient_check(self, model, request, batch_name):
        batch = request.getfixturevalue(batch_name).subset([0, 1])
        report = check_parameter_gradients(lambda: model.forward_nll(batch).loss, model.params, coords_per_tensor=2)
        assert report.max_relative_error < 1e-3
        assert report.coordinates > 0

    def test_unused_task_gets_zero_gradient(self, model, speech_batch):
        with Tape():
            loss = model.forward_nll(speech_batch).loss
        grads = backward(loss, model.params)
        assert not grads["tasks.mlm.embedding"].any()
        assert grads["shared.encoder.0.fwd.w_x"].any()
        assert grads["tasks.asr.adapter.weight"].any()
