import threading

import numpy as np
import pytest

from usted.numerics import (
    NonFiniteError,
    NumericsError,
    ShapeError,
    Tape,
    Tensor,
    additive_score,
    backward,
    check_parameter_gradients,
    concat,
    elementwise,
    embedding_lookup,
    exp,
    grad_check,
    linear,
    log,
    log_softmax,
    lstm_cell,
    matmul,
    mul,
    pick,
    relative_error,
    scale,
    sigmoid,
    softmax,
    stack,
    sub,
    take_cols,
    tanh,
    total,
    transpose,
    weighted_sum,
)

TOLERANCE = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _const(rng, *shape):
    return Tensor(rng.normal(size=shape))


class TestGradients:
    """Analytic gradients of every primitive against central differences."""

    def test_unary(self, rng):
        weights = _const(rng, 3, 4)
        for fn in (tanh, sigmoid, exp, lambda x: scale(x, -2.5)):
            err = grad_check(lambda x: total(mul(fn(x), weights)), rng.normal(size=(3, 4)))
            assert err < TOLERANCE

    def test_log(self, rng):
        weights = _const(rng, 5)
        assert grad_check(lambda x: total(mul(log(x), weights)), rng.uniform(0.5, 2.0, size=5)) < TOLERANCE

    def test_binary(self, rng):
        other = _const(rng, 2, 3)
        weights = _const(rng, 2, 3)
        for op in ("add", "sub", "mul"):
            err = grad_check(lambda x: total(mul(elementwise(op, x, other), weights)), rng.normal(size=(2, 3)))
            assert err < TOLERANCE
            err = grad_check(lambda x: total(mul(elementwise(op, other, x), weights)), rng.normal(size=(2, 3)))
            assert err < TOLERANCE

    def test_matmul_both_sides(self, rng):
        a = _const(rng, 3, 4)
        b = _const(rng, 4, 2)
        weights = _const(rng, 3, 2)
        assert grad_check(lambda x: total(mul(matmul(x, b), weights)), a.data) < TOLERANCE
        assert grad_check(lambda x: total(mul(matmul(a, x), weights)), b.data) < TOLERANCE

    def test_batched_matmul(self, rng):
        a = _const(rng, 2, 3, 4)
        weights = _const(rng, 2, 3, 5)
        assert grad_check(lambda x: total(mul(matmul(a, x), weights)), rng.normal(size=(4, 5))) < TOLERANCE

    def test_bias_broadcast(self, rng):
        x = _const(rng, 2, 3, 4)
        weights = _const(rng, 2, 3, 4)
        w = _const(rng, 4, 4)
        assert grad_check(lambda b: total(mul(tanh(linear(x, w, b)), weights)), rng.normal(size=4)) < TOLERANCE

    def test_softmax_with_mask(self, rng):
        mask = np.array([[True, True, False, True], [True, False, False, False]])
        weights = _const(rng, 2, 4)
        err = grad_check(lambda x: total(mul(softmax(x, mask=mask), weights)), rng.normal(size=(2, 4)))
        assert err < TOLERANCE

    def test_log_softmax_and_pick(self, rng):
        ids = [2, 0, 4]
        assert grad_check(lambda x: total(pick(log_softmax(x), ids)), rng.normal(size=(3, 5))) < TOLERANCE

    def test_embedding_lookup_repeated_ids(self, rng):
        weights = _const(rng, 4, 3)
        err = grad_check(lambda t: total(mul(embedding_lookup(t, [1, 1, 0, 3]), weights)), rng.normal(size=(5, 3)))
        assert err < TOLERANCE

    def test_structural(self, rng):
        other = _const(rng, 2, 3)
        weights = _const(rng, 2, 6)
        assert grad_check(lambda x: total(mul(concat([x, other]), weights)), rng.normal(size=(2, 3))) < TOLERANCE
        weights = _const(rng, 2, 2, 3)
        assert grad_check(lambda x: total(mul(stack([x, other]), weights)), rng.normal(size=(2, 3))) < TOLERANCE
        weights = _const(rng, 2, 2)
        assert grad_check(lambda x: total(mul(take_cols(x, 1, 3), weights)), rng.normal(size=(2, 3))) < TOLERANCE
        weights = _const(rng, 3, 2)
        assert grad_check(lambda x: total(mul(transpose(x), weights)), rng.normal(size=(2, 3))) < TOLERANCE

    @pytest.mark.parametrize("position", range(6))
    def test_lstm_cell_each_input(self, rng, position):
        batch, dim, units = 2, 3, 4
        inputs = [
            rng.normal(size=(batch, dim)),
            rng.normal(size=(batch, units)),
            rng.normal(size=(batch, units)),
            rng.normal(size=(dim, 4 * units)) * 0.5,
            rng.normal(size=(units, 4 * units)) * 0.5,
            rng.normal(size=4 * units) * 0.1,
        ]
        wh = _const(rng, batch, units)
        wc = _const(rng, batch, units)

        def f(x):
            args = [Tensor(a) for a in inputs]
            args[position] = x
            h, c = lstm_cell(*args)
            return total(mul(h, wh)) + total(mul(c, wc))

        assert grad_check(f, inputs[position]) < TOLERANCE

    @pytest.mark.parametrize("position", range(3))
    def test_additive_score_each_input(self, rng, position):
        inputs = [rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 3)), rng.normal(size=(3, 1))]
        weights = _const(rng, 2, 5)

        def f(x):
            args = [Tensor(a) for a in inputs]
            args[position] = x
            return total(mul(additive_score(*args), weights))

        assert grad_check(f, inputs[position]) < TOLERANCE

    @pytest.mark.parametrize("position", range(2))
    def test_weighted_sum_each_input(self, rng, position):
        inputs = [rng.normal(size=(2, 5)), rng.normal(size=(2, 5, 3))]
        weights = _const(rng, 2, 3)

        def f(x):
            args = [Tensor(a) for a in inputs]
            args[position] = x
            return total(mul(weighted_sum(*args), weights))

        assert grad_check(f, inputs[position]) < TOLERANCE

    def test_reuse_accumulates(self):
        w = Tensor.parameter([1.0, -2.0, 3.0])
        with Tape():
            loss = total(mul(w, w)) + total(w)
        assert np.allclose(backward(loss, {"w": w})["w"], [3.0, -3.0, 7.0])


class TestBackward:

    def test_unrelated_parameter_gets_zeros(self):
        w = Tensor.parameter([1.0, 2.0])
        unused = Tensor.parameter(np.ones((2, 2)))
        with Tape():
            loss = total(mul(w, w))
        grads = backward(loss, {"w": w, "unused": unused})
        assert np.array_equal(grads["unused"], np.zeros((2, 2)))

    def test_nothing_recorded_without_tape(self):
        w = Tensor.parameter([1.0, 2.0])
        loss = total(mul(w, w))
        assert loss.node is None
        assert np.array_equal(backward(loss, {"w": w})["w"], np.zeros(2))

    def test_constants_not_recorded(self):
        with Tape() as tape:
            total(mul(Tensor([1.0]), Tensor([2.0])))
        assert len(tape) == 0

    def test_non_scalar_loss(self):
        w = Tensor.parameter([1.0, 2.0])
        with Tape():
            out = mul(w, w)
        with pytest.raises(ShapeError, match="scalar"):
            backward(out, {"w": w})

    def test_tape_is_thread_local(self):
        w = Tensor.parameter([1.0, 2.0])
        seen = []

        def worker():
            out = total(mul(w, w))
            seen.append(out.node)

        with Tape() as tape:
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen == [None]
        assert len(tape) == 0


class TestSoftmax:

    def test_sums_to_one(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 50))
            x = rng.normal(scale=rng.uniform(0.1, 100.0), size=(1, n))
            y = softmax(Tensor(x)).data
            assert (y >= 0).all()
            assert abs(y.sum() - 1.0) < 1e-12

    def test_masked_rows_sum_to_one(self, rng):
        x = rng.normal(scale=20.0, size=(1000, 12))
        mask = rng.random((1000, 12)) < 0.5
        mask[np.arange(1000), rng.integers(12, size=1000)] = True
        y = softmax(Tensor(x), mask=mask).data
        assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12
        assert not y[~mask].any()


class TestErrors:

    def test_softmax_masked_positions_are_zero(self):
        x = Tensor([[1.0, 50.0, -3.0]])
        y = softmax(x, mask=np.array([[True, False, True]])).data
        assert y[0, 1] == 0.0
        assert y.sum() == pytest.approx(1.0)

    def test_softmax_all_masked(self):
        with pytest.raises(NumericsError, match="all positions masked"):
            softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))

    def test_exp_overflow(self):
        with pytest.raises(NonFiniteError):
            exp(Tensor([1000.0]))

    @pytest.mark.parametrize("value", [0.0, -1.0, np.inf])
    def test_log_domain(self, value):
        with pytest.raises(NonFiniteError):
            log(Tensor([1.0, value]))

    def test_unknown_elementwise(self):
        with pytest.raises(ValueError, match="unknown elementwise op"):
            elementwise("relu", Tensor([1.0]))

    @pytest.mark.parametrize("fn", [
        lambda: matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
        lambda: sub(Tensor(np.ones(2)), Tensor(np.ones(3))),
        lambda: mul(Tensor(np.ones((2, 2))), Tensor(np.ones(2))),
        lambda: take_cols(Tensor(np.ones((2, 3))), 2, 5),
        lambda: pick(Tensor(np.ones((2, 3))), [0]),
    ])
    def test_shape_mismatch(self, fn):
        with pytest.raises(ShapeError):
            fn()

    def test_ids_out_of_range(self):
        with pytest.raises(NumericsError, match="out of range"):
            embedding_lookup(Tensor(np.ones((3, 2))), [3])
        with pytest.raises(NumericsError, match="out of range"):
            pick(Tensor(np.ones((1, 3))), [-1])

    def test_non_tensor_input(self):
        with pytest.raises(TypeError, match="expects Tensor inputs"):
            matmul(np.ones((2, 2)), Tensor(np.ones((2, 2))))


class TestCheckParameterGradients:

    def test_two_layer_network(self, rng):
        params = {
            "w1": Tensor.parameter(rng.normal(size=(3, 5))),
            "b1": Tensor.parameter(rng.normal(size=5)),
            "w2": Tensor.parameter(rng.normal(size=(5, 4))),
            "unused": Tensor.parameter(np.zeros(0)),
        }
        x = Tensor(rng.normal(size=(6, 3)))
        ids = [0, 3, 1, 2, 2, 0]

        def loss_fn():
            hidden = tanh(linear(x, params["w1"], params["b1"]))
            return scale(total(pick(log_softmax(matmul(hidden, params["w2"])), ids)), -1.0)

        report = check_parameter_gradients(loss_fn, params, coords_per_tensor=3)
        assert report.max_relative_error < TOLERANCE
        assert report.coordinates == 9
        assert set(report.per_parameter) == {"w1", "b1", "w2"}

    def test_all_coordinates(self, rng):
        params = {"w": Tensor.parameter(rng.normal(size=(3, 4))), "b": Tensor.parameter(rng.normal(size=4))}
        x = Tensor(rng.normal(size=(2, 3)))

        def loss_fn():
            return total(tanh(linear(x, params["w"], params["b"])))

        report = check_parameter_gradients(loss_fn, params, coords_per_tensor=0)
        assert report.coordinates == 16
        assert report.max_relative_error < TOLERANCE

    def test_detects_wrong_gradient(self, rng):
        w = Tensor.parameter(rng.normal(size=4))

        # the detached factor hides half of the true gradient
        def loss_fn():
            return total(mul(w, w.detach()))

        report = check_parameter_gradients(loss_fn, {"w": w})
        assert report.max_relative_error > 0.4

    def test_relative_error_floor(self):
        assert relative_error(np.array(0.0), np.array(0.0)) == 0.0
        assert relative_error(np.array(1e-12), np.array(0.0)) == pytest.approx(1e-4)
