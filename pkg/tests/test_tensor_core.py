import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fitrank import kernels
from fitrank.tensor_core import (Adam, AdamState, BatchNorm, Dense, Dice, Embedding, NonFiniteError, Tape,
                                 TapeError, Tensor, adam_step, deterministic, finite_difference_check,
                                 kaiming_uniform, ops, param, softmax_with_temperature)
from fitrank.tensor_core.tensor import no_grad, precision

SEEDS = range(5)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def contract(out: Tensor, seed: int) -> Tensor:
    """Scalar readout with random weights, so every output coordinate matters."""
    w = np.random.default_rng(1000 + seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, Tensor(w.astype(out.data.dtype))))


# op name -> (builder(rng) -> inputs, fn(*inputs) -> tensor)
def _cases():
    ids = np.array([0, 2, 2, 1, 3])
    seg = np.array([0, 0, 2, 2, 2])
    return {
        "add": (lambda r: [leaf(r, 3, 4), leaf(r, 4)], ops.add),
        "sub": (lambda r: [leaf(r, 3, 4), leaf(r, 3, 1)], ops.sub),
        "mul": (lambda r: [leaf(r, 3, 4), leaf(r, 3, 4)], ops.mul),
        "div": (lambda r: [leaf(r, 3, 4), Tensor(r.uniform(1, 2, (3, 4)), requires_grad=True)], ops.div),
        "relu": (lambda r: [leaf(r, 4, 5)], ops.relu),
        "sigmoid": (lambda r: [leaf(r, 4, 5)], ops.sigmoid),
        "exp": (lambda r: [leaf(r, 4, 5)], ops.exp),
        "square": (lambda r: [leaf(r, 4, 5)], ops.square),
        "sum_axis": (lambda r: [leaf(r, 3, 4, 2)], lambda x: ops.sum(x, axis=1)),
        "mean_keepdims": (lambda r: [leaf(r, 3, 4)], lambda x: ops.mean(x, axis=0, keepdims=True)),
        "max": (lambda r: [leaf(r, 3, 6)], lambda x: ops.max(x, axis=-1)),
        "reshape": (lambda r: [leaf(r, 3, 4)], lambda x: ops.reshape(x, (2, 6))),
        "transpose": (lambda r: [leaf(r, 2, 3, 4)], lambda x: ops.transpose(x, (2, 0, 1))),
        "concat": (lambda r: [leaf(r, 3, 2), leaf(r, 3, 4)], lambda a, b: ops.concat([a, b], axis=-1)),
        "getitem": (lambda r: [leaf(r, 5, 3)], lambda x: ops.getitem(x, (slice(1, 4), 2))),
        "take_rows": (lambda r: [leaf(r, 4, 3)], lambda t: ops.take_rows(t, ids)),
        "segment_sum": (lambda r: [leaf(r, 5, 3)], lambda v: ops.segment_sum(v, seg, 4)),
        "scatter_rows": (lambda r: [leaf(r, 3, 2)], lambda v: ops.scatter_rows(v, np.array([4, 0, 2]), 5)),
        "matmul_2d": (lambda r: [leaf(r, 3, 4), leaf(r, 4, 2)], ops.matmul),
        "matmul_3d": (lambda r: [leaf(r, 2, 3, 4), leaf(r, 2, 4, 5)], ops.matmul),
        "matmul_3d_2d": (lambda r: [leaf(r, 2, 3, 4), leaf(r, 4, 5)], ops.matmul),
        "linear": (lambda r: [leaf(r, 5, 4), leaf(r, 3, 4), leaf(r, 3)], ops.linear),
        "l2_normalize": (lambda r: [leaf(r, 4, 5)], ops.l2_normalize),
        "softmax": (lambda r: [leaf(r, 3, 5)], ops.softmax),
        "softmax_tau": (lambda r: [leaf(r, 3, 5)], lambda x: ops.softmax(x, tau=0.3)),
        "bce_with_logits": (lambda r: [leaf(r, 6)],
                            lambda x: ops.bce_with_logits(x, np.array([1, 0, 1, 1, 0, 0]))),
        "batch_norm_train": (lambda r: [leaf(r, 6, 3), leaf(r, 3), leaf(r, 3)],
                             lambda x, g, b: ops.batch_norm(x, np.zeros(3), np.ones(3), g, b, 1e-5, True)[0]),
        "batch_norm_eval": (lambda r: [leaf(r, 6, 3), leaf(r, 3), leaf(r, 3)],
                            lambda x, g, b: ops.batch_norm(x, np.full(3, 0.2), np.full(3, 1.5), g, b, 1e-5,
                                                           False)[0]),
    }


CASES = _cases()


class TestGradients:
    @pytest.mark.parametrize("name", sorted(CASES))
    def test_op_matches_central_difference(self, name):
        build, fn = CASES[name]
        for seed in SEEDS:
            inputs = build(np.random.default_rng(seed))
            report = {}
            err = finite_difference_check(lambda *xs: contract(fn(*xs), seed), inputs, report=report)
            assert err < 1e-3, f"{name} seed {seed}: {err}"
            assert report["checked"] > 0

    def test_dice_layer(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            dice = Dice(3)
            dice.alpha.data = rng.normal(0, 0.3, 3).astype(np.float32)
            x = leaf(rng, 8, 3)
            err = finite_difference_check(lambda x_, a: contract(dice(x_), seed), [x, dice.alpha])
            assert err < 1e-3

    def test_dense_with_batch_norm(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            layer = Dense(rng, 4, 3, activation="relu", batch_norm=True)
            layer.norm.beta.data = rng.normal(0, 0.5, 3).astype(np.float32)
            x = leaf(rng, 8, 4)
            ps = [x, *layer.parameters()]
            err = finite_difference_check(lambda *_: contract(layer(x), seed), ps)
            assert err < 1e-3

    def test_embedding_padding_row_gets_no_gradient(self):
        rng = np.random.default_rng(0)
        emb = Embedding(rng, 5, 3)
        with Tape() as tape:
            out = ops.sum(emb(np.array([0, 0, 1, 4])))
        tape.backward(out)
        assert np.all(emb.table.grad[0] == 0)
        np.testing.assert_array_equal(emb.table.grad[[1, 4]], np.ones((2, 3)))
        np.testing.assert_array_equal(emb.table.data[0], np.zeros(3))

    def test_wrong_gradient_is_detected(self):
        x = leaf(np.random.default_rng(0), 4)

        def square_sum(t):
            y = ops.square(t)
            return ops.sum(ops.add(y, Tensor(np.zeros(4))))

        assert finite_difference_check(square_sum, [x]) < 1e-6
        # a deliberately wrong backward must be caught
        def bad(t):
            out = ops._make(t.data * 3.0, (t,), lambda g: (g * 2.0,), "bad")
            return ops.sum(out)

        assert finite_difference_check(bad, [x]) > 0.1

    def test_kink_coordinates_are_skipped(self):
        x = Tensor(np.array([0.0005, 1.0, -1.0]), requires_grad=True)
        report = {}
        err = finite_difference_check(lambda t: ops.sum(ops.relu(t)), [x], report=report)
        assert err < 1e-9
        assert (report["checked"], report["skipped"]) == (2, 1)
        assert len(report["per_input"]) == 1

    def test_inputs_restored(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=False)
        finite_difference_check(lambda t: ops.sum(ops.square(t)), [x])
        assert x.data.dtype == np.float32 and not x.requires_grad and x.grad is None


class TestTape:
    def test_reverse_order_and_accumulation(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
            z = ops.add(y, x)  # x used twice
            loss = ops.sum(z)
        log = []
        tape.backward(loss, order_log=log)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)
        assert log == sorted(log, reverse=True)

    def test_nothing_recorded_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                ops.square(x)
        assert len(tape) == 0

    def test_non_finite_forward_raises(self):
        x = Tensor(np.array([1e30], dtype=np.float32), requires_grad=True)
        with pytest.raises(NonFiniteError):
            with Tape():
                ops.exp(x)

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.square(x)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_independent_threads(self):
        results = {}

        def work(k):
            x = Tensor(np.full(4, float(k)), requires_grad=True)
            with Tape() as tape:
                loss = ops.sum(ops.square(x))
            tape.backward(loss)
            results[k] = x.grad.copy()

        threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for k in range(4):
            np.testing.assert_array_equal(results[k], np.full(4, 2.0 * k))


class TestShapes:
    def test_matmul_shape_errors(self):
        with pytest.raises(ValueError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ValueError):
            ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_take_rows_range(self):
        with pytest.raises(IndexError):
            ops.take_rows(Tensor(np.ones((3, 2))), np.array([3]))

    def test_segment_sum_empty_segment(self):
        out = ops.segment_sum(Tensor(np.ones((2, 2))), np.array([0, 0]), 3)
        np.testing.assert_array_equal(out.data, [[2, 2], [0, 0], [0, 0]])

    def test_segment_sum_unsorted(self):
        with pytest.raises(ValueError):
            ops.segment_sum(Tensor(np.ones((2, 2))), np.array([1, 0]), 2)


class TestNumerics:
    def test_softmax_extreme_temperature(self):
        x = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        out = softmax_with_temperature(x, 1e-3).data
        np.testing.assert_array_equal(out, [[0.0, 0.0, 1.0]])
        with pytest.raises(ValueError):
            softmax_with_temperature(x, 0.0)

    def test_l2_normalize_zero_row(self):
        out = ops.l2_normalize(Tensor(np.zeros((1, 3), dtype=np.float32))).data
        np.testing.assert_array_equal(out, np.zeros((1, 3)))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_softmax_is_distribution(self, xs):
        out = ops.softmax(Tensor(np.array([xs], dtype=np.float32)), tau=0.5).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1) < 1e-5

    @given(st.lists(st.floats(-80, 80), min_size=1, max_size=20), st.integers(0, 2 ** 20))
    @settings(max_examples=50, deadline=None)
    def test_bce_matches_naive(self, xs, seed):
        x = np.array(xs, dtype=np.float64)
        y = np.random.default_rng(seed).integers(0, 2, len(x))
        with precision(np.float64):
            got = float(ops.bce_with_logits(Tensor(x), y).data)
        # -log sigmoid(x) = log(1 + e^-x), -log(1 - sigmoid(x)) = log(1 + e^x)
        ref = np.mean(np.where(y == 1, np.logaddexp(0, -x), np.logaddexp(0, x)))
        assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))

    def test_kaiming_bound(self):
        w = kaiming_uniform(np.random.default_rng(0), (200, 50))
        assert np.abs(w).max() <= np.sqrt(6 / 50)
        assert w.dtype == np.float32


class TestBatchNorm:
    def test_running_stats_unbiased(self):
        bn = BatchNorm(2, momentum=1.0)
        x = np.array([[1.0, 2.0], [3.0, 6.0]], dtype=np.float32)
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, x.mean(0))
        np.testing.assert_allclose(bn.running_var, x.var(0, ddof=1))

    def test_eval_uses_running_stats(self):
        bn = BatchNorm(2)
        bn.running_mean[:] = [1.0, -1.0]
        bn.running_var[:] = [4.0, 1.0]
        bn.eval()
        out = bn(Tensor(np.array([[3.0, 0.0]], dtype=np.float32))).data
        np.testing.assert_allclose(out, [[1.0, 1.0]], atol=1e-5)


class TestAdam:
    def test_matches_reference_formula(self):
        rng = np.random.default_rng(0)
        p0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(4)]
        p = p0.copy()
        state = AdamState(lr=0.01)
        for g in grads:
            adam_step([p], [g], state)
        # reference
        m = v = np.zeros(5)
        q = p0.copy()
        for t, g in enumerate(grads, 1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            q = q - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p, q, rtol=1e-12)

    def test_first_step_magnitude_is_lr(self):
        w = param(np.array([1.0, -2.0]))
        opt = Adam([w], lr=0.1)
        w.grad = np.array([3.0, -0.5], dtype=np.float32)
        opt.step()
        np.testing.assert_allclose(w.data, [0.9, -1.9], rtol=1e-5)

    def test_none_grad_is_zero(self):
        w = param(np.ones(2))
        opt = Adam([w])
        opt.step()
        np.testing.assert_array_equal(w.data, np.ones(2))

    def test_mismatched_state(self):
        state = AdamState()
        adam_step([np.ones(2)], [np.ones(2)], state)
        with pytest.raises(ValueError):
            adam_step([np.ones(2), np.ones(2)], [np.ones(2), np.ones(2)], state)


class TestDeterministicMode:
    def test_batched_rows_equal_looped_rows(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(64, 300)).astype(np.float32))
        w = Tensor(rng.normal(size=(128, 300)).astype(np.float32))
        with deterministic():
            full = ops.linear(x, w).data
            rows = np.concatenate([ops.linear(ops.getitem(x, slice(i, i + 1)), w).data for i in range(64)])
        np.testing.assert_array_equal(full, rows)

    @pytest.mark.parametrize("backend", kernels.AVAILABLE)
    def test_backends_bitwise_equal(self, backend):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(33, 70)).astype(np.float32)
        b = rng.normal(size=(70, 17)).astype(np.float32)
        ref = kernels.backend_module("python").matmul_ordered(a, b)
        got = kernels.backend_module(backend).matmul_ordered(a, b)
        np.testing.assert_array_equal(got, ref)
        np.testing.assert_allclose(got, a.astype(np.float64) @ b, rtol=1e-4, atol=1e-4)
