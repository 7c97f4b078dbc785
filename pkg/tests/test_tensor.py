import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eltnilm.errors import ConfigError, DimensionError, NumericError, UsageError
from eltnilm.tensor import (
    Tensor,
    backward,
    concat,
    conv1d,
    count_multiplies,
    current_tape,
    finite_diff_check,
    gather,
    gelu,
    gradient_errors,
    index,
    layer_norm,
    lp_pool2,
    matmul,
    no_grad,
    pad,
    relu,
    reshape,
    set_deterministic,
    is_deterministic,
    softmax_axis,
    transpose,
    tsum,
)

from oracles import central_difference, conv_same, l2_pool, layer_norm_rows


def leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def scalar_of(out: Tensor, weights: np.ndarray) -> Tensor:
    """A generic scalar functional: sum(out * W) for fixed random W."""
    return tsum(out * weights)


class TestTape:
    def test_square_gradient(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(tsum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_tape_cleared_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(tsum(x * 2.0))
        assert len(current_tape()) == 0

    def test_fan_out_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0
        backward(tsum(y + y * y))
        # d/dx (3x + 9x^2) = 3 + 18x
        np.testing.assert_allclose(x.grad, [3.0 + 36.0])

    def test_leaf_grad_accumulates_across_calls(self):
        x = Tensor([1.0], requires_grad=True)
        backward(tsum(x * 5.0))
        backward(tsum(x * 5.0))
        np.testing.assert_allclose(x.grad, [10.0])
        x.zero_grad()
        np.testing.assert_allclose(x.grad, [0.0])

    def test_replay_order_is_reverse(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = relu(x * 2.0)
        z = tsum(y)
        visited = []
        backward(z, on_visit=visited.append)
        assert visited == ["sum", "relu", "mul"]

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            backward(x * 2.0)

    def test_unused_parameter_gets_zero_grad(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([4.0], requires_grad=True)
        backward(tsum(a * 2.0))
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert len(current_tape()) == 0

    def test_tapes_are_thread_local(self):
        x = Tensor(np.ones(2), requires_grad=True)
        _ = x * 2.0
        seen = []
        t = threading.Thread(target=lambda: seen.append(len(current_tape())))
        t.start()
        t.join()
        assert seen == [0]
        current_tape().clear()

    def test_nan_raises_numeric_error(self):
        x = Tensor([1.0, 0.0])
        with pytest.raises(NumericError):
            matmul(Tensor([[np.inf]]), Tensor([[1.0]]))
        with pytest.raises(NumericError):
            Tensor([np.nan])
        assert x.shape == (2,)

    def test_deterministic_flag_round_trip(self):
        set_deterministic(True)
        assert is_deterministic()
        set_deterministic(False)
        assert not is_deterministic()
        set_deterministic(True)


class TestMatmul:
    def test_matches_numpy(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_rank_one_rejected(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))

    def test_multiply_count(self):
        with count_multiplies() as c:
            matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
        assert c.value == 2 * 3 * 4 * 5

    def test_broadcast_gradient(self):
        rng = np.random.default_rng(1)
        a = leaf(rng, 2, 3, 4)
        b = leaf(rng, 4, 5)
        w = rng.standard_normal((2, 3, 5))
        backward(scalar_of(matmul(a, b), w))
        np.testing.assert_allclose(b.grad, np.einsum("bij,bik->jk", a.data, w))
        np.testing.assert_allclose(a.grad, w @ b.data.T)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 7)))
        np.testing.assert_allclose(softmax_axis(x, "row").data.sum(axis=-1), 1.0, atol=1e-14)

    def test_columns_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 7)))
        np.testing.assert_allclose(softmax_axis(x, "column").data.sum(axis=-2), 1.0, atol=1e-14)

    def test_large_values_are_stable(self):
        out = softmax_axis(Tensor([[1000.0, 1000.0]]), "row").data
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_mask_gives_exact_zero(self):
        mask = np.array([[True, False, True]])
        out = softmax_axis(Tensor(np.ones((1, 3))), "row", mask).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out[0, [0, 2]], 0.5)

    def test_fully_masked_row(self):
        with pytest.raises(DimensionError):
            softmax_axis(Tensor(np.ones((1, 2))), "row", np.zeros((1, 2), bool))

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            softmax_axis(Tensor(np.ones((2, 2))), "diagonal")

    @pytest.mark.parametrize("axis", ["row", "column"])
    def test_gradient_against_central_difference(self, axis):
        rng = np.random.default_rng(2)
        x = leaf(rng, 3, 5)
        w = rng.standard_normal((3, 5))
        backward(scalar_of(softmax_axis(x, axis), w))

        def f(arr):
            with no_grad():
                return float((softmax_axis(Tensor(arr), axis).data * w).sum())

        np.testing.assert_allclose(x.grad, central_difference(f, x.data.copy()), atol=1e-8)


class TestLayerNorm:
    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 6))
        g, s = rng.standard_normal(6), rng.standard_normal(6)
        out = layer_norm(Tensor(x), Tensor(g), Tensor(s)).data
        np.testing.assert_allclose(out, layer_norm_rows(x, g, s), atol=1e-12)

    def test_normalised_moments(self):
        # The 1e-5 epsilon shrinks the variance to var / (var + eps), so rows
        # are scaled to variance >= 10 to stay within 1e-6 of 1.
        rng = np.random.default_rng(4)
        for _ in range(20):
            d = int(rng.integers(2, 40))
            x = rng.standard_normal((8, d))
            x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
            x = x * np.sqrt(rng.uniform(10.0, 1000.0, (8, 1))) + rng.normal(0, 50, (8, 1))
            out = layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
            assert np.abs(out.mean(axis=-1)).max() < 1e-10
            assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6

    def test_small_variance_shrinks_by_epsilon(self):
        rng = np.random.default_rng(12)
        x = 0.1 * rng.standard_normal((6, 5))
        out = layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
        var = x.var(axis=1)
        np.testing.assert_allclose(out.var(axis=1), var / (var + 1e-5), rtol=1e-12)

    def test_single_feature_rejected(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.ones((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))

    def test_affine_shape_checked(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


class TestConvPool:
    def test_conv_matches_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(13)
        w, b = rng.standard_normal((5, 1, 3)), rng.standard_normal(3)
        out = conv1d(Tensor(x[:, None]), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, conv_same(x, w, b), atol=1e-12)

    def test_conv_batched(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 9, 1))
        w, b = rng.standard_normal((3, 1, 2)), np.zeros(2)
        out = conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(out[i], conv_same(x[i, :, 0], w, b), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            conv1d(Tensor(np.ones((4, 1))), Tensor(np.ones((2, 1, 1))), Tensor(np.zeros(1)))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv1d(Tensor(np.ones((4, 2))), Tensor(np.ones((3, 1, 1))), Tensor(np.zeros(1)))

    @pytest.mark.parametrize("length,kernel,stride", [(599, 2, 2), (7, 3, 2), (10, 2, 2), (5, 1, 1)])
    def test_pool_matches_oracle(self, length, kernel, stride):
        x = np.random.default_rng(7).standard_normal((length, 3))
        out = lp_pool2(Tensor(x), kernel, stride).data
        assert out.shape == (-(-length // stride), 3)
        np.testing.assert_allclose(out, l2_pool(x, kernel, stride), atol=1e-12)

    def test_pool_zero_input_has_zero_gradient(self):
        x = Tensor(np.zeros((4, 2)), requires_grad=True)
        backward(tsum(lp_pool2(x, 2, 2)))
        np.testing.assert_array_equal(x.grad, 0.0)


class TestShapes:
    def test_pad_and_index(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        y = index(pad(x, 1, 1, 2), (slice(None), slice(1, 4)))
        np.testing.assert_array_equal(y.data, x.data)
        backward(tsum(y))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_gather_repeated_rows_accumulate(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        backward(tsum(gather(x, [0, 2, 0], axis=0)))
        np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])

    def test_fancy_index_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(tsum(index(x, np.array([1, 1, 2]))))
        np.testing.assert_array_equal(x.grad, [0, 2, 1])

    def test_concat_split_gradient(self):
        rng = np.random.default_rng(8)
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 4)
        w = rng.standard_normal((2, 7))
        backward(scalar_of(concat([a, b], axis=-1), w))
        np.testing.assert_allclose(a.grad, w[:, :3])
        np.testing.assert_allclose(b.grad, w[:, 3:])

    def test_transpose_swaps_last_two(self):
        x = Tensor(np.zeros((2, 3, 4)))
        assert transpose(x).shape == (2, 4, 3)
        assert reshape(x, (6, 4)).shape == (6, 4)


OPS = {
    "add": lambda rng: ((leaf(rng, 3, 4), leaf(rng, 4)), lambda a, b: a + b),
    "sub": lambda rng: ((leaf(rng, 3, 4), leaf(rng, 3, 1)), lambda a, b: a - b),
    "mul": lambda rng: ((leaf(rng, 3, 4), leaf(rng, 3, 4)), lambda a, b: a * b),
    "matmul": lambda rng: ((leaf(rng, 3, 4), leaf(rng, 4, 2)), matmul),
    "transpose": lambda rng: ((leaf(rng, 3, 4),), transpose),
    "reshape": lambda rng: ((leaf(rng, 3, 4),), lambda a: reshape(a, (2, 6))),
    "index": lambda rng: ((leaf(rng, 5, 3),), lambda a: a[1:4]),
    "gather": lambda rng: ((leaf(rng, 4, 3),), lambda a: gather(a, [3, 0, 3], 0)),
    "concat": lambda rng: ((leaf(rng, 2, 3), leaf(rng, 2, 2)), lambda a, b: concat([a, b], -1)),
    "pad": lambda rng: ((leaf(rng, 3, 2),), lambda a: pad(a, 0, 2, 1)),
    "softmax_row": lambda rng: ((leaf(rng, 3, 4),), lambda a: softmax_axis(a, "row")),
    "softmax_column": lambda rng: ((leaf(rng, 3, 4),), lambda a: softmax_axis(a, "column")),
    "relu": lambda rng: ((leaf(rng, 3, 4),), relu),
    "gelu": lambda rng: ((leaf(rng, 3, 4),), gelu),
    "layer_norm": lambda rng: ((leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)), layer_norm),
    "conv1d": lambda rng: ((leaf(rng, 2, 9, 2), leaf(rng, 3, 2, 4), leaf(rng, 4)), conv1d),
    "lp_pool2": lambda rng: ((leaf(rng, 2, 7, 3),), lambda a: lp_pool2(a, 2, 2)),
    "mean": lambda rng: ((leaf(rng, 3, 4),), lambda a: a.mean(axis=0)),
}


class TestFiniteDifference:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_every_op_in_isolation(self, name):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        inputs, op = OPS[name](rng)
        with no_grad():
            shape = op(*inputs).shape
        w = rng.standard_normal(shape)
        params = {f"in{i}": t for i, t in enumerate(inputs)}
        err = finite_diff_check(lambda ps: scalar_of(op(*ps.values()), w), params, step=1e-5)
        assert err < 1e-6, name

    def test_quadratic_form(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((6, 6))
        x = leaf(rng, 6, 1)
        err = finite_diff_check(lambda ps: tsum(transpose(ps["x"]) @ Tensor(a) @ ps["x"]), {"x": x}, step=1e-5)
        assert err < 1e-8
        np.testing.assert_allclose(x.grad, (a + a.T) @ x.data, atol=1e-12)

    def test_reports_per_parameter(self):
        rng = np.random.default_rng(10)
        a, b = leaf(rng, 2), leaf(rng, 2)
        errs = gradient_errors(lambda ps: tsum(ps["a"] * ps["b"]), {"a": a, "b": b})
        assert set(errs) == {"a", "b"}

    def test_detects_wrong_gradient(self):
        from eltnilm.tensor import _make

        def bad_square(x):
            return _make("bad", x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        assert finite_diff_check(lambda ps: tsum(bad_square(ps["x"])), {"x": x}) > 0.3

    def test_nondeterministic_function_rejected(self):
        rng = np.random.default_rng(11)
        x = leaf(rng, 2)
        with pytest.raises(UsageError):
            finite_diff_check(lambda ps: tsum(ps["x"] * float(np.random.random())), {"x": x})

    def test_step_must_be_positive(self):
        with pytest.raises(UsageError):
            finite_diff_check(lambda ps: tsum(ps["x"]), {"x": Tensor([1.0], requires_grad=True)}, step=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_broadcast_add_gradient_shapes(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, rows, cols), leaf(rng, 1, cols)
    backward(tsum(a + b))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, np.full((1, cols), rows))
