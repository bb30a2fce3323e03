"""Tensor engine: forward values, loop oracles, tape semantics and gradients."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cocoreco import tensor as T
from cocoreco.tensor import ParameterError, ShapeError, Tape, TapeError, Tensor


def _rand(rng, *shape):
    return rng.standard_normal(shape)


class TestConv2d:
    def test_all_ones_counts_overlap(self):
        out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1)
        np.testing.assert_array_equal(out.data[0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_loop_oracle_stride_two(self):
        rng = np.random.default_rng(1)
        x, w, b = _rand(rng, 1, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 0)
        assert oracles.rel_err(out.data, oracles.conv2d(x, w, b, 2, 0)) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_shapes_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        B, C, K = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        H, W = rng.integers(3, 8, size=2)
        k, s, p = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, w, b = _rand(rng, B, C, H, W), _rand(rng, K, C, k, k), _rand(rng, K)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), s, p)
        assert out.shape == (B, K, (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1)
        assert oracles.rel_err(out.data, oracles.conv2d(x, w, b, s, p)) < 1e-6

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_bad_stride(self):
        with pytest.raises(ParameterError):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


class TestPool2d:
    def test_avg_of_constant(self):
        out = T.pool2d(Tensor(np.full((1, 2, 4, 4), 0.3)), "avg", 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 0.3))

    def test_max_small(self):
        out = T.pool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), "max", 2, 2)
        np.testing.assert_array_equal(out.data, [[[4.0]]])

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_oracle(self, kind):
        rng = np.random.default_rng(2)
        for _ in range(20):
            H = int(rng.integers(2, 7))
            k = int(rng.integers(1, H + 1))
            s = int(rng.integers(1, 3))
            x = _rand(rng, 2, 3, H, H)
            out = T.pool2d(Tensor(x), kind, k, s)
            assert oracles.rel_err(out.data, oracles.pool2d(x, kind, k, s)) < 1e-6

    def test_max_tie_routes_to_first_argmax(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape():
            T.backward(T.reduce_spatial(T.pool2d(x, "max", 2), "sum"))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    @pytest.mark.parametrize("k,s", [(0, 1), (2, 0)])
    def test_parameter_errors(self, k, s):
        with pytest.raises(ParameterError):
            T.pool2d(Tensor(np.zeros((1, 4, 4))), "max", k, s)


class TestUpsample:
    def test_constant_stays_constant(self):
        out = T.upsample_bilinear2d(Tensor(np.full((1, 2, 3, 2), 1.7)), 7, 5)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 7, 5), 1.7))

    def test_single_pixel_broadcasts(self):
        out = T.upsample_bilinear2d(Tensor(np.array([[[2.5]]])), 4, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 4, 3), 2.5))

    def test_two_to_four_closed_form(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = T.upsample_bilinear2d(Tensor(x), 4, 4).data[0]
        # half-pixel centres sample at -0.25, 0.25, 0.75, 1.25 (clamped to [0, 1])
        f = np.array([0.0, 0.25, 0.75, 1.0])
        expect = 1 + 2 * f[:, None] + f[None, :]
        np.testing.assert_allclose(out, expect, rtol=1e-12)

    def test_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            H, W = rng.integers(1, 5, size=2)
            oh, ow = rng.integers(1, 9, size=2)
            x = _rand(rng, 2, H, W)
            out = T.upsample_bilinear2d(Tensor(x), int(oh), int(ow))
            assert oracles.rel_err(out.data, oracles.bilinear(x, oh, ow)) < 1e-6


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(4).standard_normal((3, 4))
        np.testing.assert_array_equal(T.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_zero_weight_gives_bias(self):
        out = T.dense(Tensor(np.ones((3, 4))), Tensor(np.zeros((2, 4))), Tensor(np.array([1.5, -2.0])))
        np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (3, 1)))

    def test_oracle(self):
        rng = np.random.default_rng(5)
        x, w, b = _rand(rng, 5, 7), _rand(rng, 3, 7), _rand(rng, 3)
        assert oracles.rel_err(T.dense(Tensor(x), Tensor(w), Tensor(b)).data, oracles.dense(x, w, b)) < 1e-6

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestElementwise:
    def test_add_zero_and_commutes(self):
        rng = np.random.default_rng(6)
        a, b = Tensor(_rand(rng, 2, 3)), Tensor(_rand(rng, 2, 3))
        np.testing.assert_array_equal(T.add(a, Tensor(np.zeros((2, 3)))).data, a.data)
        np.testing.assert_array_equal(T.add(a, b).data, T.add(b, a).data)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_scale_channels(self):
        x = np.random.default_rng(7).standard_normal((2, 3, 2, 2))
        np.testing.assert_array_equal(T.scale_channels(Tensor(x), np.ones(3)).data, x)
        np.testing.assert_array_equal(T.scale_channels(Tensor(x), np.zeros(3)).data, np.zeros_like(x))
        out = T.scale_channels(Tensor(x), np.array([2.0, 1.0, 1.0])).data
        np.testing.assert_array_equal(out[:, 0], 2 * x[:, 0])
        np.testing.assert_array_equal(out[:, 1:], x[:, 1:])

    def test_scale_rejects_non_finite(self):
        with pytest.raises(ParameterError):
            T.scale_channels(Tensor(np.ones((2, 2, 2))), np.array([1.0, np.nan]))

    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])


class TestReduceSpatial:
    def test_single_peak_and_sum(self):
        x = np.zeros((1, 4, 4))
        x[0, 2, 1] = 3.0
        assert T.reduce_spatial(Tensor(x), "max").data[0] == 3.0
        assert T.reduce_spatial(Tensor(np.ones((1, 4, 4))), "sum").data[0] == 16.0

    def test_oracle(self):
        x = np.random.default_rng(8).standard_normal((2, 3, 4, 5))
        for kind, fn in (("max", np.max), ("sum", np.sum), ("mean", np.mean)):
            ref = np.array([[fn([x[b, c, i, j] for i in range(4) for j in range(5)]) for c in range(3)] for b in range(2)])
            assert oracles.rel_err(T.reduce_spatial(Tensor(x), kind).data, ref) < 1e-9


class TestLosses:
    def test_equal_logits_give_log_k(self):
        assert math.isclose(T.softmax_cross_entropy(Tensor(np.zeros((2, 5))), [0, 3]).item(), math.log(5), rel_tol=1e-12)

    def test_confident_logit(self):
        assert T.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0, 0.0]])), [0]).item() < 1e-6

    def test_worked_value(self):
        loss = T.softmax_cross_entropy(Tensor(np.array([[1.0, 2.0, 3.0]])), [2]).item()
        assert math.isclose(loss, math.log(1 + math.exp(-1) + math.exp(-2)), rel_tol=1e-12)
        assert round(loss, 5) == 0.40761

    def test_label_out_of_range(self):
        with pytest.raises(ParameterError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_mse(self):
        x = np.random.default_rng(9).standard_normal((3, 4))
        assert T.mse_loss(Tensor(x), Tensor(x)).item() == 0.0
        assert math.isclose(T.mse_loss(Tensor(x), Tensor(x + 1)).item(), 1.0, rel_tol=1e-12)
        y = np.random.default_rng(10).standard_normal((3, 4))
        ref = sum((x[i, j] - y[i, j]) ** 2 for i in range(3) for j in range(4)) / 12
        assert math.isclose(T.mse_loss(Tensor(x), Tensor(y)).item(), ref, rel_tol=1e-12)


class TestTape:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(11).standard_normal((2, 3, 3)), requires_grad=True)
        with Tape():
            T.backward(T.reduce_spatial(T.reshape(T.reduce_spatial(x, "sum"), (1, 1, 2)), "sum"))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_unused_input_gets_zero_grad(self):
        x = Tensor(np.ones((2, 2, 2)), requires_grad=True)
        z = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            T.backward(T.mse_loss(T.reduce_spatial(x, "sum"), Tensor(np.zeros(2))), [x, z])
        np.testing.assert_array_equal(z.grad, np.zeros(3))
        assert x.grad is not None

    def test_nodes_in_append_order(self):
        x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            T.reduce_spatial(T.relu(x), "sum")
        assert [n.kind for n in tape.nodes] == ["relu", "reduce_sum"]

    def test_gradients_accumulate_on_shared_inputs(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape():
            y = T.add(x, x)
            T.backward(T.mse_loss(y, Tensor(np.zeros(2))))
        # d/dx mean((2x)^2) = 4x
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_backward_after_tape_released(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape():
            loss = T.mse_loss(x, Tensor(np.zeros(2)))
        import gc

        gc.collect()
        with pytest.raises(TapeError):
            T.backward(loss)

    def test_conv_relu_sum_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        x, w = Tensor(_rand(rng, 1, 2, 5, 5)), Tensor(_rand(rng, 2, 2, 3, 3))

        def fn(x, w):
            return T.reduce_spatial(T.reshape(T.reduce_spatial(T.relu(T.conv2d(x, w, None, 1, 1)), "sum"), (1, 1, 2)), "sum")

        assert T.grad_check(fn, [x, w]) < 1e-4


class TestGradCheck:
    def test_linear_function_is_exact(self):
        rng = np.random.default_rng(13)
        # central differences of a linear map are exact up to roundoff ~ |f| * 1e-16 / eps
        x, w, b = Tensor(_rand(rng, 1, 2)), Tensor(_rand(rng, 1, 2)), Tensor(_rand(rng, 1))
        fn = lambda x, w, b: T.reshape(T.dense(x, w, b), ())
        assert T.grad_check(fn, [x, w, b]) < 1e-10

    def test_conv_passes(self):
        rng = np.random.default_rng(14)
        x, w = Tensor(_rand(rng, 1, 2, 4, 4)), Tensor(_rand(rng, 3, 2, 3, 3))
        tgt = Tensor(_rand(rng, 1, 3, 4, 4))
        assert T.grad_check(lambda x, w: T.mse_loss(T.conv2d(x, w, None, 1, 1), tgt), [x, w], eps=1e-5) < 1e-4

    def test_detects_corrupted_backward(self):
        rng = np.random.default_rng(15)

        def bad_square(x):
            return T.custom_op("bad_square", x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

        x = Tensor(_rand(rng, 5) + 3.0)
        fn = lambda x: T.mse_loss(bad_square(x), Tensor(np.zeros(5)))
        assert T.grad_check(fn, [x]) > 1e-4


class TestFiniteness:
    def test_non_finite_forward_raises(self):
        with pytest.raises(FloatingPointError):
            T.dense(Tensor(np.array([[np.inf]])), Tensor(np.ones((1, 1))))
