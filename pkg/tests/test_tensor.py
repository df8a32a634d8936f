"""Tensor-core ops: elementwise, matmul, softmax, pooling, concat, reverse."""

import math

import numpy as np
import pytest

from tristream import (ShapeError, Tensor, add_bias, avg_pool_time,
                       concat_channels, elementwise, matmul, relu,
                       reverse_time, scale_channels, sigmoid, softmax, tanh,
                       tsum)


class TestElementwise:
    def test_relu_sign_boundaries(self):
        assert np.array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sigmoid_symmetry_point(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_add(self):
        assert np.array_equal(elementwise("add", Tensor([1.0, 2.0]),
                                          Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_sub_mul(self):
        a, b = Tensor([5.0, 7.0]), Tensor([2.0, 3.0])
        assert np.array_equal(elementwise("sub", a, b).data, [3.0, 4.0])
        assert np.array_equal(elementwise("mul", a, b).data, [10.0, 21.0])

    def test_tanh_matches_numpy(self):
        x = np.linspace(-3, 3, 7)
        assert np.allclose(tanh(Tensor(x)).data, np.tanh(x))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_scalar_broadcast_is_allowed(self):
        out = elementwise("mul", Tensor([1.0, 2.0, 3.0]), 2.0)
        assert np.array_equal(out.data, [2.0, 4.0, 6.0])

    def test_scalar_broadcast_gradient(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        s = Tensor(3.0, requires_grad=True)
        tsum(elementwise("mul", t, s)).backward()
        assert np.array_equal(t.grad, [3.0, 3.0])
        assert s.grad == 3.0  # sum of the tensor operand

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            elementwise("pow", Tensor([1.0]))

    def test_finite_outputs_for_extreme_inputs(self):
        x = Tensor([-1e6, -50.0, 0.0, 50.0, 1e6])
        for fn in (relu, sigmoid, tanh):
            assert np.all(np.isfinite(fn(x).data))


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(Tensor(np.eye(2)), m).data, m.data)

    def test_hand_evaluated_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_zeros_annihilate(self):
        out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(15.0).reshape(3, 5)))
        assert np.array_equal(out.data, np.zeros((2, 5)))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_hand_evaluated(self):
        out = softmax(Tensor([0.0, math.log(3.0)]))
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_normalization_tight(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = rng.normal(size=17) * 10
            s = softmax(Tensor(v)).data
            assert abs(s.sum() - 1.0) <= 1e-12
            assert np.all(s > 0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=9)
        a = softmax(Tensor(v)).data
        b = softmax(Tensor(v + 123.456)).data
        assert np.allclose(a, b, atol=1e-15)

    def test_huge_logits_do_not_overflow(self):
        s = softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(s)) and abs(s.sum() - 1.0) <= 1e-12


class TestSignalOps:
    def test_reverse_involution(self):
        x = np.random.default_rng(2).normal(size=(3, 7))
        assert np.array_equal(reverse_time(reverse_time(Tensor(x))).data, x)

    def test_reverse_vector(self):
        assert np.array_equal(reverse_time(Tensor([1.0, 2.0, 3.0])).data,
                              [3.0, 2.0, 1.0])

    def test_reverse_constant_unchanged(self):
        x = np.full((2, 5), 3.5)
        assert np.array_equal(reverse_time(Tensor(x)).data, x)

    def test_pool_constant(self):
        x = np.full((2, 9), 4.0)
        x[1] = -1.5
        assert np.array_equal(avg_pool_time(Tensor(x)).data, [4.0, -1.5])

    def test_pool_arithmetic(self):
        assert avg_pool_time(Tensor([[1.0, 2.0, 3.0]])).data[0] == 2.0

    def test_pool_linearity(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        lhs = avg_pool_time(Tensor(a + b)).data
        rhs = avg_pool_time(Tensor(a)).data + avg_pool_time(Tensor(b)).data
        assert np.allclose(lhs, rhs, atol=1e-15)

    def test_pool_empty_time_axis_rejected(self):
        with pytest.raises(ShapeError):
            avg_pool_time(Tensor(np.zeros((3, 0))))

    def test_concat_round_trip(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0, 5.0])
        out = concat_channels([Tensor(a), Tensor(b)])
        assert np.array_equal(out.data[:2], a)
        assert np.array_equal(out.data[2:], b)

    def test_concat_widths_sum(self):
        parts = [Tensor(np.zeros(c)) for c in (2, 3, 4)]
        assert concat_channels(parts).shape == (9,)

    def test_concat_single_part_identity(self):
        x = np.random.default_rng(4).normal(size=(3, 5))
        assert np.array_equal(concat_channels([Tensor(x)]).data, x)

    def test_concat_time_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            concat_channels([Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 6)))])

    def test_concat_batched_axis(self):
        a, b = np.ones((2, 3)), np.zeros((2, 4))
        out = concat_channels([Tensor(a), Tensor(b)], batched=True)
        assert out.shape == (2, 7)

    def test_add_bias_rows(self):
        out = add_bias(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([10.0, 20.0]))
        assert np.array_equal(out.data, [[11.0, 22.0], [13.0, 24.0]])

    def test_scale_channels(self):
        x = np.ones((2, 4))
        out = scale_channels(Tensor(x), Tensor([2.0, -1.0]))
        assert np.array_equal(out.data, [[2.0] * 4, [-1.0] * 4])
