"""Forward-semantics oracles for the primitive ops: hand-computed values,
an independent scipy cross-correlation implementation, and the
conv/conv-transpose adjoint identity."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy import signal

from runet import ops
from runet.tensor import ShapeError, Tensor, backward, no_grad


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_hand_computed_all_ones_kernel(self):
        x = t64(np.arange(1, 10).reshape(1, 1, 3, 3))
        k = t64(np.ones((1, 1, 3, 3)))
        b = t64(np.zeros(1))
        y = ops.conv2d(x, k, b, 1, 1)
        assert y.data[0, 0, 1, 1] == 45.0  # sum of all pixels
        assert y.data[0, 0, 0, 0] == 12.0  # 1+2+4+5

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = t64(rng.normal(size=(2, 1, 5, 5)))
        k = t64(np.ones((1, 1, 1, 1)))
        y = ops.conv2d(x, k, t64(np.zeros(1)), 1, 0)
        npt.assert_array_equal(y.data, x.data)

    def test_matches_scipy_correlate(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 10, 10))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        y = ops.conv2d(t64(x), t64(k), t64(b), 1, 1).data
        expected = np.zeros_like(y)
        for n in range(2):
            for o in range(4):
                acc = np.zeros((10, 10))
                for c in range(3):
                    acc += signal.correlate2d(x[n, c], k[o, c], mode="same")
                expected[n, o] = acc + b[o]
        npt.assert_allclose(y, expected, rtol=1e-12)

    def test_strided_output_size(self):
        x = t64(np.zeros((1, 2, 9, 9)))
        k = t64(np.zeros((3, 2, 3, 3)))
        y = ops.conv2d(x, k, t64(np.zeros(3)), 2, 1)
        assert y.shape == (1, 3, 5, 5)

    @pytest.mark.parametrize(
        "x_shape,k_shape",
        [
            ((1, 3, 8, 8), (4, 2, 3, 3)),  # channel mismatch
            ((1, 3, 8, 8), (4, 3, 2, 2)),  # even kernel
            ((1, 3, 8, 8), (4, 3, 5, 5)),  # non-integral stride-2 output
        ],
    )
    def test_shape_errors(self, x_shape, k_shape):
        x = t64(np.zeros(x_shape))
        k = t64(np.zeros(k_shape))
        with pytest.raises(ShapeError):
            ops.conv2d(x, k, t64(np.zeros(k_shape[0])), 2, 0)


class TestConvTranspose2d:
    def test_disjoint_stamping(self):
        x = t64(np.ones((1, 1, 2, 2)))
        k = t64(np.ones((1, 1, 2, 2)))
        y = ops.conv_transpose2d(x, k, t64(np.zeros(1)), 2, 0)
        assert y.shape == (1, 1, 4, 4)
        npt.assert_array_equal(y.data, np.ones((1, 1, 4, 4)))

    def test_output_size_formula(self):
        x = t64(np.zeros((1, 3, 5, 7)))
        k = t64(np.zeros((3, 2, 3, 3)))
        y = ops.conv_transpose2d(x, k, t64(np.zeros(2)), 2, 1)
        assert y.shape == (1, 2, (5 - 1) * 2 - 2 + 3, (7 - 1) * 2 - 2 + 3)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (2, 1), (1, 1)])
    def test_adjoint_identity(self, stride, padding):
        # <conv(x, K), y> == <x, conv_T(y, K)>, same kernel array in both
        rng = np.random.default_rng(7)
        size = 8 if stride == 1 else 9  # keep the conv output size integral
        x = rng.normal(size=(2, 3, size, size))
        k = rng.normal(size=(5, 3, 3, 3))
        fwd = ops.conv2d(t64(x), t64(k), t64(np.zeros(5)), stride, padding)
        y = rng.normal(size=fwd.shape)
        lhs = float((fwd.data * y).sum())
        back = ops.conv_transpose2d(t64(y), t64(k), t64(np.zeros(3)), stride, padding)
        rhs = float((x * back.data).sum())
        assert abs(lhs - rhs) / max(abs(lhs), abs(rhs)) < 1e-6

    def test_forward_equals_conv_backward_wrt_input(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 3, 9, 9)), requires_grad=True, dtype=np.float64)
        k = t64(rng.normal(size=(4, 3, 3, 3)))
        g = rng.normal(size=(1, 4, 5, 5))
        out = ops.conv2d(x, k, t64(np.zeros(4)), 2, 1)
        backward(ops.reduce_sum(ops.mul(out, t64(g))))
        stamped = ops.conv_transpose2d(t64(g), k, t64(np.zeros(3)), 2, 1)
        npt.assert_allclose(x.grad, stamped.data, rtol=1e-12)


class TestMaxPool:
    def test_window_max(self):
        x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
        y = ops.maxpool2d(x)
        assert y.data.reshape(()) == 4.0

    def test_tie_routes_to_first_element(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
        y = ops.maxpool2d(x)
        backward(ops.reduce_sum(y))
        npt.assert_array_equal(
            x.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]])
        )

    def test_constant_input_constant_output(self):
        x = t64(np.full((1, 3, 4, 4), 2.5))
        npt.assert_array_equal(ops.maxpool2d(x).data, np.full((1, 3, 2, 2), 2.5))

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            ops.maxpool2d(t64(np.zeros((1, 1, 5, 4))))


class TestGroupNorm:
    def test_normalizes_per_group(self):
        rng = np.random.default_rng(2)
        x = t64(rng.normal(3.0, 2.0, size=(2, 8, 6, 6)))
        y = ops.group_norm(x, 4, t64(np.ones(8)), t64(np.zeros(8))).data
        grouped = y.reshape(2, 4, -1)
        npt.assert_allclose(grouped.mean(-1), 0.0, atol=1e-6)
        npt.assert_allclose(grouped.var(-1), 1.0, atol=1e-4)

    def test_constant_input_returns_shift(self):
        x = t64(np.full((1, 4, 3, 3), 7.0))
        beta = np.array([0.5, -1.0, 0.0, 2.0])
        y = ops.group_norm(x, 2, t64(np.ones(4)), t64(beta)).data
        npt.assert_allclose(y, beta.reshape(1, 4, 1, 1) * np.ones((1, 4, 3, 3)))

    def test_indivisible_channels_rejected(self):
        with pytest.raises(ShapeError):
            ops.group_norm(
                t64(np.zeros((1, 6, 2, 2))), 4, t64(np.ones(6)), t64(np.zeros(6))
            )


class TestPointwise:
    def test_blend_saturation(self):
        rng = np.random.default_rng(4)
        a = t64(rng.normal(size=(2, 3, 4, 4)))
        b = t64(rng.normal(size=(2, 3, 4, 4)))
        ones = t64(np.ones((2, 3, 4, 4)))
        zeros_ = t64(np.zeros((2, 3, 4, 4)))
        npt.assert_array_equal(ops.affine_blend(ones, a, b).data, a.data)
        npt.assert_array_equal(ops.affine_blend(zeros_, a, b).data, b.data)

    def test_symmetry_points(self):
        assert ops.sigmoid(t64(np.zeros(1))).data[0] == 0.5
        assert ops.tanh(t64(np.zeros(1))).data[0] == 0.0

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True, dtype=np.float64)
        backward(ops.reduce_sum(ops.relu(x)))
        npt.assert_array_equal(x.grad, np.array([0.0, 0.0, 1.0]))

    def test_scalar_ops(self):
        x = t64([1.0, 2.0])
        npt.assert_array_equal((x + 1.0).data, [2.0, 3.0])
        npt.assert_array_equal((3.0 * x).data, [3.0, 6.0])


class TestConcatSlice:
    def test_shapes(self):
        a = t64(np.zeros((1, 3, 4, 4)))
        b = t64(np.zeros((1, 1, 4, 4)))
        assert ops.concat_channels(a, b).shape == (1, 4, 4, 4)

    def test_concat_then_slice_roundtrip(self):
        rng = np.random.default_rng(6)
        a = t64(rng.normal(size=(2, 3, 4, 4)))
        b = t64(rng.normal(size=(2, 2, 4, 4)))
        cat = ops.concat_channels(a, b)
        npt.assert_array_equal(ops.slice_channels(cat, 0, 3).data, a.data)
        npt.assert_array_equal(ops.slice_channels(cat, 3, 5).data, b.data)

    def test_mismatched_spatial_rejected(self):
        with pytest.raises(ShapeError):
            ops.concat_channels(t64(np.zeros((1, 1, 4, 4))), t64(np.zeros((1, 1, 2, 4))))


class TestBceWithLogits:
    def test_symmetric_point(self):
        loss = ops.bce_with_logits(t64(np.zeros((2, 2))), t64(np.full((2, 2), 0.5)))
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_saturated_logit_stable(self):
        loss = ops.bce_with_logits(t64(np.full((1,), 20.0)), t64(np.ones(1)))
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss.item() == pytest.approx(2.061153622e-09, rel=1e-6)

    @pytest.mark.parametrize("logit", [1e4, -1e4])
    def test_extreme_logits_no_nan(self, logit):
        x = Tensor(np.full((3, 3), logit), requires_grad=True, dtype=np.float64)
        loss = ops.bce_with_logits(x, t64(np.full((3, 3), 0.5)))
        assert math.isfinite(loss.item())
        backward(loss)
        assert np.isfinite(x.grad).all()

    def test_target_out_of_range_rejected(self):
        with pytest.raises(ShapeError):
            ops.bce_with_logits(t64(np.zeros(2)), t64(np.array([0.5, 1.5])))


def test_inference_mode_matches_recorded_forward():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True, dtype=np.float64)
    k = t64(rng.normal(size=(3, 2, 3, 3)))
    y_rec = ops.conv2d(x, k, t64(np.zeros(3)), 1, 1)
    with no_grad():
        y_inf = ops.conv2d(x, k, t64(np.zeros(3)), 1, 1)
    npt.assert_array_equal(y_rec.data, y_inf.data)
    from runet.tensor import clear_tape

    clear_tape()
