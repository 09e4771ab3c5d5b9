import math

import numpy as np
import pytest

from mapfusion.autodiff import (
    Tensor,
    add,
    batchnorm2d,
    bce_with_logits,
    concat_channels,
    conv2d,
    grad_check,
    l1_masked,
    mul_scalar,
    penalty_reduced_focal,
    relu,
    sigmoid,
)


def naive_conv2d(x, w, b, pad):
    """Six-nested-loop reference convolution (cross-correlation)."""
    c_out, c_in, k, _ = w.shape
    h, wd = x.shape[1], x.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((c_out, h + 2 * pad - k + 1, wd + 2 * pad - k + 1), x.dtype)
    for co in range(c_out):
        for y in range(out.shape[1]):
            for xx in range(out.shape[2]):
                acc = 0.0
                for ci in range(c_in):
                    for ky in range(k):
                        for kx in range(k):
                            acc += xp[ci, y + ky, xx + kx] * w[co, ci, ky, kx]
                out[co, y, xx] = acc + (0.0 if b is None else b[co])
    return out


class TestConv2d:
    def test_ones_counting(self):
        x = Tensor(np.ones((1, 3, 3), np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), np.float32))
        b = Tensor(np.zeros(1, np.float32))
        out = conv2d(x, w, b, padding=1)
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], np.float32)
        np.testing.assert_array_equal(out.data[0], expected)

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 5)).astype(np.float32))
        w = np.zeros((2, 2, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), padding=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_matches_naive_oracle_f32(self, rng):
        x = (0.4 * rng.standard_normal((2, 5, 5))).astype(np.float32)
        w = (0.4 * rng.standard_normal((3, 2, 3, 3))).astype(np.float32)
        b = (0.4 * rng.standard_normal(3)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 1), atol=1e-6)

    def test_matches_naive_oracle_f64(self, rng):
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 1), atol=1e-9)

    def test_1x1_matches_naive_oracle(self, rng):
        x = rng.standard_normal((4, 6, 6)).astype(np.float32)
        w = rng.standard_normal((2, 4, 1, 1)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=0)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 0), atol=1e-6)

    def test_gradients_vs_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        tgt = rng.standard_normal((3, 5, 5))

        def loss():
            out = conv2d(x, w, b, padding=1)
            return l1_masked(out, tgt, np.ones((5, 5)))

        assert grad_check(loss, [x, w, b]) < 1e-6

    def test_shape_errors_name_operand(self, rng):
        with pytest.raises(ValueError, match="input channels"):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ValueError, match="kernel size"):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 5, 5))))
        with pytest.raises(ValueError, match="bias"):
            conv2d(
                Tensor(np.zeros((2, 4, 4))),
                Tensor(np.zeros((3, 2, 3, 3))),
                Tensor(np.zeros(2)),
            )
        with pytest.raises(NotImplementedError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))), stride=2)


class TestBatchnorm:
    def test_train_standardizes(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32) * 3 + 1)
        gain = Tensor(np.ones(3, np.float32))
        offset = Tensor(np.zeros(3, np.float32))
        rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
        out = batchnorm2d(x, gain, offset, rm, rv, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_standardized_input_fixed_point(self, rng):
        x = rng.standard_normal((1, 2, 32, 32))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        xt = Tensor(x)
        out = batchnorm2d(
            xt, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True
        )
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        rm, rv = np.zeros(3), np.ones(3)
        batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True)
        n = 2 * 4 * 4
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(
            rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), atol=1e-12
        )

    def test_eval_uses_running_stats(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        rm = np.array([1.0, -1.0])
        rv = np.array([4.0, 0.25])
        out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False)
        expected = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_gradients_vs_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        gain = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        offset = Tensor(rng.standard_normal(3), requires_grad=True)
        tgt = rng.standard_normal((2, 3, 4, 4))

        def loss():
            rm, rv = np.zeros(3), np.ones(3)  # fresh so repeated calls match
            out = batchnorm2d(x, gain, offset, rm, rv, training=True)
            diff = add(out, mul_scalar(Tensor(tgt), -1.0))
            return l1_masked(
                relu(diff), np.zeros_like(tgt), np.ones(tgt.shape[-2:])
            )

        # smooth surrogate: mean of relu(out - tgt); kinks are measure-zero
        assert grad_check(loss, [x, gain, offset]) < 1e-4

    def test_train_requires_two_samples(self):
        with pytest.raises(ValueError, match="N\\*H\\*W"):
            batchnorm2d(
                Tensor(np.zeros((1, 2, 1, 1))),
                Tensor(np.ones(2)),
                Tensor(np.zeros(2)),
                np.zeros(2),
                np.ones(2),
                True,
            )


class TestElementwise:
    def test_relu_values(self):
        out = relu(Tensor(np.array([-1.0, 2.0, 0.0])))
        np.testing.assert_array_equal(out.data, [0.0, 2.0, 0.0])

    def test_concat_recoverable(self, rng):
        a = rng.standard_normal((2, 4, 4))
        b = rng.standard_normal((3, 4, 4))
        out = concat_channels(Tensor(a), Tensor(b))
        assert out.shape == (5, 4, 4)
        np.testing.assert_array_equal(out.data[:2], a)
        np.testing.assert_array_equal(out.data[2:], b)

    def test_concat_shape_error(self):
        with pytest.raises(ValueError, match="spatial mismatch"):
            concat_channels(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 5, 4))))

    def test_concat_gradient_splits(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 3)), requires_grad=True)
        tgt = rng.standard_normal((3, 3, 3))

        def loss():
            return l1_masked(concat_channels(a, b), tgt, np.ones((3, 3)))

        assert grad_check(loss, [a, b]) < 1e-6

    def test_sigmoid_gradient(self, rng):
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)

        def loss():
            return l1_masked(sigmoid(x), np.zeros((4, 4)), np.ones((4, 4)))

        assert grad_check(loss, [x]) < 1e-6

    def test_relu_gradient_away_from_kink(self, rng):
        data = rng.standard_normal((5, 5))
        data[np.abs(data) < 0.1] = 0.5  # rejection: keep clear of the kink
        x = Tensor(data, requires_grad=True)

        def loss():
            return l1_masked(relu(x), np.zeros((5, 5)) - 1.0, np.ones((5, 5)))

        assert grad_check(loss, [x]) < 1e-6


class TestLosses:
    def test_bce_zero_logits_is_ln2(self, rng):
        logits = Tensor(np.zeros((3, 8, 8)))
        targets = (rng.uniform(size=(3, 8, 8)) > 0.5).astype(np.float64)
        loss = bce_with_logits(logits, targets)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_bce_saturated(self):
        loss = bce_with_logits(Tensor(np.array([20.0])), np.array([1.0]))
        assert loss.item() < 1e-8

    def test_bce_matches_direct_formula(self, rng):
        z = rng.standard_normal((4, 6)) * 3
        t = rng.uniform(size=(4, 6))
        loss = bce_with_logits(Tensor(z), t)
        p = 1.0 / (1.0 + np.exp(-z))
        direct = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
        assert loss.item() == pytest.approx(direct, abs=1e-9)

    def test_bce_target_validation(self):
        with pytest.raises(ValueError, match="targets"):
            bce_with_logits(Tensor(np.zeros(3)), np.array([0.0, 1.0, 1.5]))

    def test_bce_gradient(self, rng):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        t = rng.uniform(size=(3, 5))

        def loss():
            return bce_with_logits(x, t)

        assert grad_check(loss, [x]) < 1e-7

    def test_focal_perfect_predictions(self):
        t = np.zeros((2, 6, 6))
        t[0, 2, 3] = 1.0
        t[1, 4, 1] = 1.0
        z = np.where(t >= 1.0, 30.0, -30.0)
        loss = penalty_reduced_focal(Tensor(z), t)
        assert loss.item() < 1e-6

    def test_focal_gradient(self, rng):
        t = np.clip(rng.uniform(-0.2, 1.0, size=(2, 6, 6)), 0.0, 1.0)
        t[0, 1, 1] = 1.0
        x = Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)

        def loss():
            return penalty_reduced_focal(x, t)

        assert grad_check(loss, [x]) < 1e-4

    def test_l1_masked_empty_mask_is_zero(self, rng):
        pred = Tensor(rng.standard_normal((4, 5, 5)), requires_grad=True)
        loss = l1_masked(pred, np.zeros((4, 5, 5)), np.zeros((5, 5)))
        assert loss.item() == 0.0
        loss.backward()
        assert not pred.grad.any()

    def test_l1_masked_value(self, rng):
        pred = rng.standard_normal((2, 4, 4))
        tgt = rng.standard_normal((2, 4, 4))
        mask = (rng.uniform(size=(4, 4)) > 0.5).astype(np.float64)
        loss = l1_masked(Tensor(pred), tgt, mask)
        sel = np.broadcast_to(mask > 0, pred.shape)
        expected = np.abs(pred - tgt)[sel].mean()
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_l1_gradient(self, rng):
        pred = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
        tgt = rng.standard_normal((2, 4, 4))
        mask = (rng.uniform(size=(4, 4)) > 0.4).astype(np.float64)

        def loss():
            return l1_masked(pred, tgt, mask)

        assert grad_check(loss, [pred]) < 1e-4


class TestEngine:
    def test_gradient_accumulates_over_two_consumers(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)

        def loss():
            a = mul_scalar(x, 2.0)
            b = mul_scalar(x, 3.0)
            return add(
                l1_masked(a, np.zeros((2, 3, 3)), np.ones((3, 3))),
                l1_masked(b, np.zeros((2, 3, 3)), np.ones((3, 3))),
            )

        assert grad_check(loss, [x]) < 1e-6

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros(3), requires_grad=True).backward()

    def test_eval_forward_deterministic(self, rng):
        x = rng.standard_normal((3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        o1 = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        o2 = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        assert (o1 == o2).all()
