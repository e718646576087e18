"""nn-core: forward/backward correctness, capture semantics, im2col."""

import numpy as np
import pytest

from kronfisher.errors import DimensionError, StateError, ValidationError
from kronfisher.nn import (
    Activation, BatchNorm, Dense, LayerNorm, Network, build_network, col2im,
    im2col, nll_softmax_loss,
)
from kronfisher.tensor import SeededRng, gaussian_fill


def finite_diff_grads(net, x, y, eps=1e-5):
    """Central finite differences of the batch-mean loss for every parameter."""
    out = {}
    for lid, layer in net.parametric_layers():
        out[lid] = {}
        for key, p in layer.params.items():
            g = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = p[idx]
                p[idx] = orig + eps
                lp, _ = nll_softmax_loss(net.forward(x, training=False), y)
                p[idx] = orig - eps
                lm, _ = nll_softmax_loss(net.forward(x, training=False), y)
                p[idx] = orig
                g[idx] = (lp - lm) / (2 * eps)
            out[lid][key] = g
    return out


def max_rel_err(analytic, numeric):
    # denominator floored at 1e-6: below that scale central differences at
    # eps=1e-5 are dominated by f64 cancellation noise (~1e-11 absolute)
    worst = 0.0
    for lid in analytic:
        for key in analytic[lid]:
            a = analytic[lid][key]
            n = numeric[lid][key]
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


class TestForward:
    def test_single_dense_direct(self):
        layer = Dense(2, 1)
        layer.params["weight"] = np.array([[1.0, 1.0, 0.0]])
        net = Network([layer])
        assert net.forward(np.array([[1.0, 2.0]]))[0, 0] == pytest.approx(3.0)

    def test_identity_layernorm_fixed_point(self):
        ln = LayerNorm(4)
        x = gaussian_fill(SeededRng(2), (6, 4))
        x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
        out = ln.forward(x, training=False)
        # only the 1e-5 variance damping perturbs an already-normalized input
        assert np.max(np.abs(out - x)) < 1e-4

    def test_toy_conv_net_shapes(self, digits_train):
        from conftest import TOY_CONV

        net = build_network(TOY_CONV).init_params(SeededRng(0))
        logits = net.forward(digits_train.features[:1], training=False)
        assert logits.shape == (1, 10)
        assert np.all(np.isfinite(logits))

    def test_shape_mismatch(self):
        net = Network([Dense(3, 2)])
        with pytest.raises(DimensionError):
            net.forward(np.ones((1, 4)))


class TestLoss:
    def test_uniform_logits(self):
        loss, _ = nll_softmax_loss(np.zeros((2, 10)), np.array([3, 7]))
        assert loss == pytest.approx(np.log(10.0), abs=1e-12)

    def test_saturated_margin(self):
        logits = np.array([[50.0, 0.0, 0.0]])
        loss, _ = nll_softmax_loss(logits, np.array([0]))
        assert loss < 1e-12

    def test_logsumexp_oracle(self):
        logits = gaussian_fill(SeededRng(3), (4, 3))
        targets = np.array([0, 2, 1, 1])
        loss, dlogits = nll_softmax_loss(logits, targets)
        expected = 0.0
        for i in range(4):
            row = logits[i]
            expected += -(row[targets[i]] - np.log(np.sum(np.exp(row))))
        assert loss == pytest.approx(expected / 4, abs=1e-12)
        # gradient rows sum to zero and carry the 1/batch factor
        assert np.max(np.abs(dlogits.sum(axis=1))) < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(ValidationError):
            nll_softmax_loss(np.zeros((1, 3)), np.array([3]))


class TestBackward:
    def test_scalar_chain_rule(self):
        layer = Dense(1, 1)
        w, b = 0.7, -0.2
        layer.params["weight"] = np.array([[w, b]])
        net = Network([layer])
        x = np.array([[1.5]])
        logits = net.forward(x, training=True)
        # squared-error surrogate d(0.5*(z-t)^2)/dz = z - t, fed directly
        target = 2.0
        dz = logits - target
        net.backward(dz)
        z = w * 1.5 + b
        assert layer.grads["weight"][0, 0] == pytest.approx((z - target) * 1.5, abs=1e-12)
        assert layer.grads["weight"][0, 1] == pytest.approx(z - target, abs=1e-12)

    @pytest.mark.parametrize("layers,x_shape,seed", [
        ([{"kind": "dense", "in": 4, "out": 5}, {"kind": "relu"},
          {"kind": "dense", "in": 5, "out": 3}], (6, 4), 3),
        ([{"kind": "dense", "in": 4, "out": 5}, {"kind": "tanh"},
          {"kind": "dense", "in": 5, "out": 3}], (6, 4), 3),
        ([{"kind": "dense", "in": 4, "out": 6}, {"kind": "layernorm", "features": 6},
          {"kind": "relu"}, {"kind": "dense", "in": 6, "out": 3}], (5, 4), 3),
        ([{"kind": "dense", "in": 4, "out": 6}, {"kind": "batchnorm", "channels": 6},
          {"kind": "tanh"}, {"kind": "dense", "in": 6, "out": 3}], (5, 4), 3),
        ([{"kind": "conv2d", "c_in": 2, "c_out": 3, "k_h": 3, "k_w": 3,
           "stride": 1, "padding": 1},
          {"kind": "batchnorm", "channels": 3}, {"kind": "tanh"},
          {"kind": "conv2d", "c_in": 3, "c_out": 2, "k_h": 2, "k_w": 2,
           "stride": 2, "padding": 0},
          {"kind": "tanh"}, {"kind": "dense", "in": 18, "out": 3}], (4, 2, 6, 6), 3),
    ])
    def test_finite_difference_all_layer_kinds(self, layers, x_shape, seed):
        net = build_network(layers).init_params(SeededRng(seed))
        x = gaussian_fill(SeededRng(seed + 1), x_shape)
        logits = net.forward(x, training=True)
        y = SeededRng(seed + 2).integers(x_shape[0], logits.shape[1])
        _, dlogits = nll_softmax_loss(logits, y)
        grads = net.backward(dlogits)
        assert max_rel_err(grads, finite_diff_grads(net, x, y)) <= 1e-4

    def test_relu_dead_region_zero_gradient(self):
        dense = Dense(1, 1)
        dense.params["weight"] = np.array([[1.0, 0.0]])
        head = Dense(1, 2)
        head.params["weight"] = np.array([[1.0, 0.0], [-1.0, 0.0]])
        net = Network([dense, Activation("relu"), head])
        logits = net.forward(np.array([[-2.0]]), training=True)  # preactivation -2 < 0
        _, dlogits = nll_softmax_loss(logits, np.array([0]))
        grads = net.backward(dlogits)
        assert np.all(grads[0]["weight"] == 0.0)

    def test_backward_without_forward(self):
        net = Network([Dense(2, 2)])
        with pytest.raises(StateError):
            net.backward(np.zeros((1, 2)))

    def test_purity_of_capture(self):
        net = build_network([{"kind": "dense", "in": 3, "out": 4}, {"kind": "relu"},
                             {"kind": "dense", "in": 4, "out": 2}]).init_params(SeededRng(5))
        x = gaussian_fill(SeededRng(6), (4, 3))
        y = np.array([0, 1, 1, 0])
        logits1 = net.forward(x, training=True)
        loss1, dl = nll_softmax_loss(logits1, y)
        net.backward(dl)
        logits2 = net.forward(x, training=True)
        loss2, _ = nll_softmax_loss(logits2, y)
        assert loss1 == loss2


class TestKroneckerVectorization:
    def test_vec_outer_equals_kron(self):
        # per-sample vec(s h^T) == h (x) s, bit-level
        rng = SeededRng(12)
        for _ in range(100):
            n_in = 2 + int(rng.uniform(1)[0] * 6)
            n_out = 1 + int(rng.uniform(1)[0] * 5)
            h_bar = rng.gaussian(n_in)
            s = rng.gaussian(n_out)
            vec = np.outer(s, h_bar).flatten(order="F")
            kron = np.kron(h_bar, s)
            assert np.array_equal(vec, kron)


class TestNormStats:
    def test_batchnorm_normalizes(self):
        bn = BatchNorm(5)
        x = gaussian_fill(SeededRng(7), (64, 5)) * 3.0 + 1.5
        bn.forward(x, training=True)
        x_hat = bn.capture.h_bar  # (C, B)
        assert np.max(np.abs(x_hat.mean(axis=1))) <= 1e-9
        assert np.max(np.abs(x_hat.var(axis=1) - 1.0)) <= 1e-4  # eps-shifted

    def test_batchnorm_4d_channels(self):
        bn = BatchNorm(3)
        x = gaussian_fill(SeededRng(8), (4, 3, 5, 5))
        out = bn.forward(x, training=True)
        assert out.shape == x.shape
        assert bn.capture.spatial_count == 25


class TestIm2col:
    def test_shape_arithmetic(self):
        x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        cols, oh, ow = im2col(x, 2, 2, 1, 0)
        assert cols.shape == (4, 4)
        assert (oh, ow) == (2, 2)
        assert np.array_equal(cols[:, 0], [0, 1, 3, 4])

    def test_1x1_kernel_is_reshape(self):
        x = gaussian_fill(SeededRng(9), (2, 3, 4, 4))
        cols, _, _ = im2col(x, 1, 1, 1, 0)
        assert np.array_equal(cols, x.transpose(1, 0, 2, 3).reshape(3, -1))

    def test_conv_equals_direct_sliding_window(self):
        rng = SeededRng(10)
        x = gaussian_fill(rng, (2, 2, 5, 5))
        w = gaussian_fill(rng, (3, 2, 3, 3))
        stride, padding = 2, 1
        cols, oh, ow = im2col(x, 3, 3, stride, padding)
        got = (w.reshape(3, -1) @ cols).reshape(3, 2, oh, ow).transpose(1, 0, 2, 3)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        expected = np.zeros_like(got)
        for b in range(2):
            for co in range(3):
                for i in range(oh):
                    for j in range(ow):
                        patch = xp[b, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        expected[b, co, i, j] = np.sum(patch * w[co])
        assert np.max(np.abs(got - expected)) <= 1e-12

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            im2col(np.zeros((1, 1, 3, 3)), 5, 5, 1, 0)

    def test_col2im_roundtrip_gradient(self):
        # scatter-add of all-ones columns counts patch membership per pixel
        x_shape = (1, 1, 4, 4)
        cols, oh, ow = im2col(np.zeros(x_shape), 2, 2, 1, 0)
        counts = col2im(np.ones_like(cols), x_shape, 2, 2, 1, 0)
        assert counts[0, 0, 0, 0] == 1.0   # corner in one patch
        assert counts[0, 0, 1, 1] == 4.0   # interior in four patches
