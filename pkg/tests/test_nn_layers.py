"""Finite-difference gradient checks for every layer and both losses."""

import numpy as np
import pytest

from loopkit.errors import InvalidInput, ShapeError
from loopkit.nn import layers as L
from loopkit.nn.losses import (bce_grad, bce_loss, contrastive_grad,
                               contrastive_loss)

EPS = 1e-4
TOL = 1e-3


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def check_layer_gradients(layer, x, rng, n_samples=8):
    """Compare analytic input/parameter gradients of sum(out * proj)
    against central finite differences at sampled coordinates."""
    proj = rng.standard_normal(layer.forward(x).shape)

    def loss():
        return float((layer.forward(x) * proj).sum())

    for p in layer.parameters().values():
        p.zero_grad()
    out = layer.forward(x)
    dx = layer.backward(proj)
    assert dx.shape == x.shape
    assert np.all(np.isfinite(out)) and np.all(np.isfinite(dx))

    flat_idx = rng.choice(x.size, size=min(n_samples, x.size), replace=False)
    for i in flat_idx:
        idx = np.unravel_index(i, x.shape)
        orig = x[idx]
        x[idx] = orig + EPS
        fp = loss()
        x[idx] = orig - EPS
        fm = loss()
        x[idx] = orig
        assert rel_err(dx[idx], (fp - fm) / (2 * EPS)) < TOL

    for p in layer.parameters().values():
        arr = p.value
        flat_idx = rng.choice(arr.size, size=min(n_samples, arr.size),
                              replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + EPS
            fp = loss()
            arr[idx] = orig - EPS
            fm = loss()
            arr[idx] = orig
            assert rel_err(p.grad[idx], (fp - fm) / (2 * EPS)) < TOL


class TestGradients:
    def test_conv2d(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            n = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
            layer = L.Conv2d(cin, cout, kernel=3, rng=rng)
            x = rng.standard_normal((n, cin, h, w))
            check_layer_gradients(layer, x, rng)

    def test_maxpool2d(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 4))
            h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            layer = L.MaxPool2d()
            x = rng.standard_normal((n, c, h, w))
            check_layer_gradients(layer, x, rng)

    def test_batchnorm_train_mode(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            if trial % 2 == 0:
                c = int(rng.integers(2, 6))
                x = rng.standard_normal((int(rng.integers(3, 6)), c))
            else:
                c = int(rng.integers(1, 4))
                x = rng.standard_normal((int(rng.integers(2, 4)), c, 4, 3))
            layer = L.BatchNorm(c)
            layer.training = True
            check_layer_gradients(layer, x, rng)

    def test_batchnorm_eval_mode(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            c = int(rng.integers(2, 6))
            layer = L.BatchNorm(c)
            layer.running_mean = rng.standard_normal(c) * 0.3
            layer.running_var = rng.random(c) + 0.5
            layer.training = False
            x = rng.standard_normal((4, c))
            check_layer_gradients(layer, x, rng)

    def test_prelu(self):
        rng = np.random.default_rng(4)
        for trial in range(5):
            layer = L.PReLU()
            x = rng.standard_normal((3, 7)) + 0.01  # keep away from the kink
            x[np.abs(x) < 5e-3] = 0.1
            check_layer_gradients(layer, x, rng)

    def test_linear(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            fin, fout = int(rng.integers(2, 9)), int(rng.integers(1, 7))
            layer = L.Linear(fin, fout, rng=rng)
            x = rng.standard_normal((int(rng.integers(1, 5)), fin))
            check_layer_gradients(layer, x, rng)

    def test_sigmoid(self):
        rng = np.random.default_rng(6)
        for trial in range(5):
            layer = L.Sigmoid()
            x = rng.standard_normal((4, 5)) * 2.0
            check_layer_gradients(layer, x, rng)

    def test_flatten(self):
        rng = np.random.default_rng(7)
        layer = L.Flatten()
        x = rng.standard_normal((2, 3, 4, 5))
        check_layer_gradients(layer, x, rng)

    def test_sequential_stack(self):
        rng = np.random.default_rng(8)
        model = L.Sequential([
            L.Conv2d(1, 2, rng=rng), L.BatchNorm(2), L.PReLU(), L.MaxPool2d(),
            L.Flatten(), L.Linear(2 * 3 * 3, 4, rng=rng), L.Sigmoid()])
        model.train()
        x = rng.standard_normal((3, 1, 6, 6))
        check_layer_gradients(model, x, rng)


class TestDropout:
    def test_eval_mode_is_identity(self):
        layer = L.Dropout(0.5)
        x = np.random.default_rng(0).standard_normal((4, 6))
        assert np.array_equal(layer.forward(x), x)
        grad = np.ones_like(x)
        assert np.array_equal(layer.backward(grad), grad)

    def test_train_mode_mask_consistency(self):
        layer = L.Dropout(0.3)
        layer.training = True
        layer.rng = np.random.default_rng(1)
        x = np.ones((200, 50))
        out = layer.forward(x)
        # surviving entries are scaled by 1/(1-p)
        kept = out != 0.0
        assert np.allclose(out[kept], 1.0 / 0.7)
        grad = np.full_like(x, 2.0)
        back = layer.backward(grad)
        assert np.array_equal(back != 0.0, kept)
        # drop rate close to p
        assert abs(1.0 - kept.mean() - 0.3) < 0.02

    def test_seeded_streams_reproducible(self):
        a, b = L.Dropout(0.5), L.Dropout(0.5)
        a.training = b.training = True
        a.rng = np.random.default_rng(9)
        b.rng = np.random.default_rng(9)
        x = np.ones((10, 10))
        assert np.array_equal(a.forward(x), b.forward(x))


class TestShapes:
    def test_conv_rejects_wrong_channels(self):
        layer = L.Conv2d(3, 4)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((1, 2, 5, 5)))

    def test_linear_rejects_wrong_width(self):
        layer = L.Linear(8, 2)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((1, 9)))

    def test_batchnorm_rejects_3d(self):
        layer = L.BatchNorm(4)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((2, 4, 5)))

    def test_maxpool_truncates_odd_dims(self):
        layer = L.MaxPool2d()
        out = layer.forward(np.zeros((1, 1, 173, 128)))
        assert out.shape == (1, 1, 86, 64)
        out = layer.forward(np.zeros((1, 1, 5, 7)))
        assert out.shape == (1, 1, 2, 3)


class TestStateDict:
    def test_state_roundtrip(self):
        rng = np.random.default_rng(10)
        model = L.Sequential([L.Linear(4, 3, rng=rng), L.BatchNorm(3),
                              L.PReLU()])
        state = {k: v.copy() for k, v in model.state().items()}
        clone = L.Sequential([L.Linear(4, 3), L.BatchNorm(3), L.PReLU()])
        clone.load_state(state)
        x = rng.standard_normal((5, 4))
        model.eval()
        clone.eval()
        assert np.array_equal(model.forward(x), clone.forward(x))

    def test_astype_converts_running_stats(self):
        model = L.Sequential([L.BatchNorm(3)])
        model.astype(np.float32)
        bn = model.layers[0]
        assert bn.running_mean.dtype == np.float32
        assert bn.gamma.value.dtype == np.float32


class TestLosses:
    def test_bce_matches_hand_value(self):
        p = np.array([0.9, 0.1])
        y = np.array([1.0, 0.0])
        expected = -np.mean([np.log(0.9), np.log(0.9)])
        assert bce_loss(p, y) == pytest.approx(expected)

    def test_bce_grad_finite_difference(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(0.05, 0.95, 40)
        y = (rng.random(40) > 0.5).astype(float)
        grad = bce_grad(p, y)
        for i in range(0, 40, 5):
            pp, pm = p.copy(), p.copy()
            pp[i] += EPS
            pm[i] -= EPS
            numeric = (bce_loss(pp, y) - bce_loss(pm, y)) / (2 * EPS)
            assert abs(grad[i] - numeric) < 1e-6

    def test_bce_grad_zero_when_clamped(self):
        grad = bce_grad(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
        assert np.array_equal(grad, np.zeros(2))

    def test_contrastive_hand_values(self):
        d = np.array([0.5, 0.3])
        y = np.array([1.0, 0.0])
        expected = np.mean([0.25, (1.0 - 0.3) ** 2])
        assert contrastive_loss(d, y) == pytest.approx(expected)

    def test_contrastive_grad_finite_difference(self):
        rng = np.random.default_rng(12)
        # stay away from the hinge kink at d = margin
        d = np.concatenate([rng.uniform(0.1, 0.9, 20),
                            rng.uniform(1.1, 2.0, 20)])
        y = (rng.random(40) > 0.5).astype(float)
        grad = contrastive_grad(d, y)
        for i in range(0, 40, 5):
            dp, dm = d.copy(), d.copy()
            dp[i] += EPS
            dm[i] -= EPS
            numeric = (contrastive_loss(dp, y) - contrastive_loss(dm, y)) / (2 * EPS)
            assert abs(grad[i] - numeric) < 1e-6

    def test_contrastive_rejects_negative_distance(self):
        with pytest.raises(InvalidInput):
            contrastive_loss(np.array([-0.1]), np.array([1.0]))

    def test_contrastive_zero_for_separated_negatives(self):
        assert contrastive_loss(np.array([2.0]), np.array([0.0])) == 0.0
