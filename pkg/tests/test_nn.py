import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunefl import checkpoint, nn
from helpers import batch_for, finite_difference_errors, random_mask_params, small_model


def softmax_model(n_in, classes):
    return nn.Model((nn.fc(n_in, classes), nn.softmax_ce()), (n_in,), classes)


class TestForward:
    def test_zero_weights_give_uniform_loss(self, rng):
        model = softmax_model(4, 10)
        p = nn.init_params(model, 0)
        p = nn.apply_mask(p, [np.zeros((4, 10), dtype=bool)])
        loss, _ = nn.forward(model, p, rng.normal(size=(6, 4)), rng.integers(0, 10, 6))
        assert loss == pytest.approx(math.log(10), abs=1e-15)

    def test_fully_masked_network(self, rng):
        model = nn.mlp(5, [7], 3)
        p = nn.init_params(model, 3)
        p = nn.apply_mask(p, np.zeros(p.capacity, dtype=bool))
        loss, _ = nn.forward(model, p, rng.normal(size=(4, 5)), [0, 1, 2, 0])
        assert loss == pytest.approx(math.log(3), abs=1e-15)

    def test_scalar_oracle(self):
        # two-layer MLP on three examples, recomputed with python floats
        model = nn.mlp(2, [2], 2)
        w1 = np.array([[0.5, -0.3], [0.2, 0.8]])
        w2 = np.array([[1.0, -1.0], [0.4, 0.1]])
        b1, b2 = np.array([0.1, -0.2]), np.array([0.0, 0.3])
        p = nn.MaskedParams([w1, w2], [np.ones((2, 2), bool)] * 2, [b1, b2], [True, True])
        x = [[1.0, 2.0], [-1.0, 0.5], [0.0, -2.0]]
        y = [0, 1, 1]
        total = 0.0
        for xi, yi in zip(x, y):
            h = [max(0.0, xi[0] * w1[0][j] + xi[1] * w1[1][j] + b1[j]) for j in range(2)]
            z = [h[0] * w2[0][k] + h[1] * w2[1][k] + b2[k] for k in range(2)]
            total += math.log(math.exp(z[0]) + math.exp(z[1])) - z[yi]
        loss, _ = nn.forward(model, p, x, y)
        assert loss == pytest.approx(total / 3, rel=1e-14)

    def test_shape_mismatch(self, rng):
        model = nn.mlp(4, [3], 2)
        p = nn.init_params(model, 0)
        with pytest.raises(ValueError, match="features"):
            nn.forward(model, p, rng.normal(size=(2, 5)), [0, 1])
        with pytest.raises(ValueError, match="labels"):
            nn.forward(model, p, rng.normal(size=(2, 4)), [0])
        with pytest.raises(ValueError, match="empty"):
            nn.forward(model, p, np.zeros((0, 4)), [])

    def test_sparse_path_matches_dense(self, rng):
        model = nn.mlp(64, [64], 4)
        p = nn.init_params(model, 1)
        keep = rng.random(p.capacity) < 0.01
        sp = nn.apply_mask(p, keep)
        assert sp.density < 1 / 32
        x, y = rng.normal(size=(5, 64)), rng.integers(0, 4, 5)
        dense = nn.MaskedParams(sp.weights, [np.ones_like(m) for m in sp.masks], sp.biases,
                                [False, False])
        a, _ = nn.forward(model, sp, x, y)
        b, _ = nn.forward(model, dense, x, y)
        assert a == pytest.approx(b, rel=1e-12)

    def test_model_must_end_in_loss(self):
        with pytest.raises(ValueError):
            nn.Model((nn.fc(2, 2),), (2,), 2)


class TestBackward:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_finite_differences(self, seed):
        model, shape = small_model(seed)
        p = random_mask_params(model, seed)
        x, y = batch_for(model, shape, 5, seed)
        assert finite_difference_errors(model, p, x, y) <= 1e-6

    def test_gradient_covers_masked_coordinates(self, rng):
        model = nn.mlp(3, [4], 2)
        p = nn.apply_mask(nn.init_params(model, 0), np.zeros(20, dtype=bool))
        # hidden pre-activations are the biases; make them positive so signals flow
        p = p.replace(biases=[np.ones(4), np.zeros(2)])
        _, g = nn.loss_and_grad(model, p, rng.normal(size=(3, 3)), [0, 1, 1])
        assert np.count_nonzero(g.weight_grads[1]) > 0

    def test_dead_input_gives_zero_gradient(self, rng):
        model = nn.mlp(3, [4], 2)
        p = nn.init_params(model, 0)
        x = rng.normal(size=(6, 3))
        x[:, 1] = 0.0
        _, g = nn.loss_and_grad(model, p, x, rng.integers(0, 2, 6))
        np.testing.assert_array_equal(g.weight_grads[0][1], np.zeros(4))

    def test_duplicated_batch_same_gradient(self, rng):
        model = nn.mlp(3, [4], 2)
        p = nn.init_params(model, 0)
        x, y = rng.normal(size=(4, 3)), rng.integers(0, 2, 4)
        _, g1 = nn.loss_and_grad(model, p, x, y)
        _, g2 = nn.loss_and_grad(model, p, np.concatenate([x, x]), np.concatenate([y, y]))
        for a, b in zip(g1.weight_grads + g1.bias_grads, g2.weight_grads + g2.bias_grads):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-16)


class TestSgd:
    def test_scalar_update(self):
        p = nn.MaskedParams([np.array([[1.0]])], [np.array([[True]])], [np.zeros(1)], [True])
        g = nn.GradientSample((np.array([[0.5]]),), (np.zeros(1),), 1)
        assert nn.sgd_step(p, g, 0.1).weights[0][0, 0] == pytest.approx(0.95, abs=0)

    def test_all_ones_mask_is_plain_sgd(self, rng):
        model = nn.mlp(3, [4], 2)
        p = nn.init_params(model, 2)
        _, g = nn.loss_and_grad(model, p, rng.normal(size=(5, 3)), rng.integers(0, 2, 5))
        q = nn.sgd_step(p, g, 0.3)
        for w0, w1, gw in zip(p.weights, q.weights, g.weight_grads):
            np.testing.assert_array_equal(w1, w0 - 0.3 * gw)

    def test_all_zero_mask_freezes_weights(self, rng):
        model = nn.mlp(3, [4], 2)
        p = nn.apply_mask(nn.init_params(model, 2), np.zeros(20, dtype=bool))
        _, g = nn.loss_and_grad(model, p, rng.normal(size=(5, 3)), rng.integers(0, 2, 5))
        q = nn.sgd_step(p, g, 0.3)
        for w0, w1 in zip(p.weights, q.weights):
            np.testing.assert_array_equal(w0, w1)

    def test_momentum_respects_mask(self, rng):
        model = nn.mlp(3, [4], 2)
        p = nn.init_params(model, 2)
        opt = nn.SGD(nn.SgdConfig(lr=0.1, momentum=0.9))
        x, y = rng.normal(size=(5, 3)), rng.integers(0, 2, 5)
        for _ in range(3):
            _, g = nn.loss_and_grad(model, p, x, y)
            p = opt.step(p, g)
        keep = rng.random(p.capacity) < 0.5
        p = nn.apply_mask(p, keep)
        opt.on_mask_change(p)
        for _ in range(3):
            _, g = nn.loss_and_grad(model, p, x, y)
            p = opt.step(p, g)
        np.testing.assert_array_equal(p.flat_weights()[~keep], 0.0)

    def test_lr_schedule(self):
        cfg = nn.SgdConfig(lr=0.2, lr_half_life=10, lr_step=5)
        assert cfg.lr_at(0) == 0.2
        assert cfg.lr_at(9) == pytest.approx(0.2 * 0.5**0.5)
        assert cfg.lr_at(10) == pytest.approx(0.1)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            nn.SgdConfig(lr=0.0)
        with pytest.raises(ValueError):
            nn.SgdConfig(momentum=1.0)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6), steps=st.integers(1, 6))
    def test_mask_closure(self, seed, steps):
        rng = np.random.default_rng(seed)
        model = nn.mlp(4, [5], 3)
        p = nn.init_params(model, seed)
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
        for _ in range(steps):
            if rng.random() < 0.5:
                p = nn.apply_mask(p, rng.random(p.capacity) < 0.7)
            _, g = nn.loss_and_grad(model, p, x, y)
            p = nn.sgd_step(p, g, 0.5)
            assert np.all(p.flat_weights()[~p.flat_mask()] == 0.0)


class TestApplyMask:
    def test_same_mask_is_identity(self):
        p = nn.init_params(nn.mlp(3, [4], 2), 0)
        assert nn.apply_mask(p, p.flat_mask()).equals(p)

    def test_zero_mask(self):
        p = nn.apply_mask(nn.init_params(nn.mlp(3, [4], 2), 0), np.zeros(20, dtype=bool))
        assert all(np.all(w == 0) for w in p.weights)

    def test_toggle_off_then_on(self):
        p = nn.init_params(nn.mlp(3, [4], 2), 0)
        m = p.flat_mask().copy()
        m[5] = False
        q = nn.apply_mask(p, m)
        m[5] = True
        q = nn.apply_mask(q, m)
        before, after = p.flat_weights(), q.flat_weights()
        assert after[5] == 0.0
        np.testing.assert_array_equal(np.delete(after, 5), np.delete(before, 5))

    def test_length_checked(self):
        p = nn.init_params(nn.mlp(3, [4], 2), 0)
        with pytest.raises(ValueError, match="capacity"):
            nn.apply_mask(p, np.ones(7, dtype=bool))

    def test_masked_must_be_zero(self):
        with pytest.raises(ValueError, match="zeros"):
            nn.MaskedParams([np.ones((1, 1))], [np.zeros((1, 1), bool)], [np.zeros(1)], [True])


class TestMaskedSqNorm:
    def test_examples(self):
        g = np.array([1.0, 2.0, 3.0])
        assert nn.masked_grad_sqnorm(g, [True, False, True]) == 10.0
        assert nn.masked_grad_sqnorm(g, [True] * 3) == 14.0
        assert nn.masked_grad_sqnorm(g, [False] * 3) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.masked_grad_sqnorm(np.ones(3), [True, False])


class TestInit:
    def test_glorot_bounds_and_determinism(self):
        model = nn.mlp(20, [30], 5)
        a, b = nn.init_params(model, 4), nn.init_params(model, 4)
        assert a.equals(b)
        lim = math.sqrt(6 / 50)
        assert np.abs(a.weights[0]).max() <= lim
        assert a.seed == 4
        assert not a.equals(nn.init_params(model, 5))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model, _ = small_model(1)
        p = random_mask_params(model, 1)
        path = tmp_path / "m.pfnn"
        checkpoint.save(p, path)
        q = checkpoint.load(path)
        assert q.equals(p)
        assert q.seed == p.seed

    def test_no_seed(self):
        p = nn.init_params(nn.mlp(2, [3], 2), 0)
        p = nn.MaskedParams(p.weights, p.masks, p.biases, p.prunable, seed=None)
        assert checkpoint.loads(checkpoint.dumps(p)).seed is None

    def test_non_prunable_layer(self):
        p = nn.MaskedParams([np.ones((2, 2))], [np.ones((2, 2), bool)], [np.zeros(2)], [False])
        q = checkpoint.loads(checkpoint.dumps(p))
        assert q.prunable == (False,)
        assert q.equals(p)

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:10], "header"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ])
    def test_corruption_detected(self, mutate, match):
        buf = checkpoint.dumps(nn.init_params(nn.mlp(2, [3], 2), 0))
        with pytest.raises(checkpoint.CheckpointError, match=match):
            checkpoint.loads(mutate(buf))
