"""Shared oracles for the test suite."""
import numpy as np

from prunefl import nn


def finite_difference_errors(model, params, x, y, step=1e-5, floor=1e-4):
    """Max relative error between backprop and central differences over
    every weight and bias coordinate (masked ones included)."""
    _, grad = nn.loss_and_grad(model, params, x, y)
    worst = 0.0
    ws, bs = params.copy_arrays()

    def loss_at(ws_, bs_):
        # bypass the mask invariant: the dense extension is what backprop differentiates
        p = nn.MaskedParams(ws_, [np.ones_like(w, dtype=bool) for w in ws_], bs_,
                            [False] * len(ws_))
        return nn.forward(model, p, x, y)[0]

    for arrays, grads in ((ws, grad.weight_grads), (bs, grad.bias_grads)):
        for a, g in zip(arrays, grads):
            flat = a.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                up = loss_at(ws, bs)
                flat[j] = orig - step
                down = loss_at(ws, bs)
                flat[j] = orig
                fd = (up - down) / (2 * step)
                err = abs(fd - gflat[j]) / max(abs(fd), abs(gflat[j]), floor)
                worst = max(worst, err)
    return worst


def random_mask_params(model, seed, keep=0.6):
    rng = np.random.default_rng(seed + 7)
    p = nn.init_params(model, seed)
    masks = [rng.random(w.shape) < keep for w in p.weights]
    biases = [rng.normal(scale=0.1, size=b.shape) for b in p.biases]
    return nn.apply_mask(p, masks).replace(biases=biases)


def small_model(seed):
    """A small random architecture: MLP for even seeds, conv net for odd."""
    rng = np.random.default_rng(seed)
    if seed % 2 == 0:
        n_in = int(rng.integers(3, 8))
        hidden = [int(h) for h in rng.integers(3, 9, size=int(rng.integers(1, 3)))]
        return nn.mlp(n_in, hidden, int(rng.integers(2, 5))), (n_in,)
    c = int(rng.integers(1, 3))
    layers = (
        nn.conv2d(c, 2, 3, 1, 1), nn.relu(), nn.conv2d(2, 3, 2, 2, 0), nn.relu(),
        nn.flatten(), nn.fc(3 * 2 * 2, 3), nn.softmax_ce(),
    )
    return nn.Model(layers, (c, 4, 4), 3), (c, 4, 4)


def batch_for(model, shape, n, seed):
    rng = np.random.default_rng(seed + 99)
    x = rng.normal(size=(n,) + tuple(shape))
    y = rng.integers(0, model.num_classes, size=n)
    return x, y


def brute_force_best(g2, cost, part):
    """Exhaustive maximum of gamma over ``Pbar | S`` for every subset S of P."""
    from itertools import combinations

    from prunefl.pruner import set_gamma

    base = part.fixed_mask()
    best, best_mask = -1.0, None
    P = list(part.prunable)
    for k in range(len(P) + 1):
        for S in combinations(P, k):
            m = base.copy()
            m[list(S)] = True
            g, _, _ = set_gamma(g2, cost, m)
            if g > best:
                best, best_mask = g, m
    return best, best_mask


def random_linear_instance(rng, max_p=16):
    """Random importance, positive per-coordinate times and a P / Pbar split."""
    from prunefl.cost import LinearCost
    from prunefl.pruner import PrunablePartition

    n_p = int(rng.integers(0, max_p + 1))
    n_fixed = int(rng.integers(0, 6))
    n = n_p + n_fixed
    perm = rng.permutation(n)
    P, Pbar = np.sort(perm[:n_p]), np.sort(perm[n_p:])
    g2 = rng.exponential(size=n) * (rng.random(n) < 0.85)
    t = rng.uniform(0.01, 2.0, size=n)
    c = float(rng.uniform(0.0, 3.0))
    return g2, LinearCost(c, t), PrunablePartition(P, Pbar, 0.3)
