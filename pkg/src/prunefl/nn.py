"""Small feed-forward networks with masked weights and full-space gradients.

Weights are stored densely; a boolean mask per prunable weight tensor marks
the coordinates that are kept. The forward pass reads the stored values
directly (pruned coordinates hold exact zeros), so ``backward`` returns the
gradient of the dense extension, masked coordinates included.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .sparse import is_sparse_worthwhile, sparse_from_dense, spmm


class LayerKind(str, enum.Enum):
    FC = "fc"
    CONV2D = "conv2d"
    RELU = "relu"
    FLATTEN = "flatten"
    SOFTMAX_CE = "softmax_ce"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_features: int = 0
    out_features: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    prunable: bool = True

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.FC, LayerKind.CONV2D)

    def weight_shape(self):
        if self.kind is LayerKind.FC:
            return (self.in_features, self.out_features)
        if self.kind is LayerKind.CONV2D:
            return (self.out_features, self.in_features, self.kernel_size, self.kernel_size)
        raise ValueError(f"{self.kind} has no weights")

    def fans(self):
        if self.kind is LayerKind.FC:
            return self.in_features, self.out_features
        k2 = self.kernel_size**2
        return self.in_features * k2, self.out_features * k2


def fc(n_in: int, n_out: int, prunable: bool = True) -> LayerSpec:
    return LayerSpec(LayerKind.FC, n_in, n_out, prunable=prunable)


def conv2d(c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec(LayerKind.CONV2D, c_in, c_out, k, stride, padding)


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


def softmax_ce() -> LayerSpec:
    return LayerSpec(LayerKind.SOFTMAX_CE)


@dataclass(frozen=True)
class Model:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        if not self.layers or self.layers[-1].kind is not LayerKind.SOFTMAX_CE:
            raise ValueError("model must end with a softmax cross-entropy layer")

    @property
    def param_layers(self):
        return [l for l in self.layers if l.has_params]


def mlp(n_in: int, hidden: Sequence[int], n_classes: int) -> Model:
    layers = []
    prev = n_in
    for h in hidden:
        layers += [fc(prev, h), relu()]
        prev = h
    layers += [fc(prev, n_classes), softmax_ce()]
    return Model(tuple(layers), (n_in,), n_classes)


def _frozen(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


class MaskedParams:
    """Weights, masks and biases of one model instance.

    Instances are treated as values: every operation returns a new object.
    Non-prunable weight tensors carry an all-ones mask.
    """

    __slots__ = ("weights", "masks", "biases", "prunable", "seed", "_sparse")

    def __init__(self, weights, masks, biases, prunable, seed: Optional[int] = None):
        if not (len(weights) == len(masks) == len(biases) == len(prunable)):
            raise ValueError("weights, masks, biases and flags must align")
        ws, ms = [], []
        for w, m, p in zip(weights, masks, prunable):
            w = np.asarray(w, dtype=np.float64)
            m = np.asarray(m, dtype=bool)
            if m.shape != w.shape:
                raise ValueError(f"mask shape {m.shape} != weight shape {w.shape}")
            if not p and not m.all():
                raise ValueError("non-prunable weights cannot be masked")
            if np.any(w[~m] != 0.0):
                raise ValueError("masked coordinates must hold zeros")
            ws.append(_frozen(w))
            ms.append(_frozen(m))
        self.weights = tuple(ws)
        self.masks = tuple(ms)
        self.biases = tuple(_frozen(np.asarray(b, dtype=np.float64)) for b in biases)
        self.prunable = tuple(bool(p) for p in prunable)
        self.seed = seed
        self._sparse = {}

    def replace(self, weights=None, masks=None, biases=None) -> "MaskedParams":
        return MaskedParams(
            self.weights if weights is None else weights,
            self.masks if masks is None else masks,
            self.biases if biases is None else biases,
            self.prunable,
            self.seed,
        )

    # flat views over the prunable weights, in layer order
    def layer_sizes(self):
        return [w.size for w, p in zip(self.weights, self.prunable) if p]

    @property
    def capacity(self) -> int:
        return sum(self.layer_sizes())

    def flat_weights(self) -> np.ndarray:
        parts = [w.ravel() for w, p in zip(self.weights, self.prunable) if p]
        return np.concatenate(parts) if parts else np.zeros(0)

    def flat_mask(self) -> np.ndarray:
        parts = [m.ravel() for m, p in zip(self.masks, self.prunable) if p]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    def kept_per_layer(self):
        return [int(m.sum()) for m, p in zip(self.masks, self.prunable) if p]

    @property
    def density(self) -> float:
        cap = self.capacity
        return sum(self.kept_per_layer()) / cap if cap else 1.0

    def unflatten(self, flat) -> list:
        """Split a prunable-space vector back into per-tensor arrays.

        Non-prunable tensors get ``None``.
        """
        out, off = [], 0
        for w, p in zip(self.weights, self.prunable):
            if p:
                out.append(np.asarray(flat[off:off + w.size]).reshape(w.shape))
                off += w.size
            else:
                out.append(None)
        return out

    def sparse_weight(self, i: int, transpose: bool):
        key = (i, transpose)
        if key not in self._sparse:
            w = self.weights[i]
            mat = w.T if transpose else w.reshape(w.shape[0], -1)
            self._sparse[key] = sparse_from_dense(mat)
        return self._sparse[key]

    def copy_arrays(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]

    def equals(self, other: "MaskedParams") -> bool:
        """Bitwise equality of values and masks."""
        return (
            len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


def init_params(model: Model, seed: int) -> MaskedParams:
    """Glorot-uniform weights from a seeded generator, zero biases."""
    rng = np.random.default_rng(seed)
    ws, ms, bs, ps = [], [], [], []
    for layer in model.param_layers:
        fan_in, fan_out = layer.fans()
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-lim, lim, size=layer.weight_shape())
        ws.append(w)
        ms.append(np.ones(w.shape, dtype=bool))
        bs.append(np.zeros(layer.out_features))
        ps.append(layer.prunable)
    return MaskedParams(ws, ms, bs, ps, seed=seed)


@dataclass
class ForwardCache:
    inputs: list
    probs: np.ndarray
    labels: np.ndarray
    loss: float
    extras: list = field(default_factory=list)


@dataclass(frozen=True)
class GradientSample:
    weight_grads: tuple
    bias_grads: tuple
    batch_size: int

    def flat(self, params: MaskedParams) -> np.ndarray:
        parts = [g.ravel() for g, p in zip(self.weight_grads, params.prunable) if p]
        return np.concatenate(parts) if parts else np.zeros(0)


def _check_input(model: Model, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    want = int(np.prod(model.input_shape))
    if int(np.prod(x.shape[1:])) != want:
        raise ValueError(f"input has {x.shape[1:]} features, model expects {model.input_shape}")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError("label out of range")
    return x.reshape((x.shape[0],) + tuple(model.input_shape)), y.astype(np.int64)


def _fc_forward(params, i, x):
    w = params.weights[i]
    if params.prunable[i] and is_sparse_worthwhile(params.masks[i].mean()):
        return spmm(params.sparse_weight(i, transpose=True), x.T).T + params.biases[i]
    return x @ w + params.biases[i]


def _conv_out(layer, h, w):
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _conv_forward(params, i, layer, x):
    n, c, h, w = x.shape
    if c != layer.in_features:
        raise ValueError(f"conv expects {layer.in_features} channels, got {c}")
    oh, ow = _conv_out(layer, h, w)
    cols = kernels.im2col(np.ascontiguousarray(x), layer.kernel_size, layer.stride, layer.padding)
    wt = params.weights[i]
    if params.prunable[i] and is_sparse_worthwhile(params.masks[i].mean()):
        out = spmm(params.sparse_weight(i, transpose=False), cols)
    else:
        out = wt.reshape(wt.shape[0], -1) @ cols
    out = out.reshape(wt.shape[0], n, oh, ow).transpose(1, 0, 2, 3)
    return out + params.biases[i][None, :, None, None], cols


def forward(model: Model, params: MaskedParams, x, y):
    """Mean cross-entropy over the batch plus the activations ``backward`` needs."""
    a, y = _check_input(model, x, y)
    inputs, extras = [], []
    pi = 0
    for layer in model.layers:
        inputs.append(a)
        if layer.kind is LayerKind.FC:
            if a.ndim != 2 or a.shape[1] != layer.in_features:
                raise ValueError(f"fc expects {layer.in_features} inputs, got {a.shape[1:]}")
            a = _fc_forward(params, pi, a)
            extras.append(None)
            pi += 1
        elif layer.kind is LayerKind.CONV2D:
            if a.ndim != 4:
                raise ValueError("conv2d needs (N, C, H, W) input")
            a, cols = _conv_forward(params, pi, layer, a)
            extras.append(cols)
            pi += 1
        elif layer.kind is LayerKind.RELU:
            a = np.maximum(a, 0.0)
            extras.append(None)
        elif layer.kind is LayerKind.FLATTEN:
            a = a.reshape(a.shape[0], -1)
            extras.append(None)
        else:
            if a.ndim != 2 or a.shape[1] != model.num_classes:
                raise ValueError("logits do not match num_classes")
            z = a - a.max(axis=1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=1))
            logp = z - lse[:, None]
            loss = float(-logp[np.arange(len(y)), y].mean())
            extras.append(None)
            return loss, ForwardCache(inputs, np.exp(logp), y, loss, extras)
    raise AssertionError("unreachable")


def backward(model: Model, params: MaskedParams, cache: ForwardCache) -> GradientSample:
    n = len(cache.labels)
    grad = cache.probs.copy()
    grad[np.arange(n), cache.labels] -= 1.0
    grad /= n
    wg = [None] * len(params.weights)
    bg = [None] * len(params.weights)
    pi = len(params.weights)
    for li in range(len(model.layers) - 2, -1, -1):
        layer, x = model.layers[li], cache.inputs[li]
        if layer.kind is LayerKind.FC:
            pi -= 1
            wg[pi] = x.T @ grad
            bg[pi] = grad.sum(axis=0)
            if li:
                grad = grad @ params.weights[pi].T
        elif layer.kind is LayerKind.CONV2D:
            pi -= 1
            cols = cache.extras[li]
            w = params.weights[pi]
            f = w.shape[0]
            g2 = grad.transpose(1, 0, 2, 3).reshape(f, -1)
            wg[pi] = (g2 @ cols.T).reshape(w.shape)
            bg[pi] = g2.sum(axis=1)
            if li:
                dcols = np.ascontiguousarray(w.reshape(f, -1).T @ g2)
                nb, c, h, ww = x.shape
                grad = kernels.col2im(
                    dcols, nb, c, h, ww, layer.kernel_size, layer.stride, layer.padding
                )
        elif layer.kind is LayerKind.RELU:
            grad = grad * (x > 0.0)
        elif layer.kind is LayerKind.FLATTEN:
            grad = grad.reshape(x.shape)
    return GradientSample(tuple(wg), tuple(bg), n)


def loss_and_grad(model: Model, params: MaskedParams, x, y):
    loss, cache = forward(model, params, x, y)
    return loss, backward(model, params, cache)


def predict(model: Model, params: MaskedParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    dummy = np.zeros(len(x), dtype=np.int64)
    _, cache = forward(model, params, x, dummy)
    return cache.probs.argmax(axis=1)


def accuracy(model: Model, params: MaskedParams, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, params, x) == np.asarray(y)))


@dataclass(frozen=True)
class SgdConfig:
    """Learning rate ``lr * 0.5 ** (r' / lr_half_life)`` with ``r'`` the round
    index rounded down to a multiple of ``lr_step`` (no decay when
    ``lr_half_life`` is ``None``)."""

    lr: float = 0.1
    momentum: float = 0.0
    lr_half_life: Optional[float] = None
    lr_step: Optional[int] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    def lr_at(self, r: int) -> float:
        if self.lr_half_life is None:
            return self.lr
        rr = (r // self.lr_step) * self.lr_step if self.lr_step else r
        return self.lr * 0.5 ** (rr / self.lr_half_life)


def sgd_step(params: MaskedParams, grad: GradientSample, lr: float) -> MaskedParams:
    """One masked step: ``w <- w - lr * (g * m)``; biases are never masked."""
    ws = [w - lr * (g * m) for w, g, m in zip(params.weights, grad.weight_grads, params.masks)]
    bs = [b - lr * g for b, g in zip(params.biases, grad.bias_grads)]
    return params.replace(weights=ws, biases=bs)


class SGD:
    """Masked SGD with optional heavy-ball momentum.

    The velocity buffer is masked exactly like the gradient, so pruned
    coordinates never move.
    """

    def __init__(self, cfg: SgdConfig):
        self.cfg = cfg
        self.velocity = None

    def reset(self):
        self.velocity = None

    def step(self, params: MaskedParams, grad: GradientSample, r: int = 0) -> MaskedParams:
        lr = self.cfg.lr_at(r)
        if self.cfg.momentum == 0.0:
            return sgd_step(params, grad, lr)
        mu = self.cfg.momentum
        gw = [g * m for g, m in zip(grad.weight_grads, params.masks)]
        if self.velocity is None:
            self.velocity = (gw, list(grad.bias_grads))
        else:
            vw, vb = self.velocity
            vw = [(mu * v + g) * m for v, g, m in zip(vw, gw, params.masks)]
            vb = [mu * v + g for v, g in zip(vb, grad.bias_grads)]
            self.velocity = (vw, vb)
        vw, vb = self.velocity
        ws = [w - lr * v for w, v in zip(params.weights, vw)]
        bs = [b - lr * v for b, v in zip(params.biases, vb)]
        return params.replace(weights=ws, biases=bs)

    def on_mask_change(self, params: MaskedParams):
        """Zero velocity on coordinates the new mask prunes."""
        if self.velocity is not None:
            vw, vb = self.velocity
            self.velocity = ([v * m for v, m in zip(vw, params.masks)], vb)


def apply_mask(params: MaskedParams, new_mask) -> MaskedParams:
    """Install ``new_mask`` (flat over prunable coordinates, or per tensor).

    Pruned coordinates become 0; reinstated ones start from their stored 0.
    """
    if isinstance(new_mask, np.ndarray) and new_mask.ndim == 1:
        flat = np.asarray(new_mask, dtype=bool)
        if flat.size != params.capacity:
            raise ValueError(f"mask length {flat.size} != capacity {params.capacity}")
        parts = params.unflatten(flat)
        masks = [p if p is not None else m for p, m in zip(parts, params.masks)]
    else:
        masks = [np.asarray(m, dtype=bool) for m in new_mask]
        if len(masks) != len(params.masks) or any(
            a.shape != b.shape for a, b in zip(masks, params.masks)
        ):
            raise ValueError("mask shapes do not match the parameters")
    ws = [np.where(m, w, 0.0) for w, m in zip(params.weights, masks)]
    return params.replace(weights=ws, masks=masks)


def masked_grad_sqnorm(grad, mask) -> float:
    """Sum of squared gradient entries over kept coordinates.

    For a ``GradientSample`` the mask is per weight tensor and bias
    gradients, which are never masked, are included.
    """
    if isinstance(grad, GradientSample):
        total = sum(np.sum(np.where(m, g, 0.0) ** 2) for g, m in zip(grad.weight_grads, mask))
        return float(total + sum(np.sum(b**2) for b in grad.bias_grads))
    g = np.asarray(grad, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if g.shape != m.shape:
        raise ValueError("gradient and mask shapes differ")
    return float(np.sum(g[m] ** 2))
