"""Minimal neural-network core.

Arrays are plain ``numpy.ndarray`` in float64. Image tensors are NHWC. Each
layer exposes ``forward(x, mode, rng) -> (out, cache)`` and
``backward(cache, grad_out) -> grad_in``; parameter gradients accumulate into
the layer's :class:`ParamSet`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MODES = ("train", "eval")
ACTIVATIONS = ("relu", "linear")


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


@dataclass
class ParamSet:
    weights: np.ndarray
    biases: np.ndarray
    weight_grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    bias_grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    trainable: bool = True

    def __post_init__(self) -> None:
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float64)
        if self.weight_grad is None:
            self.weight_grad = np.zeros_like(self.weights)
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.biases)

    def zero_grad(self) -> None:
        self.weight_grad[...] = 0.0
        self.bias_grad[...] = 0.0

    @property
    def size(self) -> int:
        return self.weights.size + self.biases.size

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weights, self.biases


@dataclass
class AdamState:
    """Moment estimates for one ParamSet; ``m``/``v`` align with (weights, biases)."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 1e-3, **kw: float) -> "AdamState":
        m = [np.zeros_like(a) for a in params.arrays()]
        v = [np.zeros_like(a) for a in params.arrays()]
        state = cls(m=m, v=v, lr=lr, **kw)
        if not (0.0 < state.beta1 < 1.0 and 0.0 < state.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in (0, 1), got {state.beta1}, {state.beta2}")
        return state


def adam_step(params: ParamSet, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and zero the gradients."""
    if not params.trainable:
        raise ValueError("adam_step called on a frozen ParamSet")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for i, (p, g) in enumerate(((params.weights, params.weight_grad), (params.biases, params.bias_grad))):
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    params.zero_grad()


# ---------------------------------------------------------------------------
# initialisation


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_weights(rng, shape, fan_in, fan_out, activation):
    if activation == "relu":
        return he_normal(rng, shape, fan_in)
    return glorot_uniform(rng, shape, fan_in, fan_out)


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _check_activation(activation: str) -> None:
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")


# ---------------------------------------------------------------------------
# layers


class Layer:
    params: ParamSet | None = None
    name: str = "layer"

    def forward(self, x: Any, mode: str = "eval", rng: np.random.Generator | None = None):
        raise NotImplementedError

    def backward(self, cache: Any, grad_out: np.ndarray):
        raise NotImplementedError

    def param_sets(self) -> list[ParamSet]:
        return [self.params] if self.params is not None else []

    def _cache(self, **items):
        return {"layer": id(self), **items}

    def _open(self, cache) -> dict:
        if not isinstance(cache, dict) or cache.get("layer") != id(self):
            raise ValueError(f"{self.name}: cache was not produced by this layer's forward")
        return cache

    def _expect(self, cond: bool, got, want) -> None:
        if not cond:
            raise ShapeError(f"{self.name}: input shape {tuple(got)} incompatible with expected {want}")


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu",
                 rng: np.random.Generator | None = None, name: str | None = None):
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"Dense dims must be positive, got ({in_dim}, {out_dim})")
        _check_activation(activation)
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        self.name = name or f"Dense({in_dim},{out_dim},{activation})"
        rng = rng if rng is not None else np.random.default_rng(0)
        w = _init_weights(rng, (in_dim, out_dim), in_dim, out_dim, activation)
        self.params = ParamSet(w, np.zeros(out_dim))

    def forward(self, x, mode="eval", rng=None):
        _check_mode(mode)
        self._expect(x.ndim == 2 and x.shape[1] == self.in_dim, x.shape, f"(batch, {self.in_dim})")
        z = x @ self.params.weights + self.params.biases
        out = np.maximum(z, 0.0) if self.activation == "relu" else z
        return out, self._cache(x=x, z=z)

    def backward(self, cache, grad_out):
        c = self._open(cache)
        x, z = c["x"], c["z"]
        self._expect(grad_out.shape == z.shape, grad_out.shape, z.shape)
        g = grad_out * (z > 0.0) if self.activation == "relu" else grad_out
        if self.params.trainable:
            self.params.weight_grad += x.T @ g
            self.params.bias_grad += g.sum(axis=0)
        return g @ self.params.weights.T


class Conv2D(Layer):
    """2-D convolution over NHWC input; weights stored as (kh, kw, in_ch, out_ch)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: str = "same", activation: str = "relu",
                 rng: np.random.Generator | None = None, name: str | None = None):
        if kernel < 1 or stride < 1:
            raise ValueError(f"Conv2D kernel and stride must be >= 1, got {kernel}, {stride}")
        if padding not in ("valid", "same"):
            raise ValueError(f"Conv2D padding must be 'valid' or 'same', got {padding!r}")
        if in_ch < 1 or out_ch < 1:
            raise ValueError("Conv2D channel counts must be positive")
        _check_activation(activation)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding, self.activation = kernel, stride, padding, activation
        self.name = name or f"Conv2D({in_ch},{out_ch},k={kernel},s={stride},{padding})"
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = kernel * kernel * in_ch
        fan_out = kernel * kernel * out_ch
        w = _init_weights(rng, (kernel, kernel, in_ch, out_ch), fan_in, fan_out, activation)
        self.params = ParamSet(w, np.zeros(out_ch))

    def _pads(self, h: int, w: int) -> tuple[int, int, int, int, int, int]:
        k, s = self.kernel, self.stride
        if self.padding == "valid":
            return 0, 0, 0, 0, (h - k) // s + 1, (w - k) // s + 1
        oh, ow = -(-h // s), -(-w // s)
        ph = max((oh - 1) * s + k - h, 0)
        pw = max((ow - 1) * s + k - w, 0)
        return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2, oh, ow

    def _cols(self, xp: np.ndarray, oh: int, ow: int) -> np.ndarray:
        k, s = self.kernel, self.stride
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
        # (n, oh, ow, C, kh, kw) -> rows ordered (kh, kw, C) to match the weight layout
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * self.in_ch)

    def forward(self, x, mode="eval", rng=None):
        _check_mode(mode)
        self._expect(x.ndim == 4 and x.shape[3] == self.in_ch, x.shape, f"(batch, H, W, {self.in_ch})")
        n, h, w, _ = x.shape
        pt, pb, pl, pr, oh, ow = self._pads(h, w)
        self._expect(oh >= 1 and ow >= 1, x.shape, f"spatial size >= kernel {self.kernel}")
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
        cols = self._cols(xp, oh, ow)
        z = (cols @ self.params.weights.reshape(-1, self.out_ch)).reshape(n, oh, ow, self.out_ch)
        z += self.params.biases
        out = np.maximum(z, 0.0) if self.activation == "relu" else z
        return out, self._cache(xp=xp, z=z, in_shape=x.shape, pads=(pt, pl))

    def backward(self, cache, grad_out):
        c = self._open(cache)
        xp, z = c["xp"], c["z"]
        self._expect(grad_out.shape == z.shape, grad_out.shape, z.shape)
        g = grad_out * (z > 0.0) if self.activation == "relu" else grad_out
        n, oh, ow, _ = g.shape
        k, s = self.kernel, self.stride
        g2 = g.reshape(-1, self.out_ch)
        if self.params.trainable:
            cols = self._cols(xp, oh, ow)
            self.params.weight_grad += (cols.T @ g2).reshape(self.params.weights.shape)
            self.params.bias_grad += g2.sum(axis=0)
        dcols = (g2 @ self.params.weights.reshape(-1, self.out_ch).T).reshape(n, oh, ow, k, k, self.in_ch)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s, :] += dcols[:, :, :, i, j, :]
        pt, pl = c["pads"]
        _, h, w, _ = c["in_shape"]
        return dxp[:, pt : pt + h, pl : pl + w, :]


class MaxPool2D(Layer):
    def __init__(self, kernel: int = 2, stride: int | None = None, name: str | None = None):
        stride = kernel if stride is None else stride
        if kernel < 1 or stride < 1:
            raise ValueError(f"MaxPool2D kernel and stride must be >= 1, got {kernel}, {stride}")
        self.kernel, self.stride = kernel, stride
        self.name = name or f"MaxPool2D(k={kernel},s={stride})"

    def forward(self, x, mode="eval", rng=None):
        _check_mode(mode)
        self._expect(x.ndim == 4 and x.shape[1] >= self.kernel and x.shape[2] >= self.kernel,
                     x.shape, f"(batch, H>={self.kernel}, W>={self.kernel}, C)")
        k, s = self.kernel, self.stride
        n, h, w, ch = x.shape
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
        flat = win.reshape(n, oh, ow, ch, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, self._cache(arg=arg, in_shape=x.shape)

    def backward(self, cache, grad_out):
        c = self._open(cache)
        arg = c["arg"]
        self._expect(grad_out.shape == arg.shape, grad_out.shape, arg.shape)
        k, s = self.kernel, self.stride
        _, oh, ow, _ = arg.shape
        dx = np.zeros(c["in_shape"])
        for p in range(k * k):
            i, j = divmod(p, k)
            dx[:, i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s, :] += grad_out * (arg == p)
        return dx


class Flatten(Layer):
    name = "Flatten"

    def forward(self, x, mode="eval", rng=None):
        _check_mode(mode)
        self._expect(x.ndim >= 2, x.shape, "(batch, ...)")
        return x.reshape(x.shape[0], -1), self._cache(in_shape=x.shape)

    def backward(self, cache, grad_out):
        c = self._open(cache)
        return grad_out.reshape(c["in_shape"])


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""

    def __init__(self, rate: float, name: str | None = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"Dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.name = name or f"Dropout({rate})"

    def forward(self, x, mode="eval", rng=None):
        _check_mode(mode)
        if mode == "eval" or self.rate == 0.0:
            return x, self._cache(scale=None)
        if rng is None:
            raise ValueError(f"{self.name}: train mode requires an explicit rng")
        scale = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * scale, self._cache(scale=scale)

    def backward(self, cache, grad_out):
        c = self._open(cache)
        return grad_out if c["scale"] is None else grad_out * c["scale"]


class Concat(Layer):
    """Joins 2-D branch outputs along the feature axis."""

    name = "Concat"

    def forward(self, xs: Sequence[np.ndarray], mode="eval", rng=None):
        _check_mode(mode)
        if len(xs) < 1:
            raise ShapeError("Concat: no inputs")
        n = xs[0].shape[0]
        for x in xs:
            self._expect(x.ndim == 2 and x.shape[0] == n, x.shape, f"({n}, width)")
        widths = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1), self._cache(widths=widths)

    def backward(self, cache, grad_out):
        c = self._open(cache)
        return split(grad_out, c["widths"])


def split(x: np.ndarray, widths: Sequence[int]) -> list[np.ndarray]:
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"split: widths {list(widths)} do not sum to {x.shape[1]}")
    edges = np.cumsum([0, *widths])
    return [x[:, a:b] for a, b in zip(edges[:-1], edges[1:])]


class Sequential:
    """Chain of single-input layers."""

    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x, mode="eval", rng=None):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode, rng)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_out):
        if len(caches) != len(self.layers):
            raise ValueError("Sequential: cache list does not match layer count")
        g = grad_out
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g = layer.backward(cache, g)
        return g

    def param_sets(self) -> list[ParamSet]:
        return [p for layer in self.layers for p in layer.param_sets()]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every entry, and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    if pred.ndim == 0 or pred.shape[0] < 1:
        raise ValueError("mse_loss: empty batch")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    if logits.shape[0] < 1:
        raise ValueError("softmax_cross_entropy: empty batch")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def zero_grads(param_sets: Iterable[ParamSet]) -> None:
    for p in param_sets:
        p.zero_grad()


def gradient_check(network, inputs, target: np.ndarray, *, h: float = 1e-6,
                   max_samples: int = 200, seed: int = 0) -> float:
    """Max relative error between backprop and central differences of the MSE loss.

    ``network`` is a :class:`Sequential`, a plain list of layers, or any object
    with ``forward(inputs, mode, rng)``, ``backward(cache, grad)`` and
    ``param_sets()``. Only trainable parameters are probed; at most
    ``max_samples`` entries per ParamSet array are sampled. Evaluation mode.
    """
    if isinstance(network, (list, tuple)):
        network = Sequential(network)
    params = [p for p in network.param_sets() if p.trainable]
    zero_grads(params)

    def loss_at() -> float:
        out, _ = network.forward(inputs, "eval", None)
        return mse_loss(out, target)[0]

    out, cache = network.forward(inputs, "eval", None)
    _, g = mse_loss(out, target)
    network.backward(cache, g)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        for arr, grad in ((p.weights, p.weight_grad), (p.biases, p.bias_grad)):
            flat, gflat = arr.reshape(-1), grad.reshape(-1).copy()
            idx = np.arange(flat.size)
            if flat.size > max_samples:
                idx = rng.choice(flat.size, size=max_samples, replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                lp = loss_at()
                flat[i] = old - h
                lm = loss_at()
                flat[i] = old
                num = (lp - lm) / (2.0 * h)
                ana = gflat[i]
                err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
                worst = max(worst, err)
    zero_grads(params)
    return worst
