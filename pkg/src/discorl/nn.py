"""Small deterministic neural-network layer built on numpy.

Everything is float64. Networks are plain sequential stacks described by a
list of layer descriptors (dicts), so they can be serialised alongside their
weights and rebuilt bit-identically from ``(spec, seed)``.

Data layout for images is NHWC.
"""
from __future__ import annotations

import copy
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ConfigError(ValueError):
    """Invalid configuration or incompatible shapes."""


class UsageError(RuntimeError):
    """API called out of order (e.g. backward before forward)."""


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; ``seed`` may be an int or a sequence of ints."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {"type": self.kind}

    def _require_cache(self):
        if self._cache is None:
            raise UsageError(f"{self.kind}: backward called without a cached forward pass")
        return self._cache


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.params = {"W": w, "b": np.zeros(n_out)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def output_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ConfigError(f"dense expects input ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ConfigError(f"dense expects (N, {self.n_in}) input, got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad, need_input_grad=True):
        x = self._require_cache()
        self.grads["W"] += x.T @ grad
        self.grads["b"] += grad.sum(axis=0)
        return grad @ self.params["W"].T if need_input_grad else None

    def descriptor(self):
        return {"type": "dense", "in": self.n_in, "out": self.n_out}


class Conv2D(Layer):
    """Valid-padding 2D convolution on NHWC tensors."""

    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ConfigError("kernel and stride must be >= 1")
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        fan_in = kernel * kernel * in_ch
        fan_out = kernel * kernel * out_ch
        shape = (kernel, kernel, in_ch, out_ch)
        w = np.zeros(shape) if rng is None else glorot_uniform(rng, shape, fan_in, fan_out)
        self.params = {"W": w, "b": np.zeros(out_ch)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_ch:
            raise ConfigError(f"conv expects (H, W, {self.in_ch}) input, got {in_shape}")
        h, w, _ = in_shape
        k, s = self.kernel, self.stride
        if h < k or w < k:
            raise ConfigError(f"conv kernel {k} larger than input {in_shape}")
        return ((h - k) // s + 1, (w - k) // s + 1, self.out_ch)

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ConfigError(f"conv expects (N, H, W, {self.in_ch}) input, got {x.shape}")
        k, s = self.kernel, self.stride
        n, h, w, c = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        # windows: (N, Ho, Wo, C, k, k) -> cols ordered (kh, kw, C) to match W
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : ho * s : s, : wo * s : s]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)
        out = cols @ self.params["W"].reshape(k * k * c, self.out_ch) + self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(n, ho, wo, self.out_ch)

    def backward(self, grad, need_input_grad=True):
        x_shape, cols = self._require_cache()
        k, s = self.kernel, self.stride
        n, h, w, c = x_shape
        _, ho, wo, oc = grad.shape
        g2 = grad.reshape(-1, oc)
        self.grads["W"] += (cols.T @ g2).reshape(self.params["W"].shape)
        self.grads["b"] += g2.sum(axis=0)
        if not need_input_grad:
            return None
        dcols = (g2 @ self.params["W"].reshape(k * k * c, oc).T).reshape(n, ho, wo, k, k, c)
        dx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
        return dx

    def descriptor(self):
        return {"type": "conv", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride}


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn: str):
        super().__init__()
        if fn not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x):
        if self.fn == "relu":
            y = np.maximum(x, 0.0)
        else:
            y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, grad, need_input_grad=True):
        y = self._require_cache()
        if self.fn == "relu":
            return grad * (y > 0)
        return grad * (1.0 - y * y)

    def descriptor(self):
        return {"type": "activation", "fn": self.fn}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        return grad.reshape(self._require_cache())


class SoftmaxHead(Layer):
    kind = "softmax"

    def forward(self, x):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, grad, need_input_grad=True):
        p = self._require_cache()
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def _build_layer(desc: dict, rng):
    t = desc.get("type")
    if t == "dense":
        return Dense(int(desc["in"]), int(desc["out"]), rng)
    if t == "conv":
        return Conv2D(int(desc["in_ch"]), int(desc["out_ch"]), int(desc["kernel"]),
                      int(desc.get("stride", 1)), rng)
    if t == "activation":
        return Activation(desc["fn"])
    if t == "flatten":
        return Flatten()
    if t in ("softmax", "softmax-head"):
        return SoftmaxHead()
    raise ConfigError(f"unknown layer descriptor {desc!r}")


class Network:
    """Sequential network built from layer descriptors.

    >>> net = Network([{"type": "dense", "in": 3, "out": 2}], input_shape=(3,), seed=0)
    >>> net.forward(np.ones((5, 3))).shape
    (5, 2)
    """

    def __init__(self, layers: Sequence[dict], input_shape: Sequence[int], seed: int = 0):
        self.spec = [dict(d) for d in layers]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = seed
        rng = make_rng(seed)
        self.layers = [_build_layer(d, rng) for d in self.spec]
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self._forwarded = False

    # -- parameters ------------------------------------------------------
    def parameters(self) -> list[np.ndarray]:
        return [layer.params[k] for layer in self.layers for k in sorted(layer.params)]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]

    def zero_grad(self):
        for g in self.gradients():
            g[...] = 0.0

    def n_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()]) if self.layers else np.zeros(0)

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ConfigError(f"expected {self.n_params()} parameters, got {flat.size}")
        i = 0
        for p in self.parameters():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def clear_cache(self):
        for layer in self.layers:
            layer._cache = None
        self._forwarded = False

    # -- passes ----------------------------------------------------------
    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ConfigError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x)
        if cache:
            self._forwarded = True
        else:
            self.clear_cache()
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray, need_input_grad: bool = False):
        """Accumulate parameter gradients for ``grad`` = dLoss/dOutput.

        Gradients are added to the layer accumulators; call ``zero_grad``
        between steps. Returns dLoss/dInput when requested.
        """
        if not self._forwarded:
            raise UsageError("backward called before forward")
        grad = np.asarray(grad, dtype=np.float64)
        for idx in range(len(self.layers) - 1, -1, -1):
            want = need_input_grad or idx > 0
            grad = self.layers[idx].backward(grad, need_input_grad=want)
        return grad


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer targets.

    Returns the loss and its gradient with respect to the logits that
    produced ``probs`` (``(probs - onehot) / N``). Probabilities at the
    target are clamped at 1e-12 before the log.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = probs.shape[0]
    picked = np.maximum(probs[np.arange(n), target], 1e-12)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[np.arange(n), target] -= 1.0
    return loss, grad / n


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Elementwise mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class Adam:
    """Adam with bias-corrected moments, updating parameter arrays in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]):
        if len(grads) != len(self.params):
            raise ConfigError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / (norm + 1e-12)) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def adam_step(opt: Adam, params, grads):
    """Functional alias: one Adam update of ``params`` (in place); returns them."""
    if params is not opt.params and any(a is not b for a, b in zip(params, opt.params)):
        raise ConfigError("optimizer was built for a different parameter list")
    opt.step(grads)
    return params


def numerical_gradient(f: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max componentwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_network_gradients(net: Network, x: np.ndarray, loss_fn, h: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences.

    ``loss_fn(output) -> (loss, dloss/doutput)``.
    """
    net.zero_grad()
    out = net.forward(x)
    _, g = loss_fn(out)
    net.backward(g)
    analytic = [gr.copy() for gr in net.gradients()]

    def f():
        return loss_fn(net.forward(x, cache=False))[0]

    worst = 0.0
    for p, a in zip(net.parameters(), analytic):
        worst = max(worst, relative_error(a, numerical_gradient(f, p, h)))
    return worst
