"""Float64 layers with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in float64. Spatial layers work on
batches shaped ``(N, C, H, W)`` and also accept a single ``(C, H, W)`` image.
Every ``forward`` is pure: it returns ``(output, cache)`` and never mutates the
layer, and ``backward(cache, grad_out)`` returns ``(grad_in, grads)`` where
``grads`` maps parameter names to arrays shaped like the parameters.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, RejectedInput, StateError

FORMAT_VERSION = 1

Params = dict[str, np.ndarray]


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise RejectedInput(f"expected a {ndim - 1}- or {ndim}-d tensor, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x, params: Mapping[str, np.ndarray], stride=1, pad=0):
    """Cross-correlation (no kernel flip) of ``x`` with ``params['w']``.

    ``params['w']`` is ``(C_out, C_in, kh, kw)`` and ``params['b']`` is
    ``(C_out,)``. Returns ``(y, cache)``.
    """
    x = as_tensor(x)
    xb, squeeze = _batched(x, 4)
    w, b = params["w"], params["b"]
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if sh < 1 or sw < 1:
        raise RejectedInput("stride must be >= 1")
    n, c, h, wd = xb.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise RejectedInput(f"input has {c} channels, kernel expects {ci}")
    hp, wp = h + 2 * ph, wd + 2 * pw
    if kh > hp or kw > wp:
        raise RejectedInput(f"kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    if (hp - kh) % sh or (wp - kw) % sw:
        raise RejectedInput("stride does not tile the padded input exactly")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xb
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(co, -1).T + b
    y = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    cache = (cols, xb.shape, w, (sh, sw), (ph, pw), squeeze)
    return (y[0] if squeeze else np.ascontiguousarray(y)), cache


def conv2d_backward(cache, grad_out):
    if cache is None:
        raise StateError("conv2d backward called without a forward cache")
    cols, xshape, w, (sh, sw), (ph, pw), squeeze = cache
    g = as_tensor(grad_out)
    if squeeze:
        g = g[None]
    n, c, h, wd = xshape
    co, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    grads = {"w": (gm.T @ cols).reshape(w.shape), "b": gm.sum(axis=0)}
    gcols = (gm @ w.reshape(co, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, ph : ph + h, pw : pw + wd]
    return (gx[0] if squeeze else gx), grads


# --------------------------------------------------------------------------
# pooling / upsampling


def maxpool_forward(x, size=2):
    """Non-overlapping max pooling; ties go to the first element in row-major order."""
    x = as_tensor(x)
    xb, squeeze = _batched(x, 4)
    kh, kw = _pair(size)
    n, c, h, w = xb.shape
    if h % kh or w % kw:
        raise RejectedInput(f"pool {kh}x{kw} does not tile input {h}x{w}")
    blocks = xb.reshape(n, c, h // kh, kh, w // kw, kw).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // kh, w // kw, kh * kw)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    cache = (arg, xb.shape, (kh, kw), squeeze)
    return (y[0] if squeeze else y), cache


def maxpool_backward(cache, grad_out):
    if cache is None:
        raise StateError("maxpool backward called without a forward cache")
    arg, xshape, (kh, kw), squeeze = cache
    g = as_tensor(grad_out)
    if squeeze:
        g = g[None]
    n, c, h, w = xshape
    onehot = np.zeros(arg.shape + (kh * kw,))
    np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
    gx = onehot.reshape(n, c, h // kh, w // kw, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(xshape)
    return (gx[0] if squeeze else gx), {}


def upsample_forward(x, factor=2):
    """Nearest-neighbour upsampling by an integer factor on both spatial axes."""
    x = as_tensor(x)
    y = np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)
    return y, (x.shape, factor)


def upsample_backward(cache, grad_out):
    if cache is None:
        raise StateError("upsample backward called without a forward cache")
    shape, f = cache
    g = as_tensor(grad_out)
    h, w = shape[-2], shape[-1]
    g = g.reshape(g.shape[:-2] + (h, f, w, f)).sum(axis=(-3, -1))
    return g, {}


# --------------------------------------------------------------------------
# elementwise and dense


def sigmoid(x):
    # tanh form is overflow-free for any finite input
    return 0.5 * np.tanh(0.5 * as_tensor(x)) + 0.5


def softmax(logits, axis: int = -1):
    """Numerically stable softmax (max-subtracted)."""
    z = as_tensor(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1):
    z = as_tensor(logits)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def linear_forward(x, params):
    x = as_tensor(x)
    w, b = params["w"], params["b"]
    if x.shape[-1] != w.shape[1]:
        raise RejectedInput(f"input width {x.shape[-1]} != weight fan-in {w.shape[1]}")
    return x @ w.T + b, (x, w)


def linear_backward(cache, grad_out):
    if cache is None:
        raise StateError("linear backward called without a forward cache")
    x, w = cache
    g = as_tensor(grad_out)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return g @ w, {"w": g2.T @ x2, "b": g2.sum(axis=0)}


# --------------------------------------------------------------------------
# LSTM


def lstm_step(x, h_prev, c_prev, params):
    """One LSTM cell step.

    Gate pre-activations are stacked ``[input, forget, output, candidate]`` in
    ``params['wx']`` (4H x D), ``params['wh']`` (4H x H) and ``params['b']`` (4H).
    Works on single vectors or on batches ``(N, D)``. Returns ``(h, c, cache)``.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    wx, wh, b = params["wx"], params["wh"], params["b"]
    hdim = wh.shape[1]
    if x.shape[-1] != wx.shape[1] or h_prev.shape[-1] != hdim or c_prev.shape[-1] != hdim:
        raise RejectedInput(
            f"lstm dims: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} vs D={wx.shape[1]}, H={hdim}"
        )
    z = x @ wx.T + h_prev @ wh.T + b
    i = sigmoid(z[..., :hdim])
    f = sigmoid(z[..., hdim : 2 * hdim])
    o = sigmoid(z[..., 2 * hdim : 3 * hdim])
    g = np.tanh(z[..., 3 * hdim :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc, wx, wh)


def lstm_step_backward(cache, dh, dc):
    """Returns ``(dx, dh_prev, dc_prev, grads)`` for one cell step."""
    if cache is None:
        raise StateError("lstm backward called without a forward cache")
    x, h_prev, c_prev, i, f, o, g, tc, wx, wh = cache
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dct * g * i * (1.0 - i),
            dct * c_prev * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dct * i * (1.0 - g * g),
        ],
        axis=-1,
    )
    dz2 = dz.reshape(-1, dz.shape[-1])
    grads = {
        "wx": dz2.T @ x.reshape(-1, x.shape[-1]),
        "wh": dz2.T @ h_prev.reshape(-1, h_prev.shape[-1]),
        "b": dz2.sum(axis=0),
    }
    return dz @ wx, dz @ wh, dct * f, grads


# --------------------------------------------------------------------------
# layer objects


class Layer:
    """Base class; subclasses define ``forward``/``backward`` and hyperparameters."""

    kind = "layer"

    def __init__(self, params: Params | None = None):
        self.params: Params = params or {}

    def hyper(self) -> dict:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, grad_out):
        raise NotImplementedError

    def with_params(self, params: Params) -> "Layer":
        new = copy.copy(self)
        new.params = {k: params[k] for k in self.params}
        return new

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, kernel=3, stride=1, pad=None, rng=None, params=None):
        kh, kw = _pair(kernel)
        if pad is None:
            pad = (kh // 2, kw // 2)
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = (kh, kw), _pair(stride), _pair(pad)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = {
                "w": glorot(rng, (c_out, c_in, kh, kw), c_in * kh * kw, c_out * kh * kw),
                "b": np.zeros(c_out),
            }
        super().__init__(params)

    def hyper(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "kernel": list(self.kernel),
                "stride": list(self.stride), "pad": list(self.pad)}

    def forward(self, x):
        return conv2d_forward(x, self.params, self.stride, self.pad)

    def backward(self, cache, grad_out):
        return conv2d_backward(cache, grad_out)


class Linear(Layer):
    kind = "linear"

    def __init__(self, d_in: int, d_out: int, rng=None, params=None):
        self.d_in, self.d_out = d_in, d_out
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = {"w": glorot(rng, (d_out, d_in), d_in, d_out), "b": np.zeros(d_out)}
        super().__init__(params)

    def hyper(self):
        return {"d_in": self.d_in, "d_out": self.d_out}

    def forward(self, x):
        return linear_forward(x, self.params)

    def backward(self, cache, grad_out):
        return linear_backward(cache, grad_out)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        x = as_tensor(x)
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, grad_out):
        if cache is None:
            raise StateError("relu backward called without a forward cache")
        return as_tensor(grad_out) * cache, {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = sigmoid(x)
        return y, y

    def backward(self, cache, grad_out):
        if cache is None:
            raise StateError("sigmoid backward called without a forward cache")
        return as_tensor(grad_out) * cache * (1.0 - cache), {}


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x):
        y = np.tanh(as_tensor(x))
        return y, y

    def backward(self, cache, grad_out):
        if cache is None:
            raise StateError("tanh backward called without a forward cache")
        return as_tensor(grad_out) * (1.0 - cache * cache), {}


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, size=2):
        self.size = _pair(size)
        super().__init__()

    def hyper(self):
        return {"size": list(self.size)}

    def forward(self, x):
        return maxpool_forward(x, self.size)

    def backward(self, cache, grad_out):
        return maxpool_backward(cache, grad_out)


class Upsample2d(Layer):
    kind = "upsample2d"

    def __init__(self, factor: int = 2):
        self.factor = int(factor)
        super().__init__()

    def hyper(self):
        return {"factor": self.factor}

    def forward(self, x):
        return upsample_forward(x, self.factor)

    def backward(self, cache, grad_out):
        return upsample_backward(cache, grad_out)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x):
        y = softmax(x)
        return y, y

    def backward(self, cache, grad_out):
        if cache is None:
            raise StateError("softmax backward called without a forward cache")
        g = as_tensor(grad_out)
        return cache * (g - (g * cache).sum(axis=-1, keepdims=True)), {}


class SoftmaxCrossEntropy(Layer):
    """Scalar loss ``-log softmax(x)[target]`` summed over leading axes."""

    kind = "softmax_xent"

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.int64)
        super().__init__()

    def hyper(self):
        return {"target": self.target.tolist()}

    def forward(self, x):
        lp = log_softmax(x)
        picked = np.take_along_axis(lp, self.target.reshape(lp.shape[:-1] + (1,)), axis=-1)
        return -picked.sum(), (np.exp(lp), lp.shape)

    def backward(self, cache, grad_out):
        if cache is None:
            raise StateError("cross-entropy backward called without a forward cache")
        p, shape = cache
        g = p.copy()
        idx = self.target.reshape(shape[:-1] + (1,))
        np.put_along_axis(g, idx, np.take_along_axis(g, idx, axis=-1) - 1.0, axis=-1)
        return g * float(grad_out), {}


class LSTM(Layer):
    """Unidirectional LSTM over a time-major sequence ``(T, N, D)``.

    With ``reverse=True`` the sequence is consumed from the last frame back.
    ``lengths`` gives each batch member's true frame count; the reverse pass
    restarts from a zero state at frame ``lengths[n] - 1`` so padded tails have
    no influence on valid frames in either direction.
    """

    kind = "lstm"

    def __init__(self, d_in: int, hidden: int, reverse: bool = False, rng=None, params=None,
                 forget_bias: float = 1.0):
        if hidden <= 0:
            raise RejectedInput("hidden width must be positive")
        self.d_in, self.hidden, self.reverse = d_in, hidden, bool(reverse)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            b = np.zeros(4 * hidden)
            b[hidden : 2 * hidden] = forget_bias
            params = {
                "wx": glorot(rng, (4 * hidden, d_in), d_in, 4 * hidden),
                "wh": glorot(rng, (4 * hidden, hidden), hidden, 4 * hidden),
                "b": b,
            }
        super().__init__(params)

    def hyper(self):
        return {"d_in": self.d_in, "hidden": self.hidden, "reverse": self.reverse}

    def forward(self, x, lengths=None):
        x = as_tensor(x)
        t_len, n, _ = x.shape
        mask = _length_mask(t_len, n, lengths)
        h = np.zeros((n, self.hidden))
        c = np.zeros((n, self.hidden))
        out = np.zeros((t_len, n, self.hidden))
        steps = [None] * t_len
        order = range(t_len - 1, -1, -1) if self.reverse else range(t_len)
        for t in order:
            h, c, steps[t] = lstm_step(x[t], h, c, self.params)
            if self.reverse:
                m = mask[t][:, None]
                h, c = h * m, c * m
            out[t] = h
        return out, (steps, mask, x.shape)

    def backward(self, cache, grad_out):
        if cache is None:
            raise StateError("lstm backward called without a forward cache")
        steps, mask, xshape = cache
        g = as_tensor(grad_out)
        t_len, n, _ = xshape
        dx = np.zeros(xshape)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dh = np.zeros((n, self.hidden))
        dc = np.zeros((n, self.hidden))
        order = range(t_len) if self.reverse else range(t_len - 1, -1, -1)
        for t in order:
            dh = dh + g[t]
            if self.reverse:
                m = mask[t][:, None]
                dh, dc = dh * m, dc * m
            dx[t], dh, dc, gs = lstm_step_backward(steps[t], dh, dc)
            for k in grads:
                grads[k] += gs[k]
        return dx, grads


def _length_mask(t_len: int, n: int, lengths) -> np.ndarray:
    if lengths is None:
        return np.ones((t_len, n))
    lengths = np.asarray(lengths)
    if lengths.shape != (n,) or lengths.max(initial=0) > t_len:
        raise RejectedInput("lengths must give one frame count <= T per batch member")
    return (np.arange(t_len)[:, None] < lengths[None, :]).astype(np.float64)


class BiLSTM(Layer):
    """Forward and reverse LSTMs over the same frames, outputs concatenated."""

    kind = "bilstm"

    def __init__(self, d_in: int, hidden: int, rng=None, params=None):
        self.d_in, self.hidden = d_in, hidden
        self.fwd = LSTM(d_in, hidden, rng=rng)
        self.bwd = LSTM(d_in, hidden, reverse=True, rng=rng)
        if params is None:
            params = {f"f.{k}": v for k, v in self.fwd.params.items()}
            params.update({f"b.{k}": v for k, v in self.bwd.params.items()})
        super().__init__(params)
        self._split()

    def _split(self):
        self.fwd = self.fwd.with_params({k[2:]: v for k, v in self.params.items() if k.startswith("f.")})
        self.bwd = self.bwd.with_params({k[2:]: v for k, v in self.params.items() if k.startswith("b.")})

    def with_params(self, params):
        new = super().with_params(params)
        new._split()
        return new

    def hyper(self):
        return {"d_in": self.d_in, "hidden": self.hidden}

    def forward(self, x, lengths=None):
        yf, cf = self.fwd.forward(x, lengths)
        yb, cb = self.bwd.forward(x, lengths)
        return np.concatenate([yf, yb], axis=-1), (cf, cb)

    def backward(self, cache, grad_out):
        if cache is None:
            raise StateError("bilstm backward called without a forward cache")
        cf, cb = cache
        g = as_tensor(grad_out)
        gxf, gf = self.fwd.backward(cf, g[..., : self.hidden])
        gxb, gb = self.bwd.backward(cb, g[..., self.hidden :])
        grads = {f"f.{k}": v for k, v in gf.items()}
        grads.update({f"b.{k}": v for k, v in gb.items()})
        return gxf + gxb, grads


class Sequential(Layer):
    """Chain of layers; parameters are addressed as ``"<index>.<name>"``."""

    kind = "sequential"

    def __init__(self, layers: list[Layer], names: list[str] | None = None):
        self.layers = list(layers)
        self.names = names or [str(i) for i in range(len(self.layers))]
        params = {}
        for name, layer in zip(self.names, self.layers):
            params.update({f"{name}.{k}": v for k, v in layer.params.items()})
        super().__init__(params)

    def with_params(self, params):
        layers = []
        for name, layer in zip(self.names, self.layers):
            if layer.params:
                layer = layer.with_params({k: params[f"{name}.{k}"] for k in layer.params})
            layers.append(layer)
        return Sequential(layers, self.names)

    def forward(self, x, check_finite: bool = False):
        caches = []
        for name, layer in zip(self.names, self.layers):
            x, cache = layer.forward(x)
            if check_finite and not np.all(np.isfinite(x)):
                raise NumericError(f"{name}:{layer.kind}")
            caches.append(cache)
        return x, caches

    def backward(self, cache, grad_out):
        if cache is None:
            raise StateError("sequential backward called without a forward cache")
        grads = {}
        g = grad_out
        for name, layer, c in reversed(list(zip(self.names, self.layers, cache))):
            g, gs = layer.backward(c, g)
            grads.update({f"{name}.{k}": v for k, v in gs.items()})
        return g, grads


# --------------------------------------------------------------------------
# optimisation


def sgd_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> Params:
    """Plain gradient step ``w - lr * g``; returns new arrays, inputs untouched."""
    if lr < 0:
        raise RejectedInput("learning rate must be non-negative")
    out = {}
    for k, w in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = w
            continue
        if np.shape(g) != np.shape(w):
            raise RejectedInput(f"gradient shape {np.shape(g)} != parameter shape {np.shape(w)} for {k!r}")
        out[k] = w - lr * g
    return out


class Adam:
    """Adam with bias correction; same ``step`` interface as :class:`SGD`."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = None):
        if lr < 0:
            raise RejectedInput("learning rate must be non-negative")
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Params, grads: Params) -> Params:
        grads = _clip(grads, self.clip)
        self.t += 1
        b1, b2 = self.betas
        out = dict(params)
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _clip(grads: Params, clip: float | None) -> Params:
    if clip is None:
        return grads
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > clip:
        return {k: g * (clip / norm) for k, g in grads.items()}
    return grads


class SGD:
    """Minibatch SGD with optional heavy-ball momentum and global-norm clipping.

    ``momentum=0`` and ``clip=None`` reduce to :func:`sgd_update`.
    """

    def __init__(self, lr: float, momentum: float = 0.0, clip: float | None = None):
        if lr < 0 or not 0 <= momentum < 1:
            raise RejectedInput("need lr >= 0 and 0 <= momentum < 1")
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: Params, grads: Params) -> Params:
        grads = _clip(grads, self.clip)
        if self.momentum == 0.0:
            return sgd_update(params, grads, self.lr)
        for k, g in grads.items():
            v = self.velocity.get(k)
            self.velocity[k] = g if v is None else self.momentum * v + g
        return sgd_update(params, self.velocity, self.lr)


# --------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradReport:
    max_abs_err: float
    max_rel_err: float
    worst: str

    def ok(self, rel_tol: float) -> bool:
        return self.max_rel_err <= rel_tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries absolute."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(loss_fn: Callable[[Params], float], arrays: Params, analytic: Params,
                    eps: float = 1e-4, floor: float = 1e-7) -> GradReport:
    """Compare ``analytic`` gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives a dict shaped like ``arrays`` and must not keep it.
    It may return an array of terms instead of their sum; the two probes are
    then subtracted term by term before summing, which keeps rounding error
    out of coordinates the probe does not touch. The difference is divided
    by the step actually realised in floating point.
    """
    if eps <= 0:
        raise RejectedInput("eps must be positive")
    worst_abs, worst_rel, worst = 0.0, 0.0, ""
    for name, base in arrays.items():
        base = as_tensor(base)
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        for idx in range(flat.size):
            probe = flat.copy()
            probe[idx] = flat[idx] + eps
            hi = probe[idx]
            plus = np.asarray(loss_fn({**arrays, name: probe.reshape(base.shape)}), dtype=np.float64)
            probe[idx] = flat[idx] - eps
            lo = probe[idx]
            minus = np.asarray(loss_fn({**arrays, name: probe.reshape(base.shape)}), dtype=np.float64)
            num.reshape(-1)[idx] = float((plus - minus).sum()) / (hi - lo)
        a = as_tensor(analytic[name])
        abs_err = np.abs(a - num)
        rel = relative_error(a, num, floor)
        if abs_err.size and abs_err.max() > worst_abs:
            worst_abs = float(abs_err.max())
        if rel.size and rel.max() > worst_rel:
            worst_rel = float(rel.max())
            worst = f"{name}{[int(i) for i in np.unravel_index(rel.argmax(), rel.shape)]}"
    return GradReport(worst_abs, worst_rel, worst)


def finite_diff_check(op: Layer, x, eps: float = 1e-4, seed: int = 0) -> GradReport:
    """Gradient check of a layer w.r.t. its input and every parameter.

    The scalar probed is ``sum(r * op(x))`` for a fixed random ``r`` so every
    output coordinate contributes.
    """
    x = as_tensor(x)
    y, cache = op.forward(x)
    r = np.random.default_rng(seed).standard_normal(np.shape(y))
    gx, gparams = op.backward(cache, r)

    def loss(arrs):
        layer = op.with_params({k: v for k, v in arrs.items() if k != "__input__"}) if op.params else op
        out, _ = layer.forward(arrs["__input__"])
        return r * out

    arrays = {"__input__": x, **op.params}
    analytic = {"__input__": gx, **gparams}
    return check_gradients(loss, arrays, analytic, eps)


# --------------------------------------------------------------------------
# serialization

_LAYER_TYPES: dict[str, type] = {}


def _register(*classes):
    for cls in classes:
        _LAYER_TYPES[cls.kind] = cls


_register(Conv2d, Linear, ReLU, Sigmoid, Tanh, MaxPool2d, Upsample2d, Softmax, LSTM, BiLSTM)


def layer_spec(layer: Layer) -> dict:
    return {"kind": layer.kind, "hyper": layer.hyper()}


def build_layer(spec: dict, params: Params | None = None) -> Layer:
    cls = _LAYER_TYPES[spec["kind"]]
    hyper = dict(spec.get("hyper", {}))
    if cls in (Conv2d, Linear, LSTM, BiLSTM):
        if cls is Conv2d:
            hyper["kernel"] = tuple(hyper["kernel"])
            hyper["stride"] = tuple(hyper["stride"])
            hyper["pad"] = tuple(hyper["pad"])
        layer = cls(**hyper)
        if params is not None:
            layer = layer.with_params(params)
        return layer
    if cls is MaxPool2d:
        return MaxPool2d(tuple(hyper["size"]))
    return cls(**hyper)


def save_arrays(path, kind: str, meta: dict, arrays: Params) -> None:
    """Write a self-describing ``.npz`` container (no pickle)."""
    header = json.dumps({"format_version": FORMAT_VERSION, "kind": kind, "meta": meta}, sort_keys=True)
    payload = {f"p/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    with open(Path(path), "wb") as fh:
        np.savez(fh, __header__=np.array(header), **payload)


def load_arrays(path) -> tuple[str, dict, Params]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise RejectedInput(f"unsupported model format version {header.get('format_version')}")
        arrays = {k[2:]: data[k] for k in data.files if k.startswith("p/")}
    return header["kind"], header["meta"], arrays
