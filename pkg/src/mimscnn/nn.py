"""Layer primitives: convolution, bilinear resize, batch norm, pooling,
affine maps and the logistic loss, each with a hand-written backward rule."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, Tensor, _as_tensor, _sigmoid, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# functional ops


def conv_out_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [b,c,h,w]`` with ``weight [o,c,k,k]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci} ({x.shape} vs {weight.shape})")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {h}x{w} (padding {padding}) smaller than kernel {kh}x{kw}")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = conv_out_size(h, kh, s, p), conv_out_size(w, kw, s, p)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcol = np.tensordot(g, weight.data, axes=([1], [0]))  # [b,ho,wo,c,kh,kw]
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcol[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node(out.astype(x.dtype, copy=False), parents, "conv2d", bw)


def resize_extent(size: int, scale: float) -> int:
    """Round-half-up of ``size * scale``."""
    return int(math.floor(size * scale + 0.5))


def interp_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """Row ``d`` holds the blend weights of output pixel ``d``.

    Half-pixel centres: ``s = (d + 0.5) / scale - 0.5``, clamped to
    ``[0, n_in - 1]``.
    """
    d = np.arange(n_out, dtype=np.float64)
    src = np.clip((d + 0.5) / scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    a = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    return a


def _resize(x: Tensor, oh: int, ow: int, h_scale: float, w_scale: float) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected [b,c,h,w], got {x.shape}")
    if oh < 1 or ow < 1:
        raise ValueError(f"bilinear_resize: output extent {oh}x{ow} is not positive")
    _, _, h, w = x.shape
    ah = interp_matrix(h, oh, h_scale)
    aw = interp_matrix(w, ow, w_scale)
    # blend in float64 so constant images survive the round trip exactly
    out = (ah @ x.data.astype(np.float64) @ aw.T).astype(x.dtype)
    return make_node(out, (x,), "bilinear_resize",
                     lambda g: ((ah.T @ g.astype(np.float64) @ aw).astype(x.dtype),))


def bilinear_resize(x: Tensor, h_scale: float, w_scale: float | None = None) -> Tensor:
    w_scale = h_scale if w_scale is None else w_scale
    for sc in (h_scale, w_scale):
        if not 0 < sc <= 8:
            raise ValueError(f"bilinear_resize: scale {sc} outside (0, 8]")
    _, _, h, w = x.shape
    return _resize(x, resize_extent(h, h_scale), resize_extent(w, w_scale), h_scale, w_scale)


def resize_to(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize to an explicit extent (scale = out / in per axis)."""
    _, _, h, w = x.shape
    return _resize(x, out_h, out_w, out_h / h, out_w / w)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch norm over (b, h, w).

    In training mode the biased batch variance normalizes and both running
    statistics are updated in place with ``momentum``. In eval mode the
    running statistics are constants.
    """
    b, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels vs gamma {gamma.shape}")
    g4 = gamma.data[None, :, None, None]
    if training:
        n = b * h * w
        if n < 2:
            raise ValueError("batchnorm2d: training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        n = None
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)[None, :, None, None]
    xhat = (x.data - mu.astype(x.dtype)[None, :, None, None]) * inv
    out = g4 * xhat + beta.data[None, :, None, None]

    def bw(gr):
        gg = (gr * xhat).sum(axis=(0, 2, 3))
        gb = gr.sum(axis=(0, 2, 3))
        dxhat = gr * g4
        if n is None:
            return dxhat * inv, gg, gb
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv / n * (n * dxhat - s1 - xhat * s2), gg, gb

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), "batchnorm2d", bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pool; trailing rows/columns that do not fill a window are dropped."""
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {h}x{w} smaller than window {size}")
    win = (x.data[:, :, :ho * size, :wo * size]
           .reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size))
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, -1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[..., None], -1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = (
            gw.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * size, wo * size))
        return (gx,)

    return make_node(out, (x,), "max_pool2d", bw)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: shape mismatch {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: shape mismatch {weight.shape} vs bias {bias.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads if bias is None else grads + (g.sum(axis=0),)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, "fully_connected", bw)


def channel_scale(x: Tensor, w: Tensor) -> Tensor:
    """Multiply channel ``j`` of ``x [b,N,h,w]`` by ``w[j]``."""
    if w.shape != (x.shape[1],):
        raise ShapeError(f"channel_scale: shape mismatch {x.shape} vs {w.shape}")
    w4 = w.data[None, :, None, None]
    return make_node(x.data * w4, (x, w), "channel_scale",
                     lambda g: (g * w4, (g * x.data).sum(axis=(0, 2, 3))))


def bce_with_logits(logit: Tensor, label) -> Tensor:
    """Mean binary cross-entropy on logits, in the stable
    ``max(z, 0) - z*y + log(1 + exp(-|z|))`` form."""
    y = _as_tensor(label, logit).data.astype(logit.dtype)
    if y.shape != logit.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {logit.shape} vs {y.shape}")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("bce_with_logits: labels must be 0 or 1")
    z = logit.data
    n = z.size
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n
    return make_node(np.asarray(loss, dtype=logit.dtype), (logit,), "bce_with_logits",
                     lambda g: (g * (_sigmoid(z) - y) / n,))


# ---------------------------------------------------------------------------
# modules


class Module:
    """Parameter container; children are discovered from attributes."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, v in vars(self).items():
            if isinstance(v, (Parameter, Module)):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, v in self._children():
            path = f"{prefix}{name}"
            if isinstance(v, Parameter):
                yield path, v
            else:
                yield from v.named_parameters(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, v in self._children():
            if isinstance(v, Module):
                yield from v.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, v in self._children():
            if isinstance(v, Module):
                yield from v.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv2D(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride, self.padding, self.kernel = stride, padding, kernel

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2D(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        if eps <= 0:
            raise ValueError("BatchNorm2D: eps must be positive")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum, self.eps = momentum, eps

    def named_buffers(self, prefix: str = ""):
        yield f"{prefix}running_mean", self.running_mean
        yield f"{prefix}running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)
