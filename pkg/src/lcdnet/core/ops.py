"""Differentiable operations on :class:`Tensor`.

Every function computes its forward value with numpy (depthwise convolution
goes through the compiled loops in ``kernels``) and registers a closure that
maps output gradients to input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, record


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (1, 1)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError(f"channel counts must be positive: {self}")
        if self.groups <= 0 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(f"groups={self.groups} must divide in={self.in_channels} "
                             f"and out={self.out_channels}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0 or min(self.kernel) < 1:
            raise ValueError("bad kernel/padding")

    @property
    def weight_shape(self) -> tuple:
        kh, kw = self.kernel
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels and self.groups > 1

    def output_hw(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        p, s = self.padding, self.stride
        return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars follow the tensor operand's precision
    if a.data.ndim == 0 and not a.requires_grad and b.data.dtype != a.data.dtype:
        a = Tensor(a.data.astype(b.dtype))
    if b.data.ndim == 0 and not b.requires_grad and a.data.dtype != b.data.dtype:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(gs):
        g = gs[0]
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), [a.data + b.data], bw)[0]


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(gs):
        g = gs[0]
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), [a.data - b.data], bw)[0]


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(gs):
        g = gs[0]
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), [a.data * b.data], bw)[0]


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    # division by zero is reported by the finite check below
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(gs):
        g = gs[0]
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), [out], bw)[0]


def neg(x) -> Tensor:
    x = as_tensor(x)
    return record("neg", (x,), [-x.data], lambda gs: (-gs[0],))[0]


def square(x) -> Tensor:
    x = as_tensor(x)
    return record("square", (x,), [x.data * x.data], lambda gs: (2 * x.data * gs[0],))[0]


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if (x.data < 0).any():
        raise ValueError("sqrt of negative value")
    out = np.sqrt(x.data)
    return record("sqrt", (x,), [out], lambda gs: (gs[0] * 0.5 / out,))[0]


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return record("abs", (x,), [np.abs(x.data)], lambda gs: (gs[0] * np.sign(x.data),))[0]


# -- activations -------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    return record("relu", (x,), [np.maximum(x.data, 0)],
                  lambda gs: (gs[0] * (x.data > 0),))[0]


def relu6(x) -> Tensor:
    x = as_tensor(x)
    return record("relu6", (x,), [np.clip(x.data, 0, 6)],
                  lambda gs: (gs[0] * ((x.data > 0) & (x.data < 6)),))[0]


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record("tanh", (x,), [out], lambda gs: (gs[0] * (1 - out * out),))[0]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return record("sigmoid", (x,), [out], lambda gs: (gs[0] * out * (1 - out),))[0]


# -- reductions and shape ----------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(gs):
        g = gs[0]
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), [np.asarray(out)], bw)[0]


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(gs):
        g = gs[0] / count
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("mean", (x,), [np.asarray(out, dtype=x.dtype)], bw)[0]


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record("reshape", (x,), [x.data.reshape(shape)],
                  lambda gs: (gs[0].reshape(x.shape),))[0]


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(gs):
        g = gs[0]
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record("concat", tensors, [data], bw)[0]


def split(x, sections: int, axis: int = 0) -> list:
    """Split into ``sections`` equal parts along ``axis``."""
    x = as_tensor(x)
    if x.shape[axis] % sections:
        raise ShapeError(f"axis {axis} of size {x.shape[axis]} not divisible by {sections}")
    parts = np.split(x.data, sections, axis=axis)

    def bw(gs):
        full = [g if g is not None else np.zeros_like(p) for g, p in zip(gs, parts)]
        return (np.concatenate(full, axis=axis),)

    return record("split", (x,), [np.ascontiguousarray(p) for p in parts], bw, check=False)


def channel_exchange(f1, f2, mask: np.ndarray) -> tuple:
    """Swap the channels selected by ``mask`` between two (N, C, H, W) tensors."""
    f1, f2 = as_tensor(f1), as_tensor(f2)
    if f1.shape != f2.shape:
        raise ShapeError(f"exchange needs equal shapes, got {f1.shape} and {f2.shape}")
    mask = np.asarray(mask, dtype=bool)
    if f1.ndim != 4 or mask.shape != (f1.shape[1],):
        raise ShapeError(f"mask of shape {mask.shape} does not fit {f1.shape}")
    o1 = f1.data.copy()
    o2 = f2.data.copy()
    o1[:, mask] = f2.data[:, mask]
    o2[:, mask] = f1.data[:, mask]

    def bw(gs):
        g1 = gs[0] if gs[0] is not None else np.zeros_like(o1)
        g2 = gs[1] if gs[1] is not None else np.zeros_like(o2)
        d1 = g1.copy()
        d2 = g2.copy()
        d1[:, mask] = g2[:, mask]
        d2[:, mask] = g1[:, mask]
        return d1, d2

    return tuple(record("channel_exchange", (f1, f2), [o1, o2], bw, check=False))


# -- convolution -------------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    N, C, H, W = x.shape
    out = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=x.dtype)
    out[:, :, p:p + H, p:p + W] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    N, C = xp.shape[:2]
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
    return cols.reshape(N, C * kh * kw, Ho * Wo)


def _dense_forward(x, w, s, p, Ho, Wo):
    """groups == 1 correlation. Returns output and whatever backward needs."""
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    w2 = w.reshape(O, -1)
    if kh == kw == 1 and s == 1 and p == 0:
        cols = x.reshape(N, C, H * W)
    else:
        cols = _im2col(_pad(x, p), kh, kw, s, Ho, Wo)
    out = np.matmul(w2, cols).reshape(N, O, Ho, Wo)
    return out, cols


def _dense_backward(g, x, w, cols, s, p, need_x, need_w):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = g.shape[2:]
    g2 = g.reshape(N, O, Ho * Wo)
    gw = gx = None
    if need_w:
        if Ho * Wo >= 64:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        else:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    if need_x:
        if O == 1:
            # rank-1 product: BLAS is slow at K=1, broadcasting is not
            dcols = w.reshape(1, -1, 1) * g2
        else:
            dcols = np.matmul(w.reshape(O, -1).T, g2)
        if kh == kw == 1 and s == 1 and p == 0:
            gx = dcols.reshape(x.shape)
        else:
            dcols = dcols.reshape(N, C, kh, kw, Ho, Wo)
            dxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[:, :, i, j]
            gx = dxp[:, :, p:p + H, p:p + W]
    return gx, gw


def _check_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape}")
    if spec.has_bias:
        if bias is None or bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias must have shape ({spec.out_channels},)")
    elif bias is not None:
        raise ShapeError("bias given but spec.has_bias is False")
    Ho, Wo = spec.output_hw(*x.shape[2:])
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv output would be empty for input {x.shape} and {spec}")
    return Ho, Wo


def conv2d(x, weight, bias=None, spec: ConvSpec = None) -> Tensor:
    """2-D cross-correlation over an (N, C, H, W) tensor."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if spec is None:
        O, Cg, kh, kw = weight.shape
        spec = ConvSpec(x.shape[1], O, (kh, kw), has_bias=bias is not None)
    Ho, Wo = _check_conv(x, weight, bias, spec)
    if spec.is_depthwise:
        return _depthwise(x, weight, bias, spec, Ho, Wo)

    s, p, G = spec.stride, spec.padding, spec.groups
    xd, wd = x.data, weight.data.astype(x.dtype, copy=False)
    if G == 1:
        out, cols = _dense_forward(xd, wd, s, p, Ho, Wo)
        saved = [cols]
    else:
        cin, cout = spec.in_channels // G, spec.out_channels // G
        outs, saved = [], []
        for gi in range(G):
            o, c = _dense_forward(xd[:, gi * cin:(gi + 1) * cin], wd[gi * cout:(gi + 1) * cout],
                                  s, p, Ho, Wo)
            outs.append(o)
            saved.append(c)
        out = np.concatenate(outs, axis=1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(gs):
        g = np.ascontiguousarray(gs[0])
        if G == 1:
            gx, gw = _dense_backward(g, xd, wd, saved[0], s, p, x.requires_grad, weight.requires_grad)
        else:
            cin, cout = spec.in_channels // G, spec.out_channels // G
            gxs, gws = [], []
            for gi in range(G):
                a, b = _dense_backward(np.ascontiguousarray(g[:, gi * cout:(gi + 1) * cout]),
                                       xd[:, gi * cin:(gi + 1) * cin], wd[gi * cout:(gi + 1) * cout],
                                       saved[gi], s, p, True, True)
                gxs.append(a)
                gws.append(b)
            gx = np.concatenate(gxs, axis=1)
            gw = np.concatenate(gws, axis=0)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("conv2d", inputs, [out], bw)[0]


def _depthwise(x, weight, bias, spec, Ho, Wo):
    s, p = spec.stride, spec.padding
    kh, kw = spec.kernel
    xp = _pad(x.data, p)
    w3 = weight.data.reshape(spec.out_channels, kh, kw).astype(x.dtype, copy=False)
    out = kernels.depthwise_forward(xp, w3, s, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    H, W = x.shape[2:]

    def bw(gs):
        g = gs[0]
        gx = gw = None
        if x.requires_grad:
            dxp = kernels.depthwise_grad_input(g, w3, s, H + 2 * p, W + 2 * p)
            gx = dxp[:, :, p:p + H, p:p + W]
        if weight.requires_grad:
            gw = kernels.depthwise_grad_weight(xp, g, s, kh, kw).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw) + ((gb,) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("depthwise_conv2d", inputs, [out], bw)[0]


def depthwise_conv2d(x, weight, bias=None, spec: ConvSpec = None) -> Tensor:
    x = as_tensor(x)
    if spec is None:
        C = x.shape[1]
        kh, kw = as_tensor(weight).shape[2:]
        spec = ConvSpec(C, C, (kh, kw), padding=kh // 2, groups=C, has_bias=bias is not None)
    if spec.groups != spec.in_channels:
        raise ShapeError("depthwise_conv2d needs groups == in_channels")
    return conv2d(x, weight, bias, spec)


# -- normalization -----------------------------------------------------------

def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5, act=None) -> Tensor:
    """Per-channel batch normalization, optionally followed by ``act``
    ("relu" or "relu6") in the same pass.

    In training mode the batch statistics normalize ``x`` and the running
    buffers are updated in place (unbiased variance, as is conventional).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4-D, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,) \
            or running_var.shape != (C,):
        raise ShapeError(f"batchnorm parameters must have shape ({C},)")
    if act not in kernels.ACT_CODES:
        raise ValueError(f"unknown activation {act!r}")
    xd = x.data
    gd = gamma.data.astype(np.float64)
    if training:
        m = xd.size // C
        mu, var = kernels.bn_stats(xd)
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    scale = gd * inv
    shift = beta.data - mu * scale
    out = kernels.bn_apply(xd, scale, shift, act)

    def bw(gs):
        gx, gg, gb = kernels.bn_backward(gs[0], xd, out, mu, inv, gd, act, training,
                                         x.requires_grad)
        return gx, gg.astype(gamma.dtype), gb.astype(beta.dtype)

    return record("batchnorm2d", (x, gamma, beta), [out], bw)[0]


# -- resampling --------------------------------------------------------------

def upsample_bilinear_x2(x) -> Tensor:
    """Bilinear x2 upsampling with half-pixel centers (align_corners off)."""
    x = as_tensor(x)
    if x.ndim != 4 or min(x.shape[2:]) < 1:
        raise ShapeError(f"upsample needs a non-empty 4-D tensor, got {x.shape}")
    out = kernels.upsample2_forward(x.data)
    return record("upsample_bilinear_x2", (x,), [out],
                  lambda gs: (kernels.upsample2_backward(gs[0].astype(x.dtype, copy=False)),))[0]


def l2_norm_spatial(x, eps: float = 0.0) -> Tensor:
    """sqrt(sum over H, W of x**2 + eps) per (n, c); shape (N, C, 1, 1)."""
    x = as_tensor(x)
    if not 0.0 <= eps <= 1e-5:
        raise ValueError(f"eps must lie in [0, 1e-5], got {eps}")
    ss = np.einsum("nchw,nchw->nc", x.data, x.data)[:, :, None, None]
    out = np.sqrt(ss + eps).astype(x.dtype, copy=False)

    def bw(gs):
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(out > 0, gs[0] / out, 0.0).astype(x.dtype)
        return (x.data * k,)

    return record("l2_norm_spatial", (x,), [out], bw)[0]


# -- loss --------------------------------------------------------------------

def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits, computed in the overflow-safe form."""
    z = as_tensor(logits)
    y = as_tensor(labels).data.astype(z.dtype, copy=False)
    if y.shape != z.shape:
        raise ShapeError(f"labels {y.shape} do not match logits {z.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0 or 1)")
    zd = z.data
    elems = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    loss = np.asarray(elems.mean(dtype=np.float64), dtype=zd.dtype)

    def bw(gs):
        return ((_sigmoid(zd) - y) * (gs[0] / zd.size),)

    return record("bce_with_logits", (z,), [loss], bw)[0]
