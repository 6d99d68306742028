"""Compiled loops for the memory-bound ops: depthwise convolution, batch
norm with a fused activation, and bilinear x2 upsampling.

Depthwise inputs arrive already zero-padded. Stride 1 and 2 get their own
kernels so the inner loop has a constant step and vectorizes; anything else
uses the generic version.
"""

import numba
import numpy as np

_jit = numba.njit(cache=True, fastmath=True, nogil=True)


@_jit
def _dw_fwd_s1(xp, w, Ho, Wo):
    N, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((N, C, Ho, Wo), dtype=xp.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    for oh in range(Ho):
                        for ow in range(Wo):
                            out[n, c, oh, ow] += wv * xp[n, c, oh + i, ow + j]
    return out


@_jit
def _dw_fwd_s2(xp, w, Ho, Wo):
    N, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((N, C, Ho, Wo), dtype=xp.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    for oh in range(Ho):
                        for ow in range(Wo):
                            out[n, c, oh, ow] += wv * xp[n, c, 2 * oh + i, 2 * ow + j]
    return out


@_jit
def _dw_fwd_any(xp, w, s, Ho, Wo):
    N, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((N, C, Ho, Wo), dtype=xp.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    for oh in range(Ho):
                        for ow in range(Wo):
                            out[n, c, oh, ow] += wv * xp[n, c, s * oh + i, s * ow + j]
    return out


@_jit
def _dw_gw_s1(xp, g, kh, kw):
    N, C, Ho, Wo = g.shape
    dw = np.zeros((C, kh, kw), dtype=g.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for n in range(N):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            acc += g[n, c, oh, ow] * xp[n, c, oh + i, ow + j]
                dw[c, i, j] = acc
    return dw


@_jit
def _dw_gw_s2(xp, g, kh, kw):
    N, C, Ho, Wo = g.shape
    dw = np.zeros((C, kh, kw), dtype=g.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for n in range(N):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            acc += g[n, c, oh, ow] * xp[n, c, 2 * oh + i, 2 * ow + j]
                dw[c, i, j] = acc
    return dw


@_jit
def _dw_gw_any(xp, g, s, kh, kw):
    N, C, Ho, Wo = g.shape
    dw = np.zeros((C, kh, kw), dtype=g.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for n in range(N):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            acc += g[n, c, oh, ow] * xp[n, c, s * oh + i, s * ow + j]
                dw[c, i, j] = acc
    return dw


@_jit
def _dw_gx_s1(g, w, Hp, Wp):
    N, C, Ho, Wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    for oh in range(Ho):
                        for ow in range(Wo):
                            dxp[n, c, oh + i, ow + j] += wv * g[n, c, oh, ow]
    return dxp


@_jit
def _dw_gx_s2(g, w, Hp, Wp):
    N, C, Ho, Wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    for oh in range(Ho):
                        for ow in range(Wo):
                            dxp[n, c, 2 * oh + i, 2 * ow + j] += wv * g[n, c, oh, ow]
    return dxp


@_jit
def _dw_gx_any(g, w, s, Hp, Wp):
    N, C, Ho, Wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    wv = w[c, i, j]
                    for oh in range(Ho):
                        for ow in range(Wo):
                            dxp[n, c, s * oh + i, s * ow + j] += wv * g[n, c, oh, ow]
    return dxp


def depthwise_forward(xp: np.ndarray, w: np.ndarray, stride: int, Ho: int, Wo: int) -> np.ndarray:
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w, dtype=xp.dtype)
    if stride == 1:
        return _dw_fwd_s1(xp, w, Ho, Wo)
    if stride == 2:
        return _dw_fwd_s2(xp, w, Ho, Wo)
    return _dw_fwd_any(xp, w, stride, Ho, Wo)


def depthwise_grad_weight(xp: np.ndarray, g: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    xp = np.ascontiguousarray(xp)
    g = np.ascontiguousarray(g, dtype=xp.dtype)
    if stride == 1:
        return _dw_gw_s1(xp, g, kh, kw)
    if stride == 2:
        return _dw_gw_s2(xp, g, kh, kw)
    return _dw_gw_any(xp, g, stride, kh, kw)


def depthwise_grad_input(g: np.ndarray, w: np.ndarray, stride: int, Hp: int, Wp: int) -> np.ndarray:
    g = np.ascontiguousarray(g)
    w = np.ascontiguousarray(w, dtype=g.dtype)
    if stride == 1:
        return _dw_gx_s1(g, w, Hp, Wp)
    if stride == 2:
        return _dw_gx_s2(g, w, Hp, Wp)
    return _dw_gx_any(g, w, stride, Hp, Wp)


# -- batch norm + activation ---------------------------------------------------
# act codes: 0 identity, 1 relu, 2 relu6. Arrays are viewed as (N, C, L).

ACT_CODES = {None: 0, "relu": 1, "relu6": 2}


@_jit
def _act(v, act):
    if act == 1:
        return v if v > 0 else v * 0
    if act == 2:
        return min(max(v, v * 0), v * 0 + 6)
    return v


@_jit
def _act_mask(out, act):
    if act == 1:
        return out > 0
    if act == 2:
        return out > 0 and out < 6
    return True


@_jit
def _bn_stats(x):
    N, C, L = x.shape
    mean = np.zeros(C)
    var = np.zeros(C)
    m = N * L
    for c in range(C):
        s = 0.0
        for n in range(N):
            for k in range(L):
                s += x[n, c, k]
        mu = s / m
        q = 0.0
        for n in range(N):
            for k in range(L):
                d = x[n, c, k] - mu
                q += d * d
        mean[c] = mu
        var[c] = q / m
    return mean, var


@_jit
def _bn_apply(x, scale, shift, act):
    N, C, L = x.shape
    out = np.empty_like(x)
    for n in range(N):
        for c in range(C):
            a = scale[c]
            b = shift[c]
            for k in range(L):
                out[n, c, k] = _act(x[n, c, k] * a + b, act)
    return out


@_jit
def _bn_backward(g, x, out, mean, inv, gamma, act, training, need_x):
    N, C, L = x.shape
    m = N * L
    sg = np.zeros(C)
    sgx = np.zeros(C)
    for c in range(C):
        mu = mean[c]
        s0 = 0.0
        s1 = 0.0
        for n in range(N):
            for k in range(L):
                if _act_mask(out[n, c, k], act):
                    gv = g[n, c, k]
                    s0 += gv
                    s1 += gv * (x[n, c, k] - mu)
        sg[c] = s0
        sgx[c] = s1 * inv[c]
    gx = np.empty_like(x) if need_x else np.empty((0, 0, 0), dtype=x.dtype)
    if need_x:
        for c in range(C):
            mu = mean[c]
            k0 = gamma[c] * inv[c]
            a = sg[c] / m if training else 0.0
            b = inv[c] * sgx[c] / m if training else 0.0
            for n in range(N):
                for k in range(L):
                    gv = g[n, c, k] if _act_mask(out[n, c, k], act) else 0.0
                    gx[n, c, k] = k0 * (gv - a - (x[n, c, k] - mu) * b)
    return gx, sgx, sg


def bn_stats(x: np.ndarray):
    """Per-channel mean and biased variance, accumulated in float64."""
    N, C = x.shape[:2]
    return _bn_stats(np.ascontiguousarray(x).reshape(N, C, -1))


def bn_apply(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, act=None) -> np.ndarray:
    N, C = x.shape[:2]
    x3 = np.ascontiguousarray(x).reshape(N, C, -1)
    out = _bn_apply(x3, scale.astype(x.dtype), shift.astype(x.dtype), ACT_CODES[act])
    return out.reshape(x.shape)


def bn_backward(g, x, out, mean, inv, gamma, act=None, training=True, need_x=True):
    """Returns (grad_x or None, grad_gamma, grad_beta) with the activation folded in."""
    N, C = x.shape[:2]
    r = lambda a: np.ascontiguousarray(a, dtype=x.dtype).reshape(N, C, -1)
    gx, gg, gb = _bn_backward(r(g), r(x), r(out), np.asarray(mean, np.float64),
                              np.asarray(inv, np.float64), np.asarray(gamma, np.float64),
                              ACT_CODES[act], training, need_x)
    return (gx.reshape(x.shape) if need_x else None), gg, gb


# -- bilinear x2 upsampling (half-pixel centers, edge clamped) ----------------

# Separable: a row pass whose inner loop runs along contiguous memory, then a
# column pass. The backward passes are the exact transposes, written as gathers.

@_jit
def _up2_fwd(x):
    N, C, H, W = x.shape
    out = np.empty((N, C, 2 * H, 2 * W), dtype=x.dtype)
    tmp = np.empty((2 * H, W), dtype=x.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(H):
                ip = max(i - 1, 0)
                inx = min(i + 1, H - 1)
                for j in range(W):
                    v = 0.75 * x[n, c, i, j]
                    tmp[2 * i, j] = v + 0.25 * x[n, c, ip, j]
                    tmp[2 * i + 1, j] = v + 0.25 * x[n, c, inx, j]
            for r in range(2 * H):
                for j in range(W):
                    v = 0.75 * tmp[r, j]
                    out[n, c, r, 2 * j] = v + 0.25 * tmp[r, max(j - 1, 0)]
                    out[n, c, r, 2 * j + 1] = v + 0.25 * tmp[r, min(j + 1, W - 1)]
    return out


@_jit
def _up2_bwd(g):
    N, C, H2, W2 = g.shape
    H, W = H2 // 2, W2 // 2
    gx = np.empty((N, C, H, W), dtype=g.dtype)
    tmp = np.empty((H2, W), dtype=g.dtype)
    for n in range(N):
        for c in range(C):
            for r in range(H2):
                for j in range(W):
                    lo = g[n, c, r, 2 * j - 1] if j > 0 else g[n, c, r, 0]
                    hi = g[n, c, r, 2 * j + 2] if j < W - 1 else g[n, c, r, W2 - 1]
                    tmp[r, j] = 0.75 * (g[n, c, r, 2 * j] + g[n, c, r, 2 * j + 1]) + 0.25 * (lo + hi)
            for i in range(H):
                rl = 2 * i - 1 if i > 0 else 0
                rh = 2 * i + 2 if i < H - 1 else H2 - 1
                for j in range(W):
                    gx[n, c, i, j] = (0.75 * (tmp[2 * i, j] + tmp[2 * i + 1, j])
                                      + 0.25 * (tmp[rl, j] + tmp[rh, j]))
    return gx


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    return _up2_fwd(np.ascontiguousarray(x))


def upsample2_backward(g: np.ndarray) -> np.ndarray:
    return _up2_bwd(np.ascontiguousarray(g))
