"""Dense float64 kernels with hand-written reverse-mode rules.

Tensors are plain ``numpy.float64`` arrays. Every forward function returns
``(output, cache)`` and has a matching ``*_backward(grad_output, cache)``.
Layer normalisation, GELU, row softmax and the masked AdamW update have a
numba kernel and a vectorised numpy twin; ``growtas._accel`` picks one.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import njit, pick
from .errors import DimensionError, InputError

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# --------------------------------------------------------------------- matmul
def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, n)."""
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    k, n = b.shape
    ga = grad @ b.T
    gb = a.reshape(-1, k).T @ grad.reshape(-1, n)
    return ga, gb


def linear(x, w, bias=None):
    y = matmul(x, w)
    if bias is not None:
        y = y + bias
    return y


def linear_backward(grad, x, w):
    gx, gw = matmul_backward(grad, x, w)
    gb = grad.reshape(-1, w.shape[1]).sum(axis=0)
    return gx, gw, gb


# ------------------------------------------------------------------ layernorm
@njit
def _ln_fwd_nb(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            t = x[i, j] - mu
            var += t * t
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


def _ln_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd


@njit
def _ln_bwd_nb(gy, xhat, rstd, gamma):
    n, d = gy.shape
    gx = np.empty_like(gy)
    ggamma = np.zeros(d)
    gbeta = np.zeros(d)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = gy[i, j] * gamma[j]
            s1 += g
            s2 += g * xhat[i, j]
            ggamma[j] += gy[i, j] * xhat[i, j]
            gbeta[j] += gy[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            gx[i, j] = rstd[i] * (gy[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return gx, ggamma, gbeta


def _ln_bwd_np(gy, xhat, rstd, gamma):
    g = gy * gamma
    s1 = g.mean(axis=1, keepdims=True)
    s2 = (g * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (g - s1 - xhat * s2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


_ln_fwd = pick(_ln_fwd_nb, _ln_fwd_np)
_ln_bwd = pick(_ln_bwd_nb, _ln_bwd_np)


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layernorm: feature dimension is empty")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: gamma/beta {gamma.shape}/{beta.shape} vs features {d}")
    if not eps > 0:
        raise InputError("layernorm: eps must be positive")
    x2 = np.ascontiguousarray(x.reshape(-1, d))
    y, xhat, rstd = _ln_fwd(x2, np.ascontiguousarray(gamma), np.ascontiguousarray(beta), eps)
    return y.reshape(x.shape), (xhat, rstd, gamma, x.shape)


def layernorm_backward(grad: np.ndarray, cache):
    xhat, rstd, gamma, shape = cache
    gy = np.ascontiguousarray(grad.reshape(xhat.shape))
    gx, ggamma, gbeta = _ln_bwd(gy, xhat, rstd, np.ascontiguousarray(gamma))
    return gx.reshape(shape), ggamma, gbeta


# ----------------------------------------------------------------------- gelu
@njit
def _gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + np.tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out.reshape(x.shape)


def _gelu_fwd_np(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


@njit
def _gelu_bwd_nb(grad, x):
    fx = x.ravel()
    fg = grad.ravel()
    out = np.empty_like(fx)
    for i in range(fx.size):
        v = fx[i]
        t = np.tanh(GELU_C * (v + GELU_A * v * v * v))
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = fg[i] * d
    return out.reshape(x.shape)


def _gelu_bwd_np(grad, x):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return grad * d


_gelu_fwd = pick(_gelu_fwd_nb, _gelu_fwd_np)
_gelu_bwd = pick(_gelu_bwd_nb, _gelu_bwd_np)


def gelu(x):
    x = np.ascontiguousarray(x)
    return _gelu_fwd(x), x


def gelu_backward(grad, cache):
    return _gelu_bwd(np.ascontiguousarray(grad), cache)


# -------------------------------------------------------------------- softmax
@njit
def _softmax_nb(z):
    n, d = z.shape
    out = np.empty_like(z)
    for i in range(n):
        mx = z[i, 0]
        for j in range(1, d):
            if z[i, j] > mx:
                mx = z[i, j]
        s = 0.0
        for j in range(d):
            e = np.exp(z[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(d):
            out[i, j] /= s
    return out


def _softmax_np(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@njit
def _softmax_bwd_nb(gp, p):
    n, d = p.shape
    out = np.empty_like(p)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += gp[i, j] * p[i, j]
        for j in range(d):
            out[i, j] = p[i, j] * (gp[i, j] - s)
    return out


def _softmax_bwd_np(gp, p):
    return p * (gp - (gp * p).sum(axis=1, keepdims=True))


_softmax = pick(_softmax_nb, _softmax_np)
_softmax_bwd = pick(_softmax_bwd_nb, _softmax_bwd_np)


def softmax(z):
    """Softmax over the last axis."""
    d = z.shape[-1]
    p = _softmax(np.ascontiguousarray(z.reshape(-1, d)))
    return p.reshape(z.shape)


def softmax_backward(grad, p):
    d = p.shape[-1]
    g = _softmax_bwd(np.ascontiguousarray(grad.reshape(-1, d)), np.ascontiguousarray(p.reshape(-1, d)))
    return g.reshape(p.shape)


# ------------------------------------------------------------------ attention
def attention(x, wq, wk, wv, wo, h, bq=None, bk=None, bv=None, bo=None):
    """Multi-head scaled dot-product self-attention (no residual).

    ``x`` is (L, e) or (B, L, e); ``wq/wk/wv`` are (e, h*dh) with head ``j``
    owning columns ``j*dh:(j+1)*dh``; ``wo`` is (h*dh, e).
    """
    if h < 1:
        raise DimensionError("attention: head count must be >= 1")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, L, e = x.shape
    inner = wq.shape[1]
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv)):
        if w.shape != (e, inner):
            raise DimensionError(f"attention: {name} has shape {w.shape}, expected {(e, inner)}")
    if inner % h or inner == 0:
        raise DimensionError(f"attention: width {inner} not divisible into {h} heads")
    if wo.shape != (inner, e):
        raise DimensionError(f"attention: wo has shape {wo.shape}, expected {(inner, e)}")
    dh = inner // h

    def split(t):
        return t.reshape(B, L, h, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scale = 1.0 / math.sqrt(dh)
    p = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(B, L, inner)
    out = linear(ctx, wo, bo)
    cache = (x, q, k, v, p, ctx, wq, wk, wv, wo, h, scale, squeeze)
    return (out[0] if squeeze else out), cache


def attention_backward(grad, cache):
    """Returns a dict with gradients for x, wq, wk, wv, wo and the four biases."""
    x, q, k, v, p, ctx, wq, wk, wv, wo, h, scale, squeeze = cache
    if squeeze:
        grad = grad[None]
    B, L, e = x.shape
    inner = wq.shape[1]
    dh = inner // h
    gctx, gwo, gbo = linear_backward(grad, ctx, wo)
    gctx = gctx.reshape(B, L, h, dh).transpose(0, 2, 1, 3)
    gp = gctx @ v.transpose(0, 1, 3, 2)
    gv = p.transpose(0, 1, 3, 2) @ gctx
    gs = softmax_backward(gp, p) * scale
    gq = gs @ k
    gk = gs.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, L, inner)

    gx = np.zeros_like(x)
    out = {"wo": gwo, "bo": gbo}
    for name, g, w in (("q", gq, wq), ("k", gk, wk), ("v", gv, wv)):
        gxi, gw, gb = linear_backward(merge(g), x, w)
        gx += gxi
        out["w" + name] = gw
        out["b" + name] = gb
    out["x"] = gx[0] if squeeze else gx
    return out


# -------------------------------------------------------------- cross entropy
def cross_entropy(logits: np.ndarray, labels):
    """Mean negative log-likelihood; returns ``(loss, dloss/dlogits)``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {B} rows")
    if B and (labels.min() < 0 or labels.max() >= C):
        raise InputError(f"cross_entropy: labels must lie in [0, {C})")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= B
    return float(loss), grad


# ---------------------------------------------------------------------- adamw
@njit
def _adamw_nb(p, g, m, v, n, mask, lr, b1, b2, eps, wd):
    rows, cols = p.shape
    for i in range(rows):
        for j in range(cols):
            if not mask[i, j]:
                continue
            pij = p[i, j] - lr * wd * p[i, j]
            mij = b1 * m[i, j] + (1.0 - b1) * g[i, j]
            vij = b2 * v[i, j] + (1.0 - b2) * g[i, j] * g[i, j]
            t = n[i, j] + 1.0
            mhat = mij / (1.0 - b1**t)
            vhat = vij / (1.0 - b2**t)
            p[i, j] = pij - lr * mhat / (np.sqrt(vhat) + eps)
            m[i, j] = mij
            v[i, j] = vij
            n[i, j] = t


def _adamw_np(p, g, m, v, n, mask, lr, b1, b2, eps, wd):
    pn = p - lr * wd * p
    mn = b1 * m + (1.0 - b1) * g
    vn = b2 * v + (1.0 - b2) * g * g
    t = n + 1.0
    mhat = mn / (1.0 - b1**t)
    vhat = vn / (1.0 - b2**t)
    pn = pn - lr * mhat / (np.sqrt(vhat) + eps)
    p[...] = np.where(mask, pn, p)
    m[...] = np.where(mask, mn, m)
    v[...] = np.where(mask, vn, v)
    n[...] = np.where(mask, t, n)


_adamw = pick(_adamw_nb, _adamw_np)


class AdamState:
    """First/second moments and per-entry step counts for one tensor.

    Step counts are kept per entry so that an entry that is only active for
    some steps receives the same bias correction it would get if it were
    optimised on its own.
    """

    __slots__ = ("m", "v", "steps")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.steps = np.zeros(shape)


def adamw_step(param, grad, state, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8,
               region=None, mask=None):
    """In-place AdamW (decoupled weight decay) update.

    ``region`` is a tuple of slices selecting the leading block that ``grad``
    covers (``None`` for the whole tensor). ``mask`` is an optional boolean
    array shaped like ``grad``; entries where it is False -- and everything
    outside ``region`` -- are left bit-unchanged, moments and step counts
    included. Update for an active entry with step count ``t`` (after
    increment)::

        p <- p - lr*wd*p
        m <- b1*m + (1-b1)*g ;  v <- b2*v + (1-b2)*g^2
        p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    if param.ndim not in (1, 2):
        raise DimensionError(f"adamw_step: only 1-D and 2-D tensors are supported, got {param.shape}")
    region = tuple(slice(0, s) for s in param.shape) if region is None else region
    p = param[region]
    m, v, n = state.m[region], state.v[region], state.steps[region]
    if not (p.shape == grad.shape == m.shape == v.shape == n.shape):
        raise DimensionError(f"adamw_step: param region {p.shape} vs grad {grad.shape}")
    if mask is None:
        mask = np.ones(grad.shape, dtype=np.bool_)
    elif mask.shape != grad.shape:
        raise DimensionError(f"adamw_step: mask {mask.shape} vs grad {grad.shape}")
    if grad.size == 0 or not mask.any():
        return
    if p.ndim == 1:
        p, m, v, n = (a.reshape(1, -1) for a in (p, m, v, n))
        grad, mask = grad.reshape(1, -1), mask.reshape(1, -1)
    b1, b2 = betas
    _adamw(p, np.ascontiguousarray(grad), m, v, n, np.ascontiguousarray(mask),
           float(lr), float(b1), float(b2), float(eps), float(weight_decay))
