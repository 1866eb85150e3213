"""Differentiable primitives for the U-Nets, with hand-written backward passes.

Tensors are plain numpy arrays shaped ``(n, c, h, w)``. Every forward
function is paired with a ``*_backward`` function that takes the upstream
gradient plus whatever the forward pass returned and produces gradients
for the inputs (and parameters). Nothing here keeps hidden state; the
caller owns all caches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerError, ShapeError

ELU_ALPHA = 1.0
LOSS_EPS = 1e-7


def _check4(x, name="x"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


# -- convolution ------------------------------------------------------------

def _im2col(x, k):
    """``(n, c*k*k, h*w)`` column tensor for a same-padded k x k convolution."""
    n, c, h, w = x.shape
    p = k // 2
    if p == 0:
        return x.reshape(n, c, h * w)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * k * k, h * w)


def conv2d(x, kernel, bias, return_cols=False):
    """Stride-1 convolution with zero "same" padding.

    ``kernel`` is ``(c_out, c_in, k, k)`` with odd ``k`` (3 for all hidden
    layers, 1 for the output head). Output spatial dims equal input dims.
    With ``return_cols=True`` the im2col tensor is returned as well so the
    backward pass can reuse it.
    """
    _check4(x)
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kernel.shape}")
    if x.shape[1] != c_in:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    n, _, h, w = x.shape
    cols = _im2col(x, kh)
    y = np.matmul(kernel.reshape(c_out, -1), cols)
    y += bias[:, None]
    y = y.reshape(n, c_out, h, w)
    if return_cols:
        return y, cols
    return y


def conv2d_backward(dy, x, kernel, cols=None):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias.

    The input gradient is the same-padded convolution of ``dy`` with the
    spatially flipped, channel-transposed kernel.
    """
    c_out, c_in, k, _ = kernel.shape
    n, _, h, w = x.shape
    if cols is None:
        cols = _im2col(x, k)
    dy3 = dy.reshape(n, c_out, h * w)
    dkernel = np.matmul(dy3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    dbias = dy3.sum(axis=(0, 2))
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = conv2d(dy, flipped, np.zeros(c_in, dtype=dy.dtype))
    return dx, dkernel, dbias


# -- activations ------------------------------------------------------------

def elu(x):
    return np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0)))


def elu_backward(dy, x, y):
    """``y`` is the forward output; f'(x) = 1 for x > 0 else f(x) + alpha."""
    return dy * np.where(x > 0, 1.0, y + ELU_ALPHA).astype(dy.dtype, copy=False)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


# -- resolution changes -----------------------------------------------------

def max_pool2(x):
    """2x2 max pooling, stride 2.

    Returns ``(y, argmax)`` where ``argmax`` holds, per output cell, the
    index 0..3 of the winning input in row-major window order. Ties go to
    the first index.
    """
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {(h, w)}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def max_pool2_backward(dy, arg):
    n, c, h2, w2 = dy.shape
    dwin = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dx = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h2 * 2, w2 * 2)


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    _check4(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(a, b):
    _check4(a, "a")
    _check4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {a.shape} and {b.shape}: n/h/w differ")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(dy, a_channels):
    return dy[:, :a_channels], dy[:, a_channels:]


# -- losses -----------------------------------------------------------------

def _loss_inputs(p, y):
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    return np.clip(p, LOSS_EPS, 1.0 - LOSS_EPS)


def weighted_bce_loss(p, y, w_pos):
    """Class-weighted binary cross entropy.

    ``-mean(w_pos * y * log p + (1 - y) * log(1 - p))`` with ``p`` clamped
    to ``[eps, 1 - eps]``. Returns ``(loss, dloss/dp)``; the gradient is
    zero where the clamp is active.
    """
    if not np.isfinite(w_pos) or w_pos < 0:
        raise ValueError(f"w_pos must be finite and >= 0, got {w_pos}")
    pc = _loss_inputs(p, y)
    n = p.size
    terms = w_pos * y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)
    loss = -float(terms.sum(dtype=np.float64)) / n
    grad = -(w_pos * y / pc - (1.0 - y) / (1.0 - pc)) / n
    inside = (p >= LOSS_EPS) & (p <= 1.0 - LOSS_EPS)
    grad = np.where(inside, grad, 0.0).astype(p.dtype, copy=False)
    return loss, grad


def bce_loss(p, y):
    """Plain binary cross entropy; identical to ``weighted_bce_loss(p, y, 1.0)``."""
    return weighted_bce_loss(p, y, 1.0)


def positive_weight(n_neg, n_pos, floor=1.0, cap=100.0):
    """Default ``w_pos``: negative/positive pixel ratio clipped to [floor, cap]."""
    if n_pos <= 0:
        return float(cap)
    return float(min(max(n_neg / n_pos, floor), cap))


# -- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update, applied in place to ``params`` (a name -> array dict).

    Returns ``(params, state)`` for convenience. A non-finite gradient
    aborts before anything is modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        theta = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        theta -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype, copy=False)
    return params, state
