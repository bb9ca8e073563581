"""Differentiable operations on :class:`Tensor`.

Every function here returns a new tensor and, when a tape is active, records
its backward rule. Broadcasting is limited to tensor-scalar arithmetic; the
per-channel affine terms of convolution bias and group norm are folded into
those ops.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result

Scalar = Union[int, float]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("add", a, b)
        return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))
    s = float(b)
    return make_result("add", a.data + a.dtype.type(s), (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("sub", a, b)
        return make_result("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    return add(a, -float(b))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("mul", a, b)
        ad, bd = a.data, b.data
        return make_result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))
    s = a.dtype.type(float(b))
    return make_result("mul", a.data * s, (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    y = half * (np.tanh(x.data * half) + 1)
    return make_result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; the backward pass scatters into zeros."""
    out = np.array(x.data[index])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_result("take", out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, tensors, back)


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return make_result(
        "mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),)
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW tensor, giving NC."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),)

    return make_result("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), back)


def set_mean(rows: Tensor) -> Tensor:
    """Mean over axis 0 that is bit-invariant to row order and duplication.

    Identical rows are grouped and the unique rows are summed in a canonical
    (byte-lexicographic) order, weighted by multiplicity. Doubling every row
    doubles every term exactly, so the result is unchanged bit for bit.
    """
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError(f"set_mean expects a non-empty 2-D tensor, got shape {rows.shape}")
    data = np.ascontiguousarray(rows.data)
    groups: dict[bytes, list[int]] = {}
    for i, row in enumerate(data):
        groups.setdefault(row.tobytes(), []).append(i)
    acc = np.zeros(data.shape[1], dtype=data.dtype)
    for key in sorted(groups):
        idx = groups[key]
        acc = acc + data[idx[0]] * data.dtype.type(len(idx))
    n = data.shape[0]
    out = acc / data.dtype.type(n)

    def back(g):
        return (np.broadcast_to(g / n, data.shape).astype(data.dtype),)

    return make_result("set_mean", out, (rows,), back)


# ---------------------------------------------------------------- convolution


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> rows (N*Ho*Wo, C*kh*kw) of receptive fields."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def _scatter_windows(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: accumulate window rows back into an (N,C,Hp,Wp) array."""
    n, c = shape[0], shape[1]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + span_h : stride, j : j + span_w : stride] += cols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input with an (O, I, Kh, Kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {i} (kernel shape {kernel.shape})")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    rows, ho, wo = _windows(xp, kh, kw, stride)
    wmat = kernel.data.reshape(o, -1)
    out = rows @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gk = gb = None
        if x.requires_grad:
            gxp = _scatter_windows(g_rows @ wmat, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if kernel.requires_grad:
            gk = (g_rows.T @ rows).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g_rows.sum(axis=0)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_result("conv2d", out, inputs, back)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Transposed convolution (no padding) with an (I, O, Kh, Kw) kernel.

    This is the adjoint of ``conv2d(., kernel, stride=stride, pad=0)`` acting
    from O channels to I channels, so output size is ``(H-1)*stride + Kh``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv_transpose2d needs stride >= 1, got {stride}")
    n, c, h, w = x.shape
    i, o, kh, kw = kernel.shape
    if c != i:
        raise ValueError(f"conv_transpose2d: input has {c} channels but kernel expects {i} (kernel shape {kernel.shape})")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} does not match {o} output channels")
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    x_rows = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = kernel.data.reshape(i, -1)
    out = _scatter_windows(x_rows @ wmat, (n, o, ho, wo), kh, kw, stride, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        g_rows, _, _ = _windows(g, kh, kw, stride)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((g_rows @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            gk = (x_rows.T @ g_rows).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_result("conv_transpose2d", out, inputs, back)


# ---------------------------------------------------------------- normalisation


def group_norm(x: Tensor, groups: int, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Group normalisation over (C/groups, H, W) per sample, with optional per-channel affine."""
    if x.ndim != 4:
        raise ValueError(f"group_norm expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    for p, label in ((gamma, "gamma"), (beta, "beta")):
        if p is not None and p.shape != (c,):
            raise ValueError(f"group_norm: {label} shape {p.shape} does not match {c} channels")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    out = xhat
    if gamma is not None:
        out = out * gamma.data[None, :, None, None]
    if beta is not None:
        out = out + beta.data[None, :, None, None]
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def back(g):
        grads = []
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None] if gamma is not None else g
            dxg = dxhat.reshape(n, groups, -1)
            xhg = xhat.reshape(n, groups, -1)
            dx = inv_std * (dxg - dxg.mean(axis=2, keepdims=True) - xhg * (dxg * xhg).mean(axis=2, keepdims=True))
            grads.append(dx.reshape(x.shape))
        else:
            grads.append(None)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if beta.requires_grad else None)
        return tuple(grads)

    return make_result("group_norm", out, inputs, back)


# ---------------------------------------------------------------- losses


def l1_loss(pred: Tensor, target, weight: Optional[np.ndarray] = None) -> Tensor:
    """Mean absolute error.

    Without ``weight`` this is ``mean(|pred - target|)``. With a non-negative
    ``weight`` array of the same shape it is ``sum(w*|d|) / sum(w)`` (zero when
    all weights vanish), which gives masked regression.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    sign = np.sign(diff)
    if weight is None:
        n = diff.size
        value = np.abs(diff).mean()
        coef = sign / n
    else:
        weight = np.asarray(weight, dtype=pred.dtype)
        if weight.shape != pred.shape:
            raise ValueError(f"l1_loss: weight shape {weight.shape} vs {pred.shape}")
        norm = weight.sum()
        if norm <= 0:
            value = np.zeros((), dtype=pred.dtype)
            coef = np.zeros_like(diff)
        else:
            value = (weight * np.abs(diff)).sum() / norm
            coef = sign * weight / norm
    coef = coef.astype(pred.dtype)
    if isinstance(target, Tensor):
        return make_result("l1_loss", np.array(value, dtype=pred.dtype), (pred, target),
                           lambda g: (g * coef, -g * coef))
    return make_result("l1_loss", np.array(value, dtype=pred.dtype), (pred,), lambda g: (g * coef,))
