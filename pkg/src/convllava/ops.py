"""Differentiable operations on :class:`~convllava.tensor.Tensor`.

Each op computes its forward result with numpy and registers the exact
vector-Jacobian product on the tape. Broadcasting is limited to scalars and
per-axis bias/scale vectors.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, as_tensor, is_deterministic, make_result, record_macs

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class EmptyLossWarning(RuntimeWarning):
    """Every position of a loss was masked out."""


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return make_result("add_scalar", a.data + b, [a], lambda g: (g,))
    _same_shape("add", a, b)
    return make_result("add", a.data + b.data, [a, b], lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return make_result("sub_scalar", a.data - b, [a], lambda g: (g,))
    _same_shape("sub", a, b)
    return make_result("sub", a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return make_result("mul_scalar", a.data * s, [a], lambda g: (g * s,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, [a, b], lambda g: (g * bd, g * ad))


def _axis_view(vec: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = vec.shape[0]
    return vec.reshape(shape)


def _check_axis_vector(op: str, x: Tensor, v: Tensor, axis: int) -> int:
    axis = axis % x.ndim
    if v.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ValueError(f"{op}: vector of shape {v.shape} does not match dim {axis} of size {x.shape[axis]}")
    return axis


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis_vector("add_bias", x, b, axis)
    others = tuple(i for i in range(x.ndim) if i != axis)
    return make_result(
        "add_bias", x.data + _axis_view(b.data, x.ndim, axis), [x, b],
        lambda g: (g, g.sum(axis=others)),
    )


def scale_axis(x: Tensor, s: Tensor, axis: int = -1) -> Tensor:
    """Multiply ``x`` by a vector along one axis (layer-scale)."""
    axis = _check_axis_vector("scale_axis", x, s, axis)
    others = tuple(i for i in range(x.ndim) if i != axis)
    sv = _axis_view(s.data, x.ndim, axis)
    xd = x.data
    return make_result(
        "scale_axis", xd * sv, [x, s],
        lambda g: (g * sv, (g * xd).sum(axis=others)),
    )


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result("gelu", xd * cdf, [x], backward)


# -- reductions and reshapes -----------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return make_result("sum", np.asarray(x.data.sum(), dtype=x.dtype), [x],
                       lambda g: (np.full(shape, g.reshape(()), dtype=g.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_result("mean", np.asarray(x.data.mean(), dtype=x.dtype), [x],
                       lambda g: (np.full(shape, g.reshape(()) / n, dtype=g.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result("reshape", x.data.reshape(shape), [x], lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.ascontiguousarray(x.data.transpose(axes)), [x],
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return out

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """``x[..., start:stop, ...]`` along one axis."""
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)

    return make_result("narrow", np.ascontiguousarray(x.data[idx]), [x], backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V, D) for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: ids outside [0, {vocab})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result("embedding", table.data[ids], [table], backward)


# -- dense algebra ---------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if weight.ndim != 2:
        raise ValueError(f"linear: weight must be 2-D, got {weight.shape}")
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"linear: input last dim {x.shape[-1]} != weight in-features {d_in}")
    if bias is not None and bias.shape != (d_out,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({d_out},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    record_macs("linear", (x.size // d_in) * d_in * d_out)

    def backward(g):
        gx = g @ wd
        gw = g.reshape(-1, d_out).T @ xd.reshape(-1, d_in)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, d_out).sum(axis=0))
        return grads

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return make_result("linear", out, inputs, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; batch dims must match."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_result(
        "matmul", ad @ bd, [a, b],
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def softmax(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis; ``causal`` masks entries above the diagonal."""
    xd = x.data
    if causal:
        t_q, t_k = xd.shape[-2:]
        mask = np.triu(np.ones((t_q, t_k), dtype=bool), k=1)
        xd = np.where(mask, -np.inf, xd)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", p, [x], backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize along ``axis`` to zero mean and unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    axis = axis % x.ndim
    c = x.shape[axis]
    for label, v in (("gamma", gamma), ("beta", beta)):
        if v.shape != (c,):
            raise ValueError(f"layer_norm: {label} shape {v.shape} does not match {c} channels on axis {axis}")
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = _axis_view(gamma.data, x.ndim, axis)
    bv = _axis_view(beta.data, x.ndim, axis)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dxhat = g * gv
        gx = rstd * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return make_result("layer_norm", xhat * gv + bv, [x, gamma, beta], backward)


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer norm across the channel axis of an NCHW tensor."""
    if x.ndim != 4:
        raise ValueError(f"layer_norm_channels: expected NCHW input, got shape {x.shape}")
    return layer_norm(x, gamma, beta, axis=1, eps=eps)


# -- convolution -----------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_direct(xg: np.ndarray, wg: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """Sliding-window sum, one kernel offset at a time.

    xg: (B, G, Cin/G, Hp, Wp); wg: (G, Cout/G, Cin/G, k, k).
    """
    b, g, cig = xg.shape[:3]
    cog, k = wg.shape[1], wg.shape[-1]
    depthwise = cig == 1 and cog == 1
    out = np.zeros((b, g, cog, ho * wo), dtype=np.result_type(xg, wg))
    for i in range(k):
        for j in range(k):
            xs = xg[:, :, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            xs = xs.reshape(b, g, cig, ho * wo)
            if depthwise:
                out += xs * wg[None, :, :, :, i, j]
            else:
                out += wg[:, :, :, i, j] @ xs
            record_macs("conv2d", b * g * cog * cig * ho * wo)
    return out.reshape(b, g * cog, ho, wo)


def _conv_im2col(xg: np.ndarray, wg: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    b, g, cig = xg.shape[:3]
    cog, k = wg.shape[1], wg.shape[-1]
    win = sliding_window_view(xg, (k, k), axis=(3, 4))[:, :, :, ::stride, ::stride][:, :, :, :ho, :wo]
    # (B, G, Cin/G, Ho, Wo, k, k) -> (B, G, Ho*Wo, Cin/G*k*k)
    cols = win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(b, g, ho * wo, cig * k * k)
    out = cols @ wg.reshape(g, cog, cig * k * k).transpose(0, 2, 1)
    return out.transpose(0, 1, 3, 2).reshape(b, g * cog, ho, wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1, impl: str = "direct") -> Tensor:
    """2-D cross-correlation with zero padding and grouped channels.

    ``impl="direct"`` accumulates one kernel offset at a time and feeds the
    MAC counter; ``impl="im2col"`` gathers patches and issues one matmul.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be (B, C, H, W), got {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be (Cout, Cin/groups, k, k), got {weight.shape}")
    if stride <= 0:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    bsz, cin, h, w = x.shape
    cout, cig, kh, kw = weight.shape
    if groups <= 0 or cin % groups:
        raise ValueError(f"conv2d: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ValueError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if cig != cin // groups:
        raise ValueError(f"conv2d: weight in-channels {cig} != input channels / groups = {cin // groups}")
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if h + 2 * padding < k:
        raise ValueError(f"conv2d: height {h} + 2*padding {padding} smaller than kernel {k}")
    if w + 2 * padding < k:
        raise ValueError(f"conv2d: width {w} + 2*padding {padding} smaller than kernel {k}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    g, cog = groups, cout // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]
    xg = xp.reshape(bsz, g, cig, hp, wp)
    wg = weight.data.reshape(g, cog, cig, k, k)
    if impl == "direct":
        out = _conv_direct(xg, wg, stride, ho, wo)
    elif impl == "im2col":
        out = _conv_im2col(xg, wg, stride, ho, wo)
    else:
        raise ValueError(f"conv2d: unknown impl {impl!r}")
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(gout):
        gg = gout.reshape(bsz, g, cog, ho * wo)
        gxp = np.zeros_like(xg)
        gw = np.zeros_like(wg)
        depthwise = cig == 1 and cog == 1
        for i in range(k):
            for j in range(k):
                hs = slice(i, i + stride * (ho - 1) + 1, stride)
                ws = slice(j, j + stride * (wo - 1) + 1, stride)
                xs = xg[:, :, :, hs, ws].reshape(bsz, g, cig, ho * wo)
                if depthwise:
                    gxp[:, :, :, hs, ws] += (gg * wg[None, :, :, :, i, j]).reshape(bsz, g, 1, ho, wo)
                    gw[:, :, :, i, j] = (gg * xs).sum(axis=(0, 3))[..., None]
                else:
                    gxp[:, :, :, hs, ws] += (np.swapaxes(wg[:, :, :, i, j], -1, -2) @ gg).reshape(bsz, g, cig, ho, wo)
                    gw[:, :, :, i, j] = (gg @ np.swapaxes(xs, -1, -2)).sum(axis=0)
        gx = gxp.reshape(bsz, cin, hp, wp)
        if padding:
            gx = gx[:, :, padding:hp - padding, padding:wp - padding]
        grads = [np.ascontiguousarray(gx), gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return grads

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return make_result("conv2d", out, inputs, backward, stride=stride, padding=padding, groups=groups)


# -- loss ------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over unmasked rows.

    ``logits`` is (T, V). Returns a zero scalar and emits
    :class:`EmptyLossWarning` when every row is masked.
    """
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be (T, V), got {logits.shape}")
    t_len, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != t_len:
        raise ValueError(f"softmax_cross_entropy: {targets.shape[0]} targets for {t_len} rows")
    mask = np.ones(t_len, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool).reshape(-1)
    if mask.shape[0] != t_len:
        raise ValueError(f"softmax_cross_entropy: mask length {mask.shape[0]} != {t_len}")
    live = targets[mask]
    if live.size and (live.min() < 0 or live.max() >= vocab):
        bad = int(live[(live < 0) | (live >= vocab)][0])
        raise IndexError(f"softmax_cross_entropy: target {bad} outside [0, {vocab})")
    count = int(mask.sum())
    if count == 0:
        warnings.warn("softmax_cross_entropy: all positions masked, loss defined as 0", EmptyLossWarning, stacklevel=2)
        return make_result("softmax_cross_entropy", np.zeros((), dtype=logits.dtype), [logits],
                           lambda g: (np.zeros_like(logits.data),))

    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.flatnonzero(mask)
    per_row = lse[rows] - shifted[rows, targets[rows]]
    total = math.fsum(per_row.tolist()) if is_deterministic() else float(per_row.sum())
    value = np.asarray(total / count, dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, targets[rows]] -= 1.0
        p[~mask] = 0.0
        return (p * (g.reshape(()) / count),)

    return make_result("softmax_cross_entropy", value, [logits], backward)
