"""Neural-network operators on :class:`Tensor`.

Spatial operators take ``C x H x W`` or batched ``N x C x H x W`` inputs;
batched evaluation is per-sample independent.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, TensorError, _wrap


def _as_batch(x: Tensor, name: str = "input") -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise TensorError(f"{name} must be C x H x W or N x C x H x W, got {x.shape}")


def _unbatch(y: Tensor, squeezed: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeezed else y


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int):
    if weight.ndim != 4:
        raise TensorError(f"weight must be C_out x C_in x k x k, got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise TensorError(f"kernel must be square with odd side, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise TensorError(f"input has {x.shape[1]} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise TensorError(f"bias shape {bias.shape} does not match C_out={c_out}")
    if stride < 1 or padding < 0:
        raise TensorError(f"invalid stride={stride} / padding={padding}")
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kh, stride, padding)
    if ho < 1 or wo < 1:
        raise TensorError(f"non-positive output size {ho}x{wo}")
    return ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, ho: int, wo: int):
    n, c, _, _ = x.shape
    k = w.shape[2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (n, ho, wo); cols: (c, ki, kj)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out, cols, x.shape


def _col2im(dcols: np.ndarray, padded_shape, k: int, stride: int, padding: int, ho: int, wo: int):
    n, c, hp, wp = padded_shape
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:hp - padding, padding:wp - padding]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    xb, squeezed = _as_batch(x)
    ho, wo = _check_conv(xb, weight, bias, stride, padding)
    n = xb.shape[0]
    c_out, _, k, _ = weight.shape
    out, cols, padded_shape = _conv_forward(xb.data, weight.data, stride, padding, ho, wo)
    if bias is not None:
        out = out + bias.data
    y = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    wmat = weight.data.reshape(c_out, -1)

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gm.T @ cols).reshape(weight.shape)
        gx = _col2im(gm @ wmat, padded_shape, k, stride, padding, ho, wo) if xb.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (xb, weight) + ((bias,) if bias is not None else (_wrap(0.0),))
    return _unbatch(Tensor.from_op(np.ascontiguousarray(y), parents, _bw, "conv2d"), squeezed)


def _cdc_kernel(weight: Tensor, theta: float) -> Tensor:
    """Fold the central-difference term into the kernel centre.

    sum_n w(n) x(p0+n) - theta * x(p0) * sum_n w(n) is a plain correlation
    with the centre tap reduced by theta * sum_n w(n).
    """
    k = weight.shape[2]
    c = k // 2
    wsum = weight.data.sum(axis=(2, 3))
    eff = weight.data.copy()
    eff[:, :, c, c] -= theta * wsum

    def _bw(g):
        gw = g.copy()
        gw -= theta * g[:, :, c, c][:, :, None, None]
        return (gw,)

    return Tensor.from_op(eff, (weight,), _bw, "cdc_kernel")


def cdc_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
               padding: int = 0, theta: float = 0.7) -> Tensor:
    """Central difference convolution.

    y(p0) = sum_n w(n) x(p0 + n) - theta * x(p0) * sum_n w(n) + b
    """
    if not 0.0 <= theta <= 1.0:
        raise TensorError(f"theta must lie in [0, 1], got {theta}")
    if theta == 0.0:
        return conv2d(x, weight, bias, stride, padding)
    return conv2d(x, _cdc_kernel(weight, theta), bias, stride, padding)


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Average pooling with ``kernel == stride``."""
    stride = kernel if stride is None else stride
    if kernel != stride:
        raise TensorError("avgpool2d supports kernel == stride only")
    if kernel < 1:
        raise TensorError(f"kernel must be positive, got {kernel}")
    xb, squeezed = _as_batch(x)
    n, c, h, w = xb.shape
    if h % kernel or w % kernel:
        raise TensorError(f"spatial size {h}x{w} not divisible by {kernel}")
    if kernel == 1:
        return x
    ho, wo = h // kernel, w // kernel
    out = xb.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))
    scale = 1.0 / (kernel * kernel)

    def _bw(g):
        gx = np.repeat(np.repeat(g * scale, kernel, axis=2), kernel, axis=3)
        return (gx,)

    return _unbatch(Tensor.from_op(out, (xb,), _bw, "avgpool2d"), squeezed)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ weight.T + bias``; x is ``D`` or ``N x D``."""
    if weight.ndim != 2:
        raise TensorError(f"weight must be M x D, got {weight.shape}")
    squeezed = x.ndim == 1
    xb = x.reshape((1, x.shape[0])) if squeezed else x
    if xb.ndim != 2 or xb.shape[1] != weight.shape[1]:
        raise TensorError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise TensorError(f"bias shape {bias.shape} does not match M={weight.shape[0]}")
    out = xb.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        return g @ weight.data, g.T @ xb.data, (g.sum(axis=0) if bias is not None else None)

    parents = (xb, weight) + ((bias,) if bias is not None else (_wrap(0.0),))
    y = Tensor.from_op(out, parents, _bw, "linear")
    return y.reshape((weight.shape[0],)) if squeezed else y


def flatten(x: Tensor, batched: bool = False) -> Tensor:
    """Flatten to a vector, or to ``N x D`` when ``batched``."""
    if batched:
        return x.reshape((x.shape[0], -1))
    return x.reshape((x.size,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise TensorError("concat needs at least one tensor")
    arrays = [p.data for p in parts]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise TensorError(f"concat shape mismatch: {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tuple(parts), _bw, "concat")
