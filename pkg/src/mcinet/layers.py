"""Layer forward/backward kernels.

Every forward function returns ``(output, cache)`` and its backward partner
consumes that cache, so nothing is recomputed on the way back. Backward
functions return a :class:`GradBundle`; ``need_input`` / ``need_params`` let
the graph executor skip work nobody will read.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (DTYPE, ShapeError, _windows, col2im_batch, conv_out_extent,
                     im2col_batch)

LRN_K = 2.0
LRN_N = 5
LRN_ALPHA = 1e-4
LRN_BETA = 0.75
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.weights.copy(), self.bias.copy(),
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy())


@dataclass
class GradBundle:
    d_input: Optional[np.ndarray] = None
    d_weights: Optional[np.ndarray] = None
    d_bias: Optional[np.ndarray] = None


def _check_cache_shape(expected, got, what="d_out"):
    if tuple(expected) != tuple(got):
        raise ShapeError(f"{what} shape {tuple(got)} does not match forward output {tuple(expected)}")


# -- convolution ---------------------------------------------------------

def conv2d(x, p: LayerParams, stride: int = 1, pad: int = 0):
    """Cross-correlation of N x Cin x H x W input with Cout x Cin x kh x kw filters."""
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = p.weights.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weights expect {wcin}")
    if p.bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {p.bias.shape}, expected ({cout},)")
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(w, kw, stride, pad)
    cols = im2col_batch(x, kh, kw, stride, pad)
    wmat = p.weights.reshape(cout, -1)
    y = wmat @ cols
    y += p.bias[:, None]
    y = y.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    cache = (x.shape, cols, p.weights, stride, pad, (n, cout, ho, wo))
    return np.ascontiguousarray(y), cache


def conv2d_backward(cache, d_out, need_input=True, need_params=True) -> GradBundle:
    x_shape, cols, weights, stride, pad, y_shape = cache
    _check_cache_shape(y_shape, d_out.shape)
    cout, _, kh, kw = weights.shape
    dy = d_out.transpose(1, 0, 2, 3).reshape(cout, -1)
    g = GradBundle()
    if need_params:
        g.d_weights = (dy @ cols.T).reshape(weights.shape)
        g.d_bias = dy.sum(axis=1)
    if need_input:
        dcols = weights.reshape(cout, -1).T @ dy
        g.d_input = col2im_batch(dcols, x_shape, kh, kw, stride, pad)
    return g


# -- pooling -------------------------------------------------------------

def maxpool(x, kernel: int, stride: int, pad: int = 0):
    """Max over kernel x kernel windows. Padding positions never win.

    The cache records the flat (row-major) winning offset inside each window;
    ties go to the first occurrence.
    """
    n, c, h, w = x.shape
    ho = conv_out_extent(h, kernel, stride, pad)
    wo = conv_out_extent(w, kernel, stride, pad)
    win = _windows(x, kernel, kernel, stride, pad, fill=-np.inf)[:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), (x.shape, idx, kernel, stride, pad)


def maxpool_backward(cache, d_out) -> np.ndarray:
    x_shape, idx, k, stride, pad = cache
    _check_cache_shape(idx.shape, d_out.shape)
    n, c, h, w = x_shape
    ho, wo = idx.shape[2:]
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for ky in range(k):
        ys = slice(ky, ky + stride * (ho - 1) + 1, stride)
        for kx in range(k):
            xs = slice(kx, kx + stride * (wo - 1) + 1, stride)
            dx[:, :, ys, xs] += np.where(idx == ky * k + kx, d_out, 0.0)
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx)


def global_avg_pool(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(x_shape, d_out):
    n, c, h, w = x_shape
    _check_cache_shape((n, c), d_out.shape)
    return np.broadcast_to(d_out[:, :, None, None] / (h * w), x_shape).copy()


# -- pointwise -----------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, d_out):
    return np.where(x > 0, d_out, 0.0)


def dropout(x, p: float = 0.5, train: bool = False, seed=0):
    """Inverted dropout. Returns ``(y, mask)``; the mask is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(mask, d_out):
    return d_out if mask is None else d_out * mask


# -- fully connected -----------------------------------------------------

def fully_connected(x, p: LayerParams):
    """``y = x W^T + b``; inputs with more than two axes are flattened per sample."""
    x2 = x.reshape(x.shape[0], -1)
    dout, din = p.weights.shape
    if x2.shape[1] != din:
        raise ShapeError(f"fully_connected expects {din} input features, got {x2.shape[1]}")
    y = x2 @ p.weights.T + p.bias
    return y, (x.shape, x2, p.weights)


def fully_connected_backward(cache, d_out, need_input=True, need_params=True) -> GradBundle:
    x_shape, x2, weights = cache
    _check_cache_shape((x2.shape[0], weights.shape[0]), d_out.shape)
    g = GradBundle()
    if need_params:
        g.d_weights = d_out.T @ x2
        g.d_bias = d_out.sum(axis=0)
    if need_input:
        g.d_input = (d_out @ weights).reshape(x_shape)
    return g


# -- normalization -------------------------------------------------------

def _channel_window_sum(a, n):
    # sum over channels c' with |c' - c| <= n // 2, clipped at the edges
    half = n // 2
    c = a.shape[1]
    csum = np.cumsum(a, axis=1)
    csum = np.concatenate([np.zeros_like(a[:, :1]), csum], axis=1)
    hi = np.minimum(np.arange(c) + half + 1, c)
    lo = np.maximum(np.arange(c) - half, 0)
    return csum[:, hi] - csum[:, lo]


def local_response_norm(x, k=LRN_K, n=LRN_N, alpha=LRN_ALPHA, beta=LRN_BETA):
    """Cross-channel LRN: ``y_c = x_c / (k + alpha * sum_{window} x^2)^beta``."""
    s = k + alpha * _channel_window_sum(x * x, n)
    y = x * s ** -beta
    return y, (x, s, k, n, alpha, beta)


def local_response_norm_backward(cache, d_out):
    x, s, k, n, alpha, beta = cache
    _check_cache_shape(x.shape, d_out.shape)
    inner = _channel_window_sum(d_out * x * s ** (-beta - 1.0), n)
    return d_out * s ** -beta - 2.0 * alpha * beta * x * inner


def batch_norm(x, p: LayerParams, train: bool, eps=BN_EPS, momentum=BN_MOMENTUM,
               update_stats=True):
    """Per-channel normalization over batch and spatial axes.

    ``p.weights`` is the scale and ``p.bias`` the shift (both length C). Train
    mode uses batch statistics and updates ``p.running_mean/var`` in place.
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            m = x.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            p.running_mean *= 1.0 - momentum
            p.running_mean += momentum * mean
            p.running_var *= 1.0 - momentum
            p.running_var += momentum * unbiased
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = xhat * p.weights.reshape(shape) + p.bias.reshape(shape)
    return y, (xhat, inv_std, p.weights, train, axes, shape)


def batch_norm_backward(cache, d_out, need_input=True, need_params=True) -> GradBundle:
    xhat, inv_std, gamma, train, axes, shape = cache
    _check_cache_shape(xhat.shape, d_out.shape)
    g = GradBundle()
    if need_params:
        g.d_weights = (d_out * xhat).sum(axis=axes)
        g.d_bias = d_out.sum(axis=axes)
    if need_input:
        dxhat = d_out * gamma.reshape(shape)
        if train:
            m = xhat.size // xhat.shape[1]
            mean_dxhat = dxhat.sum(axis=axes, keepdims=True) / m
            mean_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True) / m
            g.d_input = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std.reshape(shape)
        else:
            g.d_input = dxhat * inv_std.reshape(shape)
    return g


# -- structural ----------------------------------------------------------

def concat_channels(xs):
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {x.shape} does not match {xs[0].shape} on N/H/W")
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def concat_channels_backward(sizes, d_out):
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(part) for part in np.split(d_out, bounds, axis=1)]


def residual_add(x, shortcut):
    if x.shape != shortcut.shape:
        raise ShapeError(f"residual_add shapes differ: {x.shape} vs {shortcut.shape}")
    return x + shortcut


def residual_add_backward(d_out):
    return d_out, d_out


# -- loss ----------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of row-wise softmax. Returns ``(loss, probs)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n},)")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    return loss, np.exp(z - log_norm[:, None])


def softmax_cross_entropy_backward(probs, labels):
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), np.asarray(labels, dtype=np.int64)] -= 1.0
    return d / n
