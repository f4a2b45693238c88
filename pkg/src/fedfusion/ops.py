"""Core numeric operations with hand-written forward and backward passes.

All activations use 64-bit floats and the NHWC layout: a batch of images is
an array of shape [N, H, W, C]; dense features are [N, F] (or [..., F] for
token grids). Every ``*_backward`` returns gradients that match central
finite differences of a scalar loss.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericsError, ShapeError

BN_EPS = 1e-5
LN_EPS = 1e-5


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# convolution


def conv2d_output_size(size: int, k: int, pad: int, stride: int) -> int:
    return (size - k + 2 * pad) // stride + 1


def _conv_pad(padding: str, k: int) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"padding='same' requires an odd kernel, got {k}")
        return (k - 1) // 2
    raise ShapeError(f"unknown padding mode {padding!r}")


def _im2col(x, kh, kw, stride, pad):
    # x: [N, H, W, C] -> cols [N, H', W', kh, kw, C]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    view = sliding_window_view(x, (kh, kw), axis=(1, 2))  # [N,Ho,Wo,C,kh,kw]
    view = view[:, ::stride, ::stride]
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3))


def conv2d_forward(x, kernel, bias, stride=1, padding="same", *, with_cache=False):
    """Cross-correlate x [N,H,W,Cin] (or [H,W,Cin]) with kernel [kh,kw,Cin,Cout]."""
    x = _as_f64(x)
    orig_shape = x.shape
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {orig_shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(
            f"input channels {x.shape[3]} do not match kernel input channels {cin} "
            f"(input {orig_shape}, kernel {kernel.shape})"
        )
    pad = _conv_pad(padding, kh)
    if padding == "valid" and (x.shape[1] < kh or x.shape[2] < kw):
        raise ShapeError(f"input {x.shape} smaller than kernel {kernel.shape} with valid padding")
    cols = _im2col(x, kh, kw, stride, pad)
    n, ho, wo = cols.shape[:3]
    out = cols.reshape(n * ho * wo, kh * kw * cin) @ kernel.reshape(kh * kw * cin, cout)
    out = out.reshape(n, ho, wo, cout) + bias
    if squeeze:
        out = out[0]
    if with_cache:
        return out, (cols, x.shape, stride, pad, squeeze)
    return out


def conv2d_backward(grad_out, kernel, cache):
    """Gradients of conv2d_forward; cache comes from with_cache=True."""
    if cache is None:
        raise ShapeError("conv2d_backward called without a forward cache")
    cols, x_shape, stride, pad, squeeze = cache
    g = _as_f64(grad_out)
    if squeeze:
        g = g[None]
    kh, kw, cin, cout = kernel.shape
    n, ho, wo = cols.shape[:3]
    if g.shape != (n, ho, wo, cout):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {(n, ho, wo, cout)}")
    g2 = g.reshape(n * ho * wo, cout)
    grad_kernel = (cols.reshape(n * ho * wo, kh * kw * cin).T @ g2).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    dcols = (g2 @ kernel.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
    hp, wp = x_shape[1] + 2 * pad, x_shape[2] + 2 * pad
    dxp = np.zeros((n, hp, wp, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad : hp - pad, pad : wp - pad, :] if pad else dxp
    if squeeze:
        dx = dx[0]
    return dx, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# dense / affine on the trailing axis


def dense_forward(x, weights, bias):
    x = _as_f64(x)
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense input features {x.shape[-1]} do not match weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias {bias.shape} does not match weights {weights.shape}")
    return x @ weights + bias


def dense_backward(grad_out, x, weights):
    g = _as_f64(grad_out)
    if g.shape[:-1] != x.shape[:-1] or g.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense grad shape {g.shape} does not match input {x.shape} / weights {weights.shape}")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    grad_x = (g2 @ weights.T).reshape(x.shape)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# normalization


def batch_norm_forward(x, gamma, beta, mode, running_mean=None, running_var=None, momentum=0.9):
    """Normalize over all axes except the last (feature/channel) axis.

    Train mode computes batch statistics and returns updated running
    estimates; infer mode uses the supplied running statistics.
    """
    x = _as_f64(x)
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm features {x.shape[-1]} do not match gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batch_norm train mode needs a batch of at least 2 samples")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv
        out = gamma * xhat + beta
        new_mean = new_var = None
        if running_mean is not None:
            new_mean = momentum * running_mean + (1 - momentum) * mean
            new_var = momentum * running_var + (1 - momentum) * var
        cache = (xhat, inv, gamma, axes, int(np.prod([x.shape[a] for a in axes])))
        return out, cache, new_mean, new_var
    if mode == "infer":
        inv = 1.0 / np.sqrt(running_var + BN_EPS)
        xhat = (x - running_mean) * inv
        return gamma * xhat + beta, None, None, None
    raise ShapeError(f"unknown batch_norm mode {mode!r}")


def batch_norm_backward(grad_out, cache):
    xhat, inv, gamma, axes, m = cache
    g = _as_f64(grad_out)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * gamma
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def layer_norm_forward(x, gamma, beta):
    """Normalize each vector along the last axis independently."""
    x = _as_f64(x)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(grad_out, cache):
    xhat, inv, gamma = cache
    g = _as_f64(grad_out)
    lead = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=lead)
    dbeta = g.sum(axis=lead)
    d = g * gamma
    m = g.shape[-1]
    dx = (inv / m) * (m * d - d.sum(-1, keepdims=True) - xhat * (d * xhat).sum(-1, keepdims=True))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations, pooling, dropout


def relu(x):
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0.0)


def max_pool2d(x, size=2):
    x = _as_f64(x)
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    r = x.reshape(n, h // size, size, w // size, size, c)
    out = r.max(axis=(2, 4))
    return out, (x, out, size)


def max_pool2d_backward(grad_out, cache):
    x, out, size = cache
    n, h, w, c = x.shape
    up = np.repeat(np.repeat(out, size, axis=1), size, axis=2)
    mask = (x == up)
    counts = mask.reshape(n, h // size, size, w // size, size, c).sum(axis=(2, 4))
    gup = np.repeat(np.repeat(grad_out / counts, size, axis=1), size, axis=2)
    return np.where(mask, gup, 0.0)


def global_avg_pool(x):
    x = _as_f64(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    out = x.mean(axis=(1, 2))
    return out[0] if squeeze else out


def global_avg_pool_backward(grad_out, input_shape):
    if len(input_shape) == 3:
        h, w, c = input_shape
        return np.broadcast_to(grad_out / (h * w), (h, w, c)).copy()
    n, h, w, c = input_shape
    return np.broadcast_to(grad_out[:, None, None, :] / (h * w), input_shape).copy()


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: identity in infer mode, survivors scaled by 1/(1-rate)."""
    x = _as_f64(x)
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if mode != "train":
        raise ShapeError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ShapeError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def softmax(logits):
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    z = _as_f64(logits)
    if not np.isfinite(z).all():
        raise NumericsError("softmax input contains non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of integer labels under probability rows."""
    p = _as_f64(probs)
    labels = np.atleast_1d(labels)
    if p.ndim == 1:
        p = p[None]
    rows = np.arange(p.shape[0])
    return float(-np.log(np.clip(p[rows, labels], 1e-300, None)).mean())


def softmax_cross_entropy(logits, labels):
    """Returns (mean loss, gradient w.r.t. logits)."""
    z = _as_f64(logits)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    labels = np.atleast_1d(labels)
    probs = softmax(z)
    loss = cross_entropy(probs, labels)
    grad = probs.copy()
    grad[np.arange(z.shape[0]), labels] -= 1.0
    grad /= z.shape[0]
    if squeeze:
        grad = grad[0]
    return loss, grad


# ---------------------------------------------------------------------------
# initialization


def he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)
