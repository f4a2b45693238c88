"""Shifted-window attention machinery: patch embedding, window partition and
reverse, cyclic shift, and multi-head attention within windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .layers import Dense, Layer, LayerNorm, ReLU


@dataclass(frozen=True)
class SwinConfig:
    patch_size: tuple = (2, 2)
    num_heads: int = 4
    window_size: int = 4
    shift_size: int = 1
    embed_dim: int = 32
    depth: int = 1  # number of (shift 0, shift s) block pairs
    mlp_ratio: int = 2

    def validate(self, image_h, image_w):
        ph, pw = self.patch_size
        if image_h % ph or image_w % pw:
            raise ConfigError(f"image {image_h}x{image_w} not divisible by patch {self.patch_size}")
        ht, wt = image_h // ph, image_w // pw
        if ht % self.window_size or wt % self.window_size:
            raise ConfigError(f"token grid {ht}x{wt} not divisible by window {self.window_size}")
        if not 0 <= self.shift_size < self.window_size:
            raise ConfigError(f"shift {self.shift_size} must be in [0, window {self.window_size})")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}")
        return ht, wt


# ---------------------------------------------------------------------------
# token-grid operations (functional)


def patch_embed(image, patch, proj_weights, proj_bias):
    """Split [H,W,C] into non-overlapping patches and project each flattened
    patch to an embedding vector; returns [num_patches, embed_dim]."""
    image = np.asarray(image, dtype=np.float64)
    ph, pw = patch
    h, w, c = image.shape
    if h % ph or w % pw:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    patches = image.reshape(h // ph, ph, w // pw, pw, c).transpose(0, 2, 1, 3, 4)
    flat = patches.reshape((h // ph) * (w // pw), ph * pw * c)
    return ops.dense_forward(flat, proj_weights, proj_bias)


def window_partition(tokens, window_size):
    """[Ht,Wt,D] (or [N,Ht,Wt,D]) -> [num_windows, M*M, D] (or batched)."""
    t = np.asarray(tokens)
    squeeze = t.ndim == 3
    if squeeze:
        t = t[None]
    n, ht, wt, d = t.shape
    m = window_size
    if ht % m or wt % m:
        raise ShapeError(f"token grid {ht}x{wt} not divisible by window {m}")
    win = t.reshape(n, ht // m, m, wt // m, m, d).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(n, (ht // m) * (wt // m), m * m, d)
    return win[0] if squeeze else win


def window_reverse(windows, window_size, ht, wt):
    """Exact inverse of window_partition for the given grid size."""
    w = np.asarray(windows)
    squeeze = w.ndim == 3
    if squeeze:
        w = w[None]
    n, nw, t, d = w.shape
    m = window_size
    if t != m * m or nw != (ht // m) * (wt // m):
        raise ShapeError(f"window block {w.shape} does not match grid {ht}x{wt}, window {m}")
    g = w.reshape(n, ht // m, wt // m, m, m, d).transpose(0, 1, 3, 2, 4, 5)
    g = g.reshape(n, ht, wt, d)
    return g[0] if squeeze else g


def cyclic_shift(tokens, shift):
    """Toroidal roll of the token grid by (-shift, -shift)."""
    t = np.asarray(tokens)
    axes = (0, 1) if t.ndim == 3 else (1, 2)
    return np.roll(t, (-shift, -shift), axis=axes)


# ---------------------------------------------------------------------------
# attention


def _split_heads(x, heads):
    *lead, t, d = x.shape
    dh = d // heads
    return np.moveaxis(x.reshape(*lead, t, heads, dh), -2, -3)


def _merge_heads(x):
    *lead, h, t, dh = x.shape
    return np.moveaxis(x, -3, -2).reshape(*lead, t, h * dh)


def attention_core_forward(q, k, v, heads):
    """Scaled dot-product attention over the trailing (tokens, dim) axes."""
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    scale = 1.0 / np.sqrt(d // heads)
    scores = (qh @ kh.swapaxes(-1, -2)) * scale
    attn = ops.softmax(scores)
    out = _merge_heads(attn @ vh)
    return out, (qh, kh, vh, attn, scale)


def attention_core_backward(grad_out, cache, heads):
    qh, kh, vh, attn, scale = cache
    g = _split_heads(np.asarray(grad_out, dtype=np.float64), heads)
    da = g @ vh.swapaxes(-1, -2)
    dv = attn.swapaxes(-1, -2) @ g
    ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True))
    dq = (ds @ kh) * scale
    dk = (ds.swapaxes(-1, -2) @ qh) * scale
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)


def window_attention(window_tokens, heads, qkv_weights, qkv_bias, proj_weights, proj_bias,
                     return_attn=False):
    """Multi-head self-attention within one window: tokens [T, D] -> [T, D]."""
    x = np.asarray(window_tokens, dtype=np.float64)
    d = x.shape[-1]
    if d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    qkv = ops.dense_forward(x, qkv_weights, qkv_bias)
    q, k, v = np.split(qkv, 3, axis=-1)
    out, cache = attention_core_forward(q, k, v, heads)
    y = ops.dense_forward(out, proj_weights, proj_bias)
    if return_attn:
        return y, cache[3]
    return y


# ---------------------------------------------------------------------------
# layers


class PatchEmbed(Layer):
    def __init__(self, name, rng, patch, in_channels, embed_dim):
        ph, pw = patch
        self.patch = patch
        self.proj = Dense(f"{name}/proj", rng, ph * pw * in_channels, embed_dim)

    def params(self):
        return self.proj.params()

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        n, h, w, c = x.shape
        ph, pw = self.patch
        if h % ph or w % pw:
            raise ShapeError(f"image {h}x{w} not divisible by patch {self.patch}")
        p = x.reshape(n, h // ph, ph, w // pw, pw, c).transpose(0, 1, 3, 2, 4, 5)
        self._grid = (n, h // ph, w // pw, ph, pw, c)
        flat = p.reshape(n, h // ph, w // pw, ph * pw * c)
        return self.proj.forward(flat, train, rng)

    def backward(self, grad):
        g = self.proj.backward(grad)
        n, ht, wt, ph, pw, c = self._grid
        g = g.reshape(n, ht, wt, ph, pw, c).transpose(0, 1, 3, 2, 4, 5)
        return g.reshape(n, ht * ph, wt * pw, c)


class WindowAttention(Layer):
    """Ordinary multi-head attention applied independently inside each window."""

    def __init__(self, name, rng, dim, heads):
        self.heads = heads
        self.qkv = Dense(f"{name}/qkv", rng, dim, 3 * dim)
        self.proj = Dense(f"{name}/out", rng, dim, dim)

    def params(self):
        return self.qkv.params() + self.proj.params()

    def forward(self, x, train=False, rng=None):
        qkv = self.qkv.forward(x, train, rng)
        q, k, v = np.split(qkv, 3, axis=-1)
        out, self._cache = attention_core_forward(q, k, v, self.heads)
        return self.proj.forward(out, train, rng)

    def backward(self, grad):
        g = self.proj.backward(grad)
        dq, dk, dv = attention_core_backward(g, self._cache, self.heads)
        return self.qkv.backward(np.concatenate([dq, dk, dv], axis=-1))


class SwinBlock(Layer):
    """Pre-norm windowed attention with residual, then a per-token MLP with
    residual. A nonzero shift rolls the grid before windowing (and back after),
    which is what lets information cross window boundaries between blocks."""

    def __init__(self, name, rng, dim, heads, window_size, shift, mlp_ratio=2):
        self.window_size = window_size
        self.shift = shift
        self.norm1 = LayerNorm(f"{name}/norm1", dim)
        self.attn = WindowAttention(f"{name}/attn", rng, dim, heads)
        self.norm2 = LayerNorm(f"{name}/norm2", dim)
        hidden = dim * mlp_ratio
        self.mlp_in = Dense(f"{name}/mlp_in", rng, dim, hidden)
        self.mlp_act = ReLU()
        self.mlp_out = Dense(f"{name}/mlp_out", rng, hidden, dim)

    def params(self):
        return (self.norm1.params() + self.attn.params() + self.norm2.params()
                + self.mlp_in.params() + self.mlp_out.params())

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        n, ht, wt, d = x.shape
        self._grid = (ht, wt)
        h = self.norm1.forward(x, train, rng)
        if self.shift:
            h = cyclic_shift(h, self.shift)
        win = window_partition(h, self.window_size)
        win = self.attn.forward(win, train, rng)
        h = window_reverse(win, self.window_size, ht, wt)
        if self.shift:
            h = cyclic_shift(h, -self.shift)
        x = x + h
        h2 = self.norm2.forward(x, train, rng)
        h2 = self.mlp_out.forward(self.mlp_act.forward(self.mlp_in.forward(h2, train, rng), train, rng), train, rng)
        return x + h2

    def backward(self, grad):
        ht, wt = self._grid
        g2 = self.mlp_in.backward(self.mlp_act.backward(self.mlp_out.backward(grad)))
        g = grad + self.norm2.backward(g2)
        ga = g
        if self.shift:
            ga = cyclic_shift(ga, self.shift)
        gw = window_partition(ga, self.window_size)
        gw = self.attn.backward(gw)
        ga = window_reverse(gw, self.window_size, ht, wt)
        if self.shift:
            ga = cyclic_shift(ga, -self.shift)
        return g + self.norm1.backward(ga)
