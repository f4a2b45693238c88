"""Layer objects and the sequential model container.

Each layer caches whatever its backward pass needs during forward; a model
instance therefore belongs to one execution context while training (forward
and backward must be paired). Parameters are plain value/gradient pairs with
stable hierarchical names, which define the artifact serialization order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"parameter {self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")


class Layer:
    """Base layer: forward(x, train, rng) then backward(grad)."""

    frozen = False

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, name, rng, k, cin, cout, stride=1, padding="same"):
        fan_in = k * k * cin
        self.kernel = Parameter(f"{name}/kernel", ops.he_uniform(rng, (k, k, cin, cout), fan_in))
        self.bias = Parameter(f"{name}/bias", np.zeros(cout))
        self.stride, self.padding = stride, padding
        self._cache = None

    def params(self):
        return [self.kernel, self.bias]

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.conv2d_forward(
            x, self.kernel.value, self.bias.value, self.stride, self.padding, with_cache=True
        )
        return out

    def backward(self, grad):
        dx, dk, db = ops.conv2d_backward(grad, self.kernel.value, self._cache)
        self.kernel.grad += dk
        self.bias.grad += db
        return dx


class Dense(Layer):
    def __init__(self, name, rng, n, m):
        self.weights = Parameter(f"{name}/weights", ops.he_uniform(rng, (n, m), n))
        self.bias = Parameter(f"{name}/bias", np.zeros(m))
        self._x = None

    def params(self):
        return [self.weights, self.bias]

    def forward(self, x, train=False, rng=None):
        self._x = np.asarray(x, dtype=np.float64)
        return ops.dense_forward(self._x, self.weights.value, self.bias.value)

    def backward(self, grad):
        dx, dw, db = ops.dense_backward(grad, self._x, self.weights.value)
        self.weights.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm(Layer):
    def __init__(self, name, features, momentum=0.9):
        self.gamma = Parameter(f"{name}/gamma", np.ones(features))
        self.beta = Parameter(f"{name}/beta", np.zeros(features))
        # Running statistics ride along in the artifact but take no gradient.
        self.running_mean = Parameter(f"{name}/running_mean", np.zeros(features), trainable=False)
        self.running_var = Parameter(f"{name}/running_var", np.ones(features), trainable=False)
        self.momentum = momentum
        self._cache = None

    def params(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def forward(self, x, train=False, rng=None):
        mode = "train" if train else "infer"
        out, self._cache, new_mean, new_var = ops.batch_norm_forward(
            x, self.gamma.value, self.beta.value, mode,
            self.running_mean.value, self.running_var.value, self.momentum,
        )
        if train:
            self.running_mean.value = new_mean
            self.running_var.value = new_var
        return out

    def backward(self, grad):
        dx, dg, db = ops.batch_norm_backward(grad, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class LayerNorm(Layer):
    def __init__(self, name, dim):
        self.gamma = Parameter(f"{name}/gamma", np.ones(dim))
        self.beta = Parameter(f"{name}/beta", np.zeros(dim))
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.layer_norm_forward(x, self.gamma.value, self.beta.value)
        return out

    def backward(self, grad):
        dx, dg, db = ops.layer_norm_backward(grad, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._x = np.asarray(x, dtype=np.float64)
        return ops.relu(self._x)

    def backward(self, grad):
        return ops.relu_backward(grad, self._x)


class MaxPool2(Layer):
    def __init__(self, size=2):
        self.size = size

    def forward(self, x, train=False, rng=None):
        out, self._cache = ops.max_pool2d(x, self.size)
        return out

    def backward(self, grad):
        return ops.max_pool2d_backward(grad, self._cache)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False, rng=None):
        self._shape = np.asarray(x).shape
        return ops.global_avg_pool(x)

    def backward(self, grad):
        return ops.global_avg_pool_backward(grad, self._shape)


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._shape = np.asarray(x).shape
        return np.asarray(x, dtype=np.float64).reshape(self._shape[0], -1)

    def backward(self, grad):
        return np.asarray(grad).reshape(self._shape)


class Dropout(Layer):
    def __init__(self, rate):
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        out, self._mask = ops.dropout(x, self.rate, "train" if train else "infer", rng)
        return out

    def backward(self, grad):
        return ops.dropout_backward(grad, self._mask)


class ParallelConcat(Layer):
    """Runs branches (lists of layers) on the same input, concatenates on the channel axis."""

    def __init__(self, branches):
        self.branches = branches

    def params(self):
        return [p for branch in self.branches for layer in branch for p in layer.params()]

    def forward(self, x, train=False, rng=None):
        outs = []
        for branch in self.branches:
            h = x
            for layer in branch:
                h = layer.forward(h, train, rng)
            outs.append(h)
        self._widths = [o.shape[-1] for o in outs]
        return np.concatenate(outs, axis=-1)

    def backward(self, grad):
        dx = None
        offset = 0
        for branch, w in zip(self.branches, self._widths):
            g = grad[..., offset : offset + w]
            offset += w
            for layer in reversed(branch):
                g = layer.backward(g)
            dx = g if dx is None else dx + g
        return dx


@dataclass(frozen=True)
class DenseBlockSpec:
    """Dense-connectivity block shape: L conv layers of growth g on top of c0 channels."""

    num_layers: int
    growth_rate: int
    input_channels: int

    def output_channels(self) -> int:
        return self.input_channels + self.num_layers * self.growth_rate


class DenseBlock(Layer):
    """Each inner conv consumes the channel-concatenation of the input and all
    previous inner outputs, and contributes growth_rate new channels."""

    def __init__(self, name, rng, spec: DenseBlockSpec, k=3):
        self.spec = spec
        self.convs = []
        self.relus = []
        for l in range(spec.num_layers):
            cin = spec.input_channels + l * spec.growth_rate
            self.convs.append(Conv2D(f"{name}/h{l + 1}", rng, k, cin, spec.growth_rate, padding="same"))
            self.relus.append(ReLU())

    def params(self):
        return [p for c in self.convs for p in c.params()]

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.spec.input_channels:
            raise ShapeError(f"dense block expects {self.spec.input_channels} channels, got {x.shape[-1]}")
        feats = [np.asarray(x, dtype=np.float64)]
        for conv, act in zip(self.convs, self.relus):
            h = np.concatenate(feats, axis=-1)
            feats.append(act.forward(conv.forward(h, train, rng), train, rng))
        self._widths = [f.shape[-1] for f in feats]
        return np.concatenate(feats, axis=-1)

    def backward(self, grad):
        splits = np.cumsum(self._widths)[:-1]
        dfeats = list(np.split(grad, splits, axis=-1))
        for l in range(len(self.convs) - 1, -1, -1):
            g = self.relus[l].backward(dfeats[l + 1])
            dconcat = self.convs[l].backward(g)
            offset = 0
            for i in range(l + 1):
                w = self._widths[i]
                dfeats[i] = dfeats[i] + dconcat[..., offset : offset + w]
                offset += w
        return dfeats[0]


class Model:
    """Sequential stack ending in class logits; softmax applied at predict time."""

    def __init__(self, arch_id, layers, input_shape, num_classes):
        self.arch_id = arch_id
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes

    def params(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params()]

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def forward(self, x, train=False, rng=None):
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h = layer.forward(h, train, rng)
        return h

    def backward(self, grad):
        g = grad
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def predict_proba(self, images, batch_size=64):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            return ops.softmax(self.forward(images[None]))[0]
        chunks = [ops.softmax(self.forward(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks, axis=0)

    def predict_logits(self, images, batch_size=64):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            return self.forward(images[None])[0]
        chunks = [self.forward(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks, axis=0)

    def predict(self, images, batch_size=64):
        return np.argmax(self.predict_logits(images, batch_size), axis=-1)

    def set_dropout_rate(self, rate):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rate = rate
