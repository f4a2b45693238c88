"""Builders for the four toy classifiers.

Each builder returns a Model whose layer stack ends in class logits; softmax
is applied at prediction time. Architecture ids are stable numeric codes that
also appear on the wire.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from .errors import ConfigError
from .layers import (BatchNorm, Conv2D, Dense, DenseBlock, DenseBlockSpec,
                     Dropout, Flatten, GlobalAvgPool, MaxPool2, Model,
                     ParallelConcat, ReLU)
from .swin import PatchEmbed, SwinBlock, SwinConfig


class ArchitectureId(IntEnum):
    TinyVGG = 1
    TinyInception = 2
    TinyDense = 3
    TinySwin = 4


ARCH_NAMES = {
    "vgg": ArchitectureId.TinyVGG,
    "inception": ArchitectureId.TinyInception,
    "dense": ArchitectureId.TinyDense,
    "swin": ArchitectureId.TinySwin,
}

DISPLAY_NAMES = {
    ArchitectureId.TinyVGG: "TinyVGG",
    ArchitectureId.TinyInception: "TinyInception",
    ArchitectureId.TinyDense: "TinyDense",
    ArchitectureId.TinySwin: "TinySwin",
}

DEFAULT_INPUT_SHAPE = (32, 32, 1)


def build_tiny_vgg(num_classes=3, input_shape=DEFAULT_INPUT_SHAPE, seed=0, dropout_rate=0.5):
    """Stacked 3x3 conv stages, then a dense 128 -> 64 head with batch norm."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    layers = [
        Conv2D("conv1", rng, 3, c, 8), ReLU(), MaxPool2(),
        Conv2D("conv2", rng, 3, 8, 16), BatchNorm("bn_conv2", 16), ReLU(), MaxPool2(),
        Flatten(),
        Dense("fc1", rng, (h // 4) * (w // 4) * 16, 128), BatchNorm("bn_fc1", 128), ReLU(),
        Dense("fc2", rng, 128, 64), BatchNorm("bn_fc2", 64), ReLU(),
        Dropout(dropout_rate),
        Dense("head", rng, 64, num_classes),
    ]
    return Model(ArchitectureId.TinyVGG, layers, input_shape, num_classes)


def build_tiny_inception(num_classes=3, input_shape=DEFAULT_INPUT_SHAPE, seed=0, dropout_rate=0.5):
    """A stem conv, then one block of parallel branches (1x1, and two stacked
    3x3 convs standing in for a single 5x5) concatenated on channels."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    branch_1x1 = [Conv2D("incep/b1_1x1", rng, 1, 8, 8), ReLU()]
    branch_3x3 = [
        Conv2D("incep/b2_1x1", rng, 1, 8, 8), ReLU(),
        Conv2D("incep/b2_3x3a", rng, 3, 8, 8), ReLU(),
        Conv2D("incep/b2_3x3b", rng, 3, 8, 8), ReLU(),
    ]
    layers = [
        Conv2D("stem", rng, 3, c, 8), ReLU(), MaxPool2(),
        ParallelConcat([branch_1x1, branch_3x3]),
        MaxPool2(),
        GlobalAvgPool(),
        Dense("fc1", rng, 16, 32), ReLU(),
        Dropout(dropout_rate),
        Dense("head", rng, 32, num_classes),
    ]
    return Model(ArchitectureId.TinyInception, layers, input_shape, num_classes)


def build_tiny_dense(num_classes=3, input_shape=DEFAULT_INPUT_SHAPE, seed=0, dropout_rate=0.5,
                     growth_rate=4, block_layers=3, head_size=64):
    """Stem conv, one densely connected block, global average pool, dense head."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    spec = DenseBlockSpec(num_layers=block_layers, growth_rate=growth_rate, input_channels=8)
    layers = [
        Conv2D("stem", rng, 3, c, 8), ReLU(), MaxPool2(),
        DenseBlock("block", rng, spec),
        GlobalAvgPool(),
        Dense("fc1", rng, spec.output_channels(), head_size), ReLU(),
        Dropout(dropout_rate),
        Dense("head", rng, head_size, num_classes),
    ]
    return Model(ArchitectureId.TinyDense, layers, input_shape, num_classes)


def build_tiny_swin(cfg: SwinConfig | None = None, num_classes=3, input_shape=DEFAULT_INPUT_SHAPE,
                    seed=0, dropout_rate=0.5):
    """Patch embedding, then (shift 0, shift s) windowed-attention block pairs,
    then mean over tokens and a dense head."""
    cfg = cfg or SwinConfig()
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    cfg.validate(h, w)
    layers = [PatchEmbed("embed", rng, cfg.patch_size, c, cfg.embed_dim)]
    for d in range(cfg.depth):
        layers.append(SwinBlock(f"block{d}a", rng, cfg.embed_dim, cfg.num_heads,
                                cfg.window_size, 0, cfg.mlp_ratio))
        layers.append(SwinBlock(f"block{d}b", rng, cfg.embed_dim, cfg.num_heads,
                                cfg.window_size, cfg.shift_size, cfg.mlp_ratio))
    layers += [
        GlobalAvgPool(),
        Dropout(dropout_rate),
        Dense("head", rng, cfg.embed_dim, num_classes),
    ]
    return Model(ArchitectureId.TinySwin, layers, input_shape, num_classes)


_BUILDERS = {
    ArchitectureId.TinyVGG: build_tiny_vgg,
    ArchitectureId.TinyInception: build_tiny_inception,
    ArchitectureId.TinyDense: build_tiny_dense,
    ArchitectureId.TinySwin: build_tiny_swin,
}


def build_model(arch, num_classes=3, input_shape=DEFAULT_INPUT_SHAPE, seed=0, dropout_rate=0.5):
    """Build by ArchitectureId or CLI name ('vgg', 'inception', 'dense', 'swin')."""
    if isinstance(arch, str):
        if arch not in ARCH_NAMES:
            raise ConfigError(f"unknown model {arch!r}; choose from {sorted(ARCH_NAMES)}")
        arch = ARCH_NAMES[arch]
    arch = ArchitectureId(arch)
    if arch is ArchitectureId.TinySwin:
        return build_tiny_swin(num_classes=num_classes, input_shape=input_shape,
                               seed=seed, dropout_rate=dropout_rate)
    return _BUILDERS[arch](num_classes=num_classes, input_shape=input_shape,
                           seed=seed, dropout_rate=dropout_rate)
