"""Multi-level encoder, adaptation layers and per-level predictor heads.

Levels 1..K-1 are conv blocks ([conv + relu] x n, max-pooled before the next
block); level K is a global-context conv applied to the pooled output of the
last block. Each inference level gets its adaptation layers and a 1x1
predictor head.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError


def fan_in_uniform(rng, shape, scale=1.0):
    fan_in = int(np.prod(shape[1:]))
    bound = scale * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def new_conv(params, rng, name, out_c, in_c, k, scale=1.0, zero=False):
    shape = (out_c, in_c, k, k)
    w = np.zeros(shape) if zero else fan_in_uniform(rng, shape, scale)
    params[f"{name}.weight"] = T.Parameter(w, f"{name}.weight")
    params[f"{name}.bias"] = T.Parameter(np.zeros(out_c), f"{name}.bias")


def apply_conv(x, params, name, relu=True):
    w = params[f"{name}.weight"]
    k = w.shape[2]
    y = T.conv2d(x, w, params[f"{name}.bias"], stride=1, padding=k // 2)
    return T.relu(y) if relu else y


@dataclass
class FeaturePyramid:
    """Per-level feature maps, shallow to deep (index 0 is level 1).

    ``adapted`` holds the features after the level's adaptation layers (level
    1 is left unadapted); ``raw`` the trunk output of each level.
    """

    raw: list
    adapted: list

    def level(self, i):
        return self.adapted[i - 1]


def build_backbone(config, rng, prefix="backbone", scale=1.0):
    params = {}
    in_c = config.input_channels
    for i, block in enumerate(config.blocks, start=1):
        for j in range(block.convs):
            new_conv(params, rng, f"{prefix}.block{i}.conv{j + 1}", block.channels, in_c, block.kernel, scale)
            in_c = block.channels
    new_conv(params, rng, f"{prefix}.global", config.global_channels, in_c, config.global_kernel, scale)
    for lvl in range(1, config.level_count + 1):
        c = config.level_channels(lvl)
        for j, (out_c, k) in enumerate(config.adaptations.get(lvl, ())):
            new_conv(params, rng, f"{prefix}.adapt{lvl}.{j}", out_c, c, k, scale)
            c = out_c
    return params


def build_heads(config, rng, prefix="head", scale=1.0):
    params = {}
    for lvl in config.inference_levels:
        new_conv(params, rng, f"{prefix}{lvl}", 1, config.adapted_channels(lvl), 1, scale)
    return params


def forward_backbone(image, config, params, prefix="backbone"):
    if image.data.ndim != 4 or image.shape[1] != config.input_channels:
        raise ConfigError(f"backbone expects Bx{config.input_channels}xHxW input, got {image.shape}")
    config.check_size(image.shape[2], image.shape[3])
    raw = []
    x = image
    for i, block in enumerate(config.blocks, start=1):
        if i > 1:
            x = T.maxpool2d(x)
        for j in range(block.convs):
            x = apply_conv(x, params, f"{prefix}.block{i}.conv{j + 1}")
        raw.append(x)
    x = apply_conv(T.maxpool2d(x), params, f"{prefix}.global")
    raw.append(x)

    adapted = []
    for lvl, feat in enumerate(raw, start=1):
        for j in range(len(config.adaptations.get(lvl, ()))):
            feat = apply_conv(feat, params, f"{prefix}.adapt{lvl}.{j}")
        adapted.append(feat)
    return FeaturePyramid(raw=raw, adapted=adapted)


def predict_level(adapted, params, name):
    """Sigmoid of a 1x1 conv, at the level's own resolution."""
    w = params[f"{name}.weight"]
    if w.shape[1] != adapted.shape[1]:
        raise ConfigError(f"head {name} expects {w.shape[1]} channels, features have {adapted.shape[1]}")
    return T.sigmoid(T.conv2d(adapted, w, params[f"{name}.bias"]))
