"""Dense backward combination of side predictions.

For inference levels i_1 < ... < i_n (deepest last) the combined side-outs
are built top-down::

    combined[top] = raw[top]
    combined[i]   = w_self[i] * raw[i] + sum_{k > i} w_pair[i, k] * combined[k]

with every raw map first upsampled to one common resolution. The weights are
learnable scalars initialised to a uniform average over the contributors.
"""

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError


@dataclass
class SideOutputSet:
    levels: tuple
    raw: list
    combined: list

    def __getitem__(self, level):
        return self.combined[self.levels.index(level)]


def build_bpdc(levels, prefix="bpdc"):
    params = {}
    levels = list(levels)
    n = len(levels)
    for idx, i in enumerate(levels):
        contributors = n - idx
        if idx < n - 1:
            params[f"{prefix}.self{i}"] = T.Parameter([1.0 / contributors], f"{prefix}.self{i}")
            for k in levels[idx + 1:]:
                params[f"{prefix}.pair{i}_{k}"] = T.Parameter([1.0 / contributors], f"{prefix}.pair{i}_{k}")
        params[f"{prefix}.collab{i}"] = T.Parameter([1.0 / n], f"{prefix}.collab{i}")
    return params


class BpdcWeights:
    """View over the scalar parameters of one BPDC module."""

    def __init__(self, params, levels, prefix="bpdc"):
        self.params = params
        self.levels = tuple(levels)
        self.prefix = prefix

    def self_weight(self, i):
        return self.params[f"{self.prefix}.self{i}"]

    def pair_weight(self, i, k):
        return self.params[f"{self.prefix}.pair{i}_{k}"]

    def collab_weight(self, i):
        return self.params[f"{self.prefix}.collab{i}"]

    def all(self):
        return [p for name, p in self.params.items() if name.startswith(self.prefix + ".")]


def combine_side_outputs(raw, weights, size=None):
    """Top-down dense combination of raw level predictions.

    ``raw`` is ordered shallow to deep, one map per level in
    ``weights.levels``. Maps are upsampled to ``size`` (default: the largest
    raw extent) before weighting.
    """
    raw = list(raw)
    levels = weights.levels
    if not raw:
        raise ConfigError("combine_side_outputs needs at least one level")
    if len(raw) != len(levels):
        raise ConfigError(f"got {len(raw)} predictions for {len(levels)} levels")
    if size is None:
        size = max(p.shape[2] for p in raw)
    up = [T.upsample_to(p, size) for p in raw]
    combined = [None] * len(up)
    combined[-1] = up[-1]
    for idx in range(len(up) - 2, -1, -1):
        i = levels[idx]
        terms = [up[idx]] + combined[idx + 1:]
        ws = [weights.self_weight(i)] + [weights.pair_weight(i, k) for k in levels[idx + 1:]]
        combined[idx] = T.weighted_sum(terms, ws)
    return SideOutputSet(levels=tuple(levels), raw=up, combined=combined)


def collaborative_combine(side_outs, weights):
    """Weighted sum of all combined side-outs (the joint prediction).

    The result is a linear combination; callers clamp it into (0, 1) before
    losses and evaluation, the same policy as for the combined side-outs.
    """
    if not side_outs.combined:
        raise ConfigError("collaborative_combine needs at least one side-out")
    ws = [weights.collab_weight(i) for i in side_outs.levels]
    return T.weighted_sum(side_outs.combined, ws)


def weight_values(weights):
    vals = {}
    levels = weights.levels
    for idx, i in enumerate(levels[:-1]):
        vals[("self", i)] = weights.self_weight(i).item()
        for k in levels[idx + 1:]:
            vals[("pair", i, k)] = weights.pair_weight(i, k).item()
    return vals
