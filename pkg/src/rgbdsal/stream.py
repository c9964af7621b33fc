"""Single-modality saliency network: backbone, level heads and BPDC weights.

The same class serves as the RGB teacher, the depth student and the
single-stream baselines.
"""

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .backbone import FeaturePyramid, build_backbone, build_heads, forward_backbone, predict_level
from .bpdc import BpdcWeights, SideOutputSet, build_bpdc, collaborative_combine, combine_side_outputs


@dataclass
class StreamOutput:
    pyramid: FeaturePyramid
    preds: list  # native-resolution P^i per inference level
    side_outs: SideOutputSet
    joint: T.Tensor  # collaborative combination, unclamped


class SaliencyStream:
    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.bpdc = BpdcWeights(params, config.inference_levels)

    @classmethod
    def build(cls, config, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        params = {}
        params.update(build_backbone(config, rng, scale=scale))
        params.update(build_heads(config, rng, scale=scale))
        params.update(build_bpdc(config.inference_levels))
        return cls(config, params)

    def parameters(self):
        return list(self.params.values())

    def backbone_names(self):
        return [n for n in self.params if n.startswith("backbone.")]

    def forward(self, x):
        x = T.as_tensor(x)
        pyr = forward_backbone(x, self.config, self.params)
        preds = [predict_level(pyr.level(i), self.params, f"head{i}") for i in self.config.inference_levels]
        so = combine_side_outputs(preds, self.bpdc, size=x.shape[2])
        return StreamOutput(pyramid=pyr, preds=preds, side_outs=so, joint=collaborative_combine(so, self.bpdc))

    def predict(self, x):
        """Final saliency map (B, H, W) in [0, 1], no graph."""
        with T.no_grad():
            out = self.forward(x)
        return np.clip(out.joint.data[:, 0], 0.0, 1.0)

    def copy(self):
        params = {n: T.Parameter(p.data.copy(), n) for n, p in self.params.items()}
        return SaliencyStream(self.config, params)

    def state(self):
        return {n: p.data for n, p in self.params.items()}

    def save(self, path, kind, meta=None):
        return checkpoint.save(path, self.params, self.config.hash(), kind, meta)

    @classmethod
    def load(cls, path, config):
        arrays, header = checkpoint.load(path)
        stream = cls.build(config)
        checkpoint.assign(stream.params, arrays, source=str(path))
        return stream, header
