"""Stage 3: complementarity-aware RGB-D fusion with a top-down cross-level path.

Per inference level m (processed deepest first) the CA-Fuse block computes::

    Fr~ = Fr + sel_d2r(Fd)          (residual selectors, 1x1 convs)
    Fd~ = Fd + sel_r2d(Fr)
    Frd~ = concat(Fr~, Fd~, up2(relu(transition(Frd~ of level m+1))))
    P_rd = sigmoid(head_rd(Frd~)),  branch maps sigmoid(head_r(Fr~)), sigmoid(head_d(Fd~))

The P_rd maps are combined by a BPDC module. The four ablation variants are
switches on the same network: see ``config.VARIANTS``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import data as D
from . import tensor as T
from .backbone import apply_conv, build_backbone, forward_backbone, new_conv, predict_level
from .bpdc import BpdcWeights, build_bpdc, collaborative_combine, combine_side_outputs
from .config import INIT_MODES, VARIANTS
from .errors import ConfigError, DataError, StageOrderError
from .training import run_sgd, sum_terms


@dataclass(frozen=True)
class VariantFlags:
    residuals_on: bool = True
    branch_losses_on: bool = True
    transition_on: bool = True

    @classmethod
    def named(cls, name):
        if name not in VARIANTS:
            raise ConfigError(f"unknown fusion variant {name!r}; expected one of {sorted(VARIANTS)}")
        return cls(*VARIANTS[name])


@dataclass
class CaFuseOutput:
    fused: T.Tensor
    pred: T.Tensor
    branch_r: T.Tensor = None
    branch_d: T.Tensor = None
    enhanced_r: T.Tensor = None
    enhanced_d: T.Tensor = None


@dataclass
class FusionOutput:
    side_outs: object
    joint: T.Tensor
    blocks: dict = field(default_factory=dict)  # level -> CaFuseOutput
    branch_preds: list = None  # [(P_Rb, P_Db) at full resolution] per level, or None


def ca_fuse_forward(f_r, f_d, deeper_fused, params, level, flags):
    """One CA-Fuse block. ``deeper_fused`` is the level m+1 community or None."""
    if f_r.shape[2:] != f_d.shape[2:] or f_r.shape[0] != f_d.shape[0]:
        raise ConfigError(f"CA-Fuse level {level}: modality extents differ {f_r.shape} vs {f_d.shape}")
    pre = f"fuse{level}"
    if flags.residuals_on:
        enh_r = T.add(f_r, apply_conv(f_d, params, f"{pre}.sel_d2r", relu=False))
        enh_d = T.add(f_d, apply_conv(f_r, params, f"{pre}.sel_r2d", relu=False))
    else:
        enh_r, enh_d = f_r, f_d
    parts = [enh_r, enh_d]
    if flags.transition_on and deeper_fused is not None:
        if f"fuse{level + 1}.transition.weight" not in params:
            raise ConfigError(f"level {level + 1} has no transition layer configured")
        if deeper_fused.shape[2] * 2 != f_r.shape[2]:
            raise ConfigError(f"deeper fused features {deeper_fused.shape} are not at half resolution of {f_r.shape}")
        trans = apply_conv(deeper_fused, params, f"fuse{level + 1}.transition")
        parts.append(T.upsample_bilinear(trans, 2))
    fused = T.concat_channels(parts)
    out = CaFuseOutput(fused=fused, pred=predict_level(fused, params, f"{pre}.head_rd"), enhanced_r=enh_r, enhanced_d=enh_d)
    if flags.branch_losses_on:
        out.branch_r = predict_level(enh_r, params, f"{pre}.head_r")
        out.branch_d = predict_level(enh_d, params, f"{pre}.head_d")
    return out


class FusionNet:
    def __init__(self, config, params, variant="f3c"):
        self.config = config
        self.params = params
        self.variant = variant
        self.flags = VariantFlags.named(variant)
        self.bpdc = BpdcWeights(params, config.inference_levels, prefix="fuse.bpdc")

    @classmethod
    def build(cls, config, variant="f3c", seed=0, scale=1.0, selector_init="fan_in"):
        flags = VariantFlags.named(variant)
        levels = list(config.inference_levels)
        if flags.transition_on and not any(m in config.transitions for m in levels[1:]):
            raise ConfigError(f"variant {variant!r} needs transition layers but the config defines none")
        if selector_init not in ("fan_in", "zero"):
            raise ConfigError(f"selector_init must be 'fan_in' or 'zero', got {selector_init!r}")
        rng = np.random.default_rng([int(seed), 3])
        params = {}
        params.update(build_backbone(config, rng, prefix="rgb.backbone", scale=scale))
        params.update(build_backbone(config, rng, prefix="depth.backbone", scale=scale))
        trans_in = {}
        for m in reversed(levels):
            c = config.adapted_channels(m)
            if flags.residuals_on:
                new_conv(params, rng, f"fuse{m}.sel_d2r", c, c, 1, scale, zero=selector_init == "zero")
                new_conv(params, rng, f"fuse{m}.sel_r2d", c, c, 1, scale, zero=selector_init == "zero")
            if flags.branch_losses_on:
                new_conv(params, rng, f"fuse{m}.head_r", 1, c, 1, scale)
                new_conv(params, rng, f"fuse{m}.head_d", 1, c, 1, scale)
            fused_c = 2 * c + trans_in.get(m, 0)
            new_conv(params, rng, f"fuse{m}.head_rd", 1, fused_c, 1, scale)
            below = levels[levels.index(m) - 1] if levels.index(m) > 0 else None
            if flags.transition_on and below is not None and m in config.transitions:
                if below != m - 1:
                    raise ConfigError("transition path needs consecutive inference levels")
                new_conv(params, rng, f"fuse{m}.transition", config.transitions[m], fused_c, 1, scale)
                trans_in[below] = config.transitions[m]
        params.update(build_bpdc(levels, prefix="fuse.bpdc"))
        return cls(config, params, variant)

    def parameters(self):
        return list(self.params.values())

    def stream_names(self, modality):
        return [n for n in self.params if n.startswith(f"{modality}.backbone.")]

    def load_stream(self, modality, stream):
        """Copy a trained SaliencyStream's backbone into one modality branch."""
        names = self.stream_names(modality)
        checkpoint.assign(
            self.params, stream.state(), names=names,
            rename=lambda n: n[len(modality) + 1:], source=f"{modality} initialisation",
        )

    def forward(self, x_rgb, x_depth):
        x_rgb, x_depth = T.as_tensor(x_rgb), T.as_tensor(x_depth)
        if x_rgb.shape != x_depth.shape:
            raise ConfigError(f"rgb input {x_rgb.shape} and depth input {x_depth.shape} differ")
        size = x_rgb.shape[2]
        pyr_r = forward_backbone(x_rgb, self.config, self.params, prefix="rgb.backbone")
        pyr_d = forward_backbone(x_depth, self.config, self.params, prefix="depth.backbone")
        blocks = {}
        deeper = None
        for m in reversed(self.config.inference_levels):
            blk = ca_fuse_forward(pyr_r.level(m), pyr_d.level(m), deeper, self.params, m, self.flags)
            blocks[m] = blk
            deeper = blk.fused if f"fuse{m}.transition.weight" in self.params else None
        levels = self.config.inference_levels
        so = combine_side_outputs([blocks[m].pred for m in levels], self.bpdc, size=size)
        branch = None
        if self.flags.branch_losses_on:
            branch = [(T.upsample_to(blocks[m].branch_r, size), T.upsample_to(blocks[m].branch_d, size)) for m in levels]
        return FusionOutput(side_outs=so, joint=collaborative_combine(so, self.bpdc), blocks=blocks, branch_preds=branch)

    def predict(self, x_rgb, x_depth):
        with T.no_grad():
            out = self.forward(x_rgb, x_depth)
        return np.clip(out.joint.data[:, 0], 0.0, 1.0)

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta["variant"] = self.variant
        return checkpoint.save(path, self.params, self.config.hash(), "fusion", meta)

    @classmethod
    def load(cls, path, config):
        arrays, header = checkpoint.load(path)
        if header.get("kind") != "fusion":
            raise ConfigError(f"{path} is a {header.get('kind')!r} checkpoint, expected 'fusion'")
        net = cls.build(config, variant=header["meta"].get("variant", "f3c"))
        checkpoint.assign(net.params, arrays, source=str(path))
        extra = sorted(set(arrays) - set(net.params))
        if extra:
            raise ConfigError(f"{path} has parameters unknown to this architecture: {', '.join(extra[:6])}")
        return net, header


def final_loss(fused, branch_preds, gt, weights, branch_losses_on=True):
    """Cross-entropy over branch maps, fused side-outs and the collaborative map."""
    gt = T.as_tensor(gt)
    if branch_losses_on and branch_preds is None:
        raise RuntimeError("branch losses requested but no branch predictions were produced")
    terms = {}
    for idx, (lvl, p) in enumerate(zip(fused.levels, fused.combined)):
        if p.shape != gt.shape:
            raise ConfigError(f"fused side-out {p.shape} does not match ground truth {gt.shape}")
        if branch_losses_on:
            pr, pd = branch_preds[idx]
            terms[f"level{lvl}_r"] = T.cross_entropy(T.clamp(pr), gt)
            terms[f"level{lvl}_d"] = T.cross_entropy(T.clamp(pd), gt)
        terms[f"level{lvl}_rd"] = T.cross_entropy(T.clamp(p), gt)
    terms["joint"] = T.cross_entropy(T.clamp(collaborative_combine(fused, weights)), gt)
    return sum_terms(terms), terms


def init_fusion(cfg, init_mode, teacher=None, student=None, seed=0, variant=None):
    """Fusion network initialised per RD-A (random), RD-B (teacher in both
    streams) or RD-C (teacher for RGB, distilled student for depth)."""
    if init_mode not in INIT_MODES:
        raise ConfigError(f"init mode must be one of {INIT_MODES}, got {init_mode!r}")
    variant = variant or cfg.variant
    net = FusionNet.build(
        cfg.network, variant=variant, seed=seed,
        scale=cfg.get("train.init_scale", 1.0), selector_init=cfg.get("fusion.selector_init", "fan_in"),
    )
    if init_mode in ("RD-B", "RD-C") and teacher is None:
        raise StageOrderError(f"{init_mode} needs a teacher checkpoint; run train-teacher first")
    if init_mode == "RD-C" and student is None:
        raise StageOrderError("RD-C needs a distilled student checkpoint; run distill first")
    if init_mode == "RD-B":
        net.load_stream("rgb", teacher)
        net.load_stream("depth", teacher)
    elif init_mode == "RD-C":
        net.load_stream("rgb", teacher)
        net.load_stream("depth", student)
    return net


def train_fusion(dataset, init_mode, cfg, teacher=None, student=None, seed=None, variant=None,
                 lr=None, epochs=None, on_step=None):
    """End-to-end training of the fusion network on labeled RGB-D pairs."""
    if not dataset.labeled:
        missing = [s.id for s in dataset if s.gt is None]
        raise DataError(f"fusion training needs labels; missing for {', '.join(missing[:10])}")
    st = cfg.stage("fusion")
    if lr is not None:
        st["lr"] = lr
    if epochs is not None:
        st["epochs"] = epochs
    seed = cfg.get("train.seed", 0) if seed is None else seed
    net = init_fusion(cfg, init_mode, teacher, student, seed=seed, variant=variant)
    x_rgb, y = D.batch(dataset.samples, "rgb")
    x_dep, _ = D.batch(dataset.samples, "depth")

    def loss_fn(idx):
        out = net.forward(x_rgb[idx], x_dep[idx])
        return final_loss(out.side_outs, out.branch_preds, y[idx], net.bpdc, net.flags.branch_losses_on)

    reports = run_sgd(
        "fusion", net.parameters(), len(dataset), loss_fn,
        lr=st["lr"], momentum=cfg.get("train.momentum", 0.9), epochs=st["epochs"],
        batch_size=cfg.get("train.batch_size", 1), seed=seed, grad_clip=cfg.get("train.grad_clip"),
        on_step=on_step,
    )
    return net, reports


def predict_fusion(net, dataset, chunk=64):
    x_rgb, _ = D.batch(dataset.samples, "rgb")
    x_dep, _ = D.batch(dataset.samples, "depth")
    maps = np.concatenate([net.predict(x_rgb[i:i + chunk], x_dep[i:i + chunk]) for i in range(0, len(x_rgb), chunk)])
    return {s.id: m for s, m in zip(dataset.samples, maps)}
