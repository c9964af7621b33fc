"""Command-line pipeline: generate data, run the three training stages, predict, evaluate, ablate.

Every subcommand writes into its ``--out`` directory together with a
``manifest.json`` recording the resolved config, seed, inputs and the sha256
of each produced artifact. Failures print ``error[CODE]: message`` on stderr
and exit with the code's status.
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from . import data as D
from .checkpoint import file_hash
from .checkpoint import load as load_checkpoint
from .config import INIT_MODES, VARIANTS, load_config
from .distill import distill_student, train_teacher
from .errors import ConfigError, DataError, RgbdSalError, StageOrderError, UsageError
from .fusion import FusionNet, predict_fusion, train_fusion
from .metrics import BETA2, evaluate
from .stream import SaliencyStream


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def tree_hash(root):
    """sha256 over sorted (relative path, file sha256) pairs of a directory."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(file_hash(p).encode())
    return h.hexdigest()


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_manifest(out, args, cfg, seed, inputs, artifacts):
    manifest = {
        "subcommand": args.command,
        "version": __version__,
        "seed": seed,
        "config": cfg.snapshot() if cfg is not None else None,
        "overrides": list(getattr(args, "set", None) or []),
        "inputs": {k: {"path": str(v), "sha256": _input_hash(v)} for k, v in inputs.items()},
        "artifacts": {name: file_hash(out / name) for name in sorted(artifacts)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _input_hash(path):
    p = Path(path)
    return tree_hash(p) if p.is_dir() else file_hash(p)


def _config(args):
    return load_config(args.config, args.set or [])


def _seed(args, cfg):
    return int(args.seed) if args.seed is not None else int(cfg.get("train.seed", 0))


def _log_writer(path):
    fh = open(path, "w")
    return fh, (lambda rep: fh.write(rep.to_json() + "\n"))


def _need(path, stage, what):
    if path is None or not Path(path).is_file():
        raise StageOrderError(f"{what} checkpoint {path} not found; run {stage} first")
    return Path(path)


def _load_stream(path, cfg, expect_kind=None):
    stream, header = SaliencyStream.load(path, cfg.network)
    if header["config_hash"] != cfg.network.hash():
        raise ConfigError(f"{path} was trained with a different network config")
    if expect_kind and header["kind"] != expect_kind:
        raise ConfigError(f"{path} is a {header['kind']!r} checkpoint, expected {expect_kind!r}")
    return stream


def _dataset(path, split="train"):
    return D.load_dataset(path, split=split)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    cfg = _config(args)
    seed = int(args.seed) if args.seed is not None else 0
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    out = _out_dir(args.out)
    ds = [
        D.generate_synthetic_scene(
            (1_000_000 if args.split == "test" else 0) + seed * 10_000 + i,
            size=int(cfg.get("data.size", 32)),
            object_count=int(cfg.get("data.object_count", 3)),
            cue_mode=args.cue_mode,
            min_size=cfg.network.min_size(),
        )
        for i in range(args.count)
    ]
    if args.unlabeled:
        for s in ds:
            s.gt = None
    D.save_dataset(D.Dataset(ds, split=args.split), out)
    artifacts = [str(p.relative_to(out)) for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"]
    _write_manifest(out, args, cfg, seed, {}, artifacts)
    return {"samples": len(ds), "out": str(out)}


def cmd_train_teacher(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    fh, log = _log_writer(out / "train_log.jsonl")
    with fh:
        stream, reports = train_teacher(ds, cfg, seed=seed, on_step=log)
    stream.save(out / "teacher.ckpt", "teacher", {"seed": seed, "modality": "rgb"})
    _write_manifest(out, args, cfg, seed, {"data": args.data}, ["teacher.ckpt", "train_log.jsonl"])
    return {"checkpoint": str(out / "teacher.ckpt"), "final_loss": reports[-1].total if reports else None}


def cmd_distill(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    teacher_path = _need(args.teacher, "train-teacher", "teacher")
    teacher = _load_stream(teacher_path, cfg, "teacher")
    teacher_hash = file_hash(teacher_path)
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    fh, log = _log_writer(out / "train_log.jsonl")
    with fh:
        student, reports = distill_student(ds, teacher, cfg, seed=seed, on_step=log)
    if file_hash(teacher_path) != teacher_hash:  # pragma: no cover - freeze contract
        raise RgbdSalError("teacher checkpoint changed during distillation")
    student.save(out / "student.ckpt", "student", {"seed": seed, "modality": "depth"})
    _write_manifest(out, args, cfg, seed, {"data": args.data, "teacher": teacher_path}, ["student.ckpt", "train_log.jsonl"])
    return {"checkpoint": str(out / "student.ckpt"), "final_loss": reports[-1].total if reports else None}


def _fusion_inputs(args, cfg):
    teacher = student = None
    inputs = {}
    if args.init in ("RD-B", "RD-C"):
        p = _need(args.teacher, "train-teacher", "teacher")
        teacher = _load_stream(p, cfg, "teacher")
        inputs["teacher"] = p
    if args.init == "RD-C":
        p = _need(args.student, "distill", "student")
        student = _load_stream(p, cfg, "student")
        inputs["student"] = p
    return teacher, student, inputs


def cmd_train_fusion(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    variant = args.variant or cfg.variant
    teacher, student, inputs = _fusion_inputs(args, cfg)
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    fh, log = _log_writer(out / "train_log.jsonl")
    with fh:
        net, reports = train_fusion(ds, args.init, cfg, teacher, student, seed=seed, variant=variant, on_step=log)
    net.save(out / "fusion.ckpt", {"seed": seed, "init": args.init})
    inputs["data"] = args.data
    _write_manifest(out, args, cfg, seed, inputs, ["fusion.ckpt", "train_log.jsonl"])
    return {"checkpoint": str(out / "fusion.ckpt"), "variant": variant, "final_loss": reports[-1].total if reports else None}


def _save_maps(maps, out):
    for sid, m in maps.items():
        img = np.round(np.clip(m, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="L").save(out / f"{sid}.png")
    return [f"{sid}.png" for sid in maps]


def cmd_predict(args):
    cfg = _config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint {ckpt} not found")
    _, header = load_checkpoint(ckpt)
    kind = header["kind"]
    mode = args.mode or kind
    if mode != kind:
        raise ConfigError(f"{ckpt} holds a {kind!r} network but --mode is {mode!r}")
    ds = _dataset(args.data, split="test")
    out = _out_dir(args.out)
    if kind == "fusion":
        net, _ = FusionNet.load(ckpt, cfg.network)
        maps = predict_fusion(net, ds)
    elif kind in ("teacher", "student"):
        stream = _load_stream(ckpt, cfg)
        modality = args.modality or header["meta"].get("modality", "rgb" if kind == "teacher" else "depth")
        x, _ = D.batch(ds.samples, modality)
        maps = {s.id: m for s, m in zip(ds.samples, stream.predict(x))}
    else:
        raise ConfigError(f"{ckpt}: unsupported checkpoint kind {kind!r}")
    names = _save_maps(maps, out)
    _write_manifest(out, args, cfg, None, {"checkpoint": ckpt, "data": args.data}, names)
    return {"maps": len(names), "out": str(out)}


def _read_maps(pred_dir):
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} not found")
    maps = {}
    for p in sorted(pred_dir.glob("*.png")):
        try:
            with Image.open(p) as im:
                a = np.array(im.convert("L"), dtype=np.float64)
        except OSError as exc:
            raise DataError(f"cannot read prediction {p}: {exc}") from exc
        maps[p.stem] = a / 255.0
    return maps


def _read_gt(gt_dir):
    gt_dir = Path(gt_dir)
    if (gt_dir / "gt").is_dir():
        gt_dir = gt_dir / "gt"
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory {gt_dir} not found")
    masks = {}
    for p in sorted(gt_dir.glob("*.png")):
        try:
            with Image.open(p) as im:
                masks[p.stem] = (np.array(im.convert("L")) > 127).astype(np.uint8)
        except OSError as exc:
            raise DataError(f"cannot read mask {p}: {exc}") from exc
    return masks


def cmd_eval(args):
    out = _out_dir(args.out)
    report = evaluate(_read_maps(args.pred), _read_gt(args.gt), args.beta2)
    report.write(out / "report.jsonl", out / "pr_curve.tsv")
    args.set = []
    _write_manifest(out, args, None, None, {"pred": args.pred, "gt": args.gt}, ["report.jsonl", "pr_curve.tsv"])
    return report.summary()


def cmd_ablate(args):
    cfg = _config(args)
    seed = _seed(args, cfg)
    teacher, student, inputs = _fusion_inputs(args, cfg)
    train = _dataset(args.data)
    test = _dataset(args.test, split="test")
    if not test.labeled:
        raise DataError(f"{args.test}: ablation test set needs ground truth")
    gts = {s.id: s.gt for s in test}
    out = _out_dir(args.out)
    rows, artifacts = [], []
    for variant in args.variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        fh, log = _log_writer(out / f"{variant}.log.jsonl")
        with fh:
            net, _ = train_fusion(train, args.init, cfg, teacher, student, seed=seed, variant=variant, on_step=log)
        net.save(out / f"{variant}.ckpt", {"seed": seed, "init": args.init})
        rep = evaluate(predict_fusion(net, test), gts)
        rows.append({"variant": variant, **{k: rep.summary()[k] for k in ("max_f", "mean_f", "mae")}})
        artifacts += [f"{variant}.ckpt", f"{variant}.log.jsonl"]
    lines = ["variant\tmax_f\tmean_f\tmae"] + [f"{r['variant']}\t{r['max_f']:.6f}\t{r['mean_f']:.6f}\t{r['mae']:.6f}" for r in rows]
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    inputs.update({"data": args.data, "test": args.test})
    _write_manifest(out, args, cfg, seed, inputs, artifacts + ["ablation.tsv"])
    return {"rows": rows}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="rgbdsal", description="Desk-scale RGB-D saliency pipeline.")
    p.add_argument("--version", action="version", version=f"rgbdsal {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", default="toy", help="preset name or YAML path (default: toy)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        return sp

    g = common(sub.add_parser("generate", help="write a synthetic RGB-D dataset"))
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--cue-mode", default="joint", choices=D.CUE_MODES)
    g.add_argument("--split", default="train", choices=("train", "test"))
    g.add_argument("--unlabeled", action="store_true", help="omit ground-truth masks")

    t = common(sub.add_parser("train-teacher", help="stage 1: RGB teacher"))
    t.add_argument("--data", required=True)

    d = common(sub.add_parser("distill", help="stage 2: depth student from a frozen teacher"))
    d.add_argument("--data", required=True)
    d.add_argument("--teacher", required=True)

    def fusion_args(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--init", default="RD-C", choices=INIT_MODES)
        sp.add_argument("--teacher")
        sp.add_argument("--student")
        return sp

    f = fusion_args(common(sub.add_parser("train-fusion", help="stage 3: RGB-D fusion network")))
    f.add_argument("--variant", choices=sorted(VARIANTS))

    pr = common(sub.add_parser("predict", help="export saliency maps as PNG"))
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--mode", choices=("teacher", "student", "fusion"))
    pr.add_argument("--modality", choices=("rgb", "depth"), help="input fed to a single-stream checkpoint")

    e = common(sub.add_parser("eval", help="score exported maps against masks"), config=False)
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="mask directory or dataset root containing gt/")
    e.add_argument("--beta2", type=float, default=BETA2)

    a = fusion_args(common(sub.add_parser("ablate", help="train and compare fusion variants")))
    a.add_argument("--test", required=True)
    a.add_argument("--variants", nargs="+", default=["f3b", "f3c_no_branch", "f3c", "f3c_no_transition"])
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-fusion": cmd_train_fusion,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; choose one of " + ", ".join(COMMANDS))
        result = COMMANDS[args.command](args)
    except RgbdSalError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"error[E_IO]: {exc}", file=sys.stderr)
        return 7
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
