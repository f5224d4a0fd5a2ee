"""``sernet`` command line: train, eval, ablate, gradcheck, params, synth.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .ablation import ablation_csv, per_seed_csv, run_ablation
from .config import RunConfig, apply_overrides, dump_config, load_config
from .data import iterate, load_manifest, load_palette, synth_dataset, write_dataset
from .errors import ConfigError, DataError, SernetError
from .gradcheck import run_suite
from .metrics import mean_iou, report_csv
from .model import OUTPUT_STRIDE, build, load_checkpoint, param_breakdown, param_count, save_checkpoint
from .training import ClassWeights, class_weights_from_frequency, evaluate, history_csv, train

# explicit flags that map onto config keys
_FLAG_KEYS = {
    "seed": "run.seed",
    "out": "run.out",
    "epochs": "optim.epochs",
    "lr": "optim.lr",
    "batch_size": "optim.batch_size",
    "width_mult": "model.width_mult",
    "classes": "model.num_classes",
    "manifest": "data.manifest",
}


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for dest, key in _FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            overrides[key] = str(v)
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _class_names(cfg: RunConfig) -> list[str]:
    if cfg.data.palette:
        names = load_palette(cfg.data.palette).class_names
        if len(names) != cfg.model.num_classes:
            raise ConfigError(f"palette has {len(names)} classes but model.num_classes={cfg.model.num_classes}")
        return names
    return [f"class{i}" for i in range(cfg.model.num_classes)]


def _check_geometry(samples, split):
    for s in samples:
        h, w = s.image.shape[2:]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise DataError(f"{split} sample {s.id}: {h}x{w} is not a multiple of {OUTPUT_STRIDE}; resize the dataset first")


def _load_split(cfg: RunConfig, split: str) -> list:
    """Samples of ``split`` from the manifest, or synthesized from the run seed."""
    if cfg.data.manifest:
        manifest = load_manifest(cfg.data.manifest)
        palette = load_palette(cfg.data.palette) if cfg.data.palette else None
        samples = list(iterate(manifest, split, cfg.sub_seed("data_order"), palette))
    else:
        h, w = cfg.model.input_hw
        n = {"train": cfg.data.synth_train, "val": cfg.data.synth_val}.get(split, 0)
        offset = cfg.data.synth_train if split == "val" else 0
        samples = synth_dataset(cfg.sub_seed("synth"), n, h, w, cfg.model.num_classes, offset=offset)
    for s in samples:
        s.validate(cfg.model.num_classes)
    _check_geometry(samples, split)
    return samples


def _weights(cfg: RunConfig, samples) -> ClassWeights:
    if cfg.optim.class_weighting == "uniform":
        return ClassWeights.uniform(cfg.model.num_classes)
    return class_weights_from_frequency((s.labels for s in samples), cfg.model.num_classes, method=cfg.optim.class_weighting)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg))
    return out


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    train_set = _load_split(cfg, "train")
    val_set = _load_split(cfg, "val")
    if not train_set:
        raise DataError("training split is empty")
    names = _class_names(cfg)
    out = _out_dir(cfg)
    model = build(cfg.model_config())
    o = cfg.optim
    history = train(
        model,
        train_set,
        epochs=o.epochs,
        batch_size=o.batch_size,
        lr=o.lr,
        momentum=o.momentum,
        l2=o.l2,
        milestones=o.milestones,
        gamma=o.gamma,
        seed=cfg.sub_seed("train"),
        class_weights=_weights(cfg, train_set),
        hflip=o.hflip,
    )
    (out / "history.csv").write_text(history_csv(history))
    save_checkpoint(model, out / "model.serk")
    cm = evaluate(model, train_set)
    (out / "report.csv").write_text(report_csv(cm, names))
    print(f"train mIoU {mean_iou(cm):.6f}")
    if val_set:
        cm_val = evaluate(model, val_set)
        (out / "report_val.csv").write_text(report_csv(cm_val, names))
        print(f"val mIoU {mean_iou(cm_val):.6f}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    samples = _load_split(cfg, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    model = build(cfg.model_config())
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "model.serk"
    load_checkpoint(model, ckpt)
    text = report_csv(evaluate(model, samples), _class_names(cfg))
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    train_set = _load_split(cfg, "train")
    val_set = _load_split(cfg, "val")
    if not train_set or not val_set:
        raise DataError("ablation needs non-empty train and val splits")
    out = _out_dir(cfg)
    o = cfg.optim
    rows = run_ablation(
        cfg.model_config(),
        train_set,
        val_set,
        seeds=cfg.ablate.seeds,
        root_seed=cfg.seed,
        class_weighting=o.class_weighting,
        epochs=o.epochs,
        batch_size=o.batch_size,
        lr=o.lr,
        momentum=o.momentum,
        l2=o.l2,
        milestones=o.milestones,
        gamma=o.gamma,
        hflip=o.hflip,
    )
    table = ablation_csv(rows)
    (out / "ablation.csv").write_text(table)
    (out / "ablation_runs.csv").write_text(per_seed_csv(rows, cfg.ablate.seeds))
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed or 0, include_model=not args.skip_model)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_err={r.max_error:.3e}  tol={r.tolerance:g}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print("gradient check failed for: " + ", ".join(failed), file=sys.stderr)
        return 3
    print(f"all {len(results)} checks within tolerance")
    return 0


def cmd_params(args) -> int:
    cfg = _resolve_config(args)
    model = build(cfg.model_config())
    for group, n in param_breakdown(model).items():
        print(f"{group:<10} {n:>12,d}")
    total = param_count(model)
    print(f"{'total':<10} {total:>12,d}  ({total / 1e6:.2f}M)")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out or "synth")
    splits = {
        "train": synth_dataset(args.seed or 0, args.train, args.size, args.size, args.classes),
        "val": synth_dataset(args.seed or 0, args.val, args.size, args.size, args.classes, offset=args.train),
    }
    manifest = write_dataset(out, {k: v for k, v in splits.items() if v})
    print(f"wrote {sum(map(len, splits.values()))} samples and {manifest}")
    return 0


# ------------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="root 64-bit seed (run.seed)")
    p.add_argument("--out", help="output directory (run.out)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    p.add_argument("--width-mult", type=float, dest="width_mult")
    p.add_argument("--classes", type=int)
    p.add_argument("--manifest")
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int, dest="batch_size")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sernet", description="Attention-boosted encoder-decoder segmentation")
    ap.add_argument("--version", action="version", version=f"sernet {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, history and reports")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class IoU report for a checkpoint")
    _add_common(p, training=False)
    p.add_argument("--checkpoint", help="defaults to <out>/model.serk")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--report", help="also write the CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full model against each single-toggle drop")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--seed", type=int)
    p.add_argument("--skip-model", action="store_true", help="skip the micro full-model case")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="learnable parameter count with per-group breakdown")
    _add_common(p, training=False)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write a synthetic PPM/PGM dataset with a manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors are 1 here
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except SernetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # e.g. synth_scene argument checks
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
