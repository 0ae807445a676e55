"""Command-line entry point.

    fsrfer prepare-data --out runs [--root DATASET] [--scales 2..8] [--canonical 100]
    fsrfer train-fer    --data runs/prepare-data-* --out runs
    fsrfer train-fsr    --fer-checkpoint runs/train-fer-*/fer.ckpt --data ... --out runs
    fsrfer eval         --fer-checkpoint ... [--fsr-checkpoint [label=]path ...] --data ... --out runs
    fsrfer report       --eval runs/eval-*/ [--logs off.jsonl on.jsonl] --out runs

Every subcommand accepts ``--config file.toml``, ``--profile smoke|paper``,
``--seed`` and generic ``--section.key value`` overrides. Exit codes:
0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__
from .backbone import FerArch, FerTrainConfig, TrainingError, load_fer, train_fer
from .config import ConfigError, RunConfig, parse_config
from .data import DatasetError, class_names, load_dataset, write_classes, write_image
from .evaluation import (EvalMethod, ScaleReport, build_report, convergence_compare, final_smoothed,
                         read_log, render_table, write_report)
from .features import add_restored, build_bank
from .gan import FsrArch, GanConfig, load_fsr, train_fsr

log = logging.getLogger("fsrfer")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--profile", choices=["smoke", "paper"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="parent directory for the run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsrfer", description="Feature super-resolution for low-resolution FER.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="canonicalize (or synthesize) a dataset")
    _common(p)
    p.add_argument("--root", help="dataset root with <split>/<class>/ images; omit to synthesize")
    p.add_argument("--scales")
    p.add_argument("--canonical", type=int)
    p.add_argument("--n-per-class", type=int)

    p = sub.add_parser("train-fer", help="train the fixed FER backbone on HR images")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--embed-dim", type=int)

    p = sub.add_parser("train-fsr", help="train the feature generator and critic")
    _common(p)
    p.add_argument("--fer-checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scales")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--reweight", choices=["on", "off"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--r", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("eval", help="per-scale accuracy report")
    _common(p)
    p.add_argument("--fer-checkpoint", required=True)
    p.add_argument("--fsr-checkpoint", action="append", default=[],
                   help="[label=]path; repeat to compare several generators")
    p.add_argument("--methods")
    p.add_argument("--scales")
    p.add_argument("--data", required=True)
    p.add_argument("--restored-dir", help="restored images laid out as <dir>/x<s>/<class>/<file>")

    p = sub.add_parser("report", help="render tables, figures and convergence comparison")
    _common(p)
    p.add_argument("--eval", required=True, dest="eval_dir", help="eval run directory or report.json")
    p.add_argument("--logs", nargs=2, metavar=("LOG_A", "LOG_B"),
                   help="training logs to compare (A = baseline, B = candidate)")
    p.add_argument("--labels", nargs=2, default=["A", "B"])
    return parser


_FLAG_KEYS = {
    "prepare-data": {"root": "data.root", "scales": "data.scales", "canonical": "data.canonical",
                     "n_per_class": "data.n_per_class"},
    "train-fer": {"epochs": "fer.epochs", "lr": "fer.lr", "embed_dim": "fer.embed_dim"},
    "train-fsr": {"scales": "data.scales", "iters": "fsr.iters", "batch": "fsr.batch_size",
                  "reweight": "fsr.reweight", "sigma": "fsr.sigma", "r": "fsr.r", "k": "fsr.k",
                  "p": "fsr.p", "lr": "fsr.lr"},
    "eval": {"methods": "eval.methods", "scales": "data.scales", "restored_dir": "eval.restored_dir"},
    "report": {},
}


def _generic_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def resolve_config(args: argparse.Namespace, extra: list[str]) -> RunConfig:
    overrides = []
    for attr, key in _FLAG_KEYS[args.command].items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append((key, value))
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    overrides += _generic_overrides(extra)
    return parse_config(args.config, overrides, profile=args.profile)


def make_run_dir(parent: str | Path, command: str) -> Path:
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    base = f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path, n = parent / base, 1
    while path.exists():
        path = parent / f"{base}-{n}"
        n += 1
    path.mkdir()
    return path


def dataset_root(data: str | Path) -> Path:
    """Accept a prepare-data run directory or a bare dataset root."""
    data = Path(data)
    if (data / "dataset").is_dir():
        return data / "dataset"
    if not data.is_dir():
        raise FileNotFoundError(f"data directory {data} does not exist; run prepare-data first")
    return data


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _fer_arch(cfg: RunConfig) -> FerArch:
    f = cfg.fer
    return FerArch(canonical=cfg.data.canonical, conv_channels=f.conv_channels, spd_dim=f.spd_dim,
                   spd_layers=f.spd_layers, embed_dim=f.embed_dim, reeig_eps=f.reeig_eps,
                   cov_reg=f.cov_reg, cov_floor=f.cov_floor)


def _gan_parts(cfg: RunConfig, feature_dim: int) -> tuple[FsrArch, GanConfig]:
    f = cfg.fsr
    arch = FsrArch(feature_dim=feature_dim, channels=f.channels, growth=f.growth, blocks=f.blocks,
                   res_scale=f.res_scale, critic_channels=f.critic_channels)
    gan = GanConfig(k=f.k, p=f.p, sigma=f.sigma, r=f.r, lr=f.lr, beta1=f.beta1, beta2=f.beta2,
                    lr_halving_iters=list(f.lr_halving_iters), batch_size=f.batch_size,
                    critic_steps=f.critic_steps, w_gan=f.w_gan, w_perceptual=f.w_perceptual,
                    w_l2=f.w_l2, reweight=f.reweight, flip_sign=f.flip_sign, iters=f.iters,
                    val_every=f.val_every, log_every=f.log_every, seed=cfg.seed)
    return arch, gan


def _require(path: str | Path, hint: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path} not found; {hint}")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare_data(args, cfg: RunConfig, run: Path) -> None:
    from .plotting import plot_degradation
    from .synthetic import generate_synthetic_dataset

    out = run / "dataset"
    if cfg.data.root:
        src = Path(cfg.data.root)
        names = class_names(src, "train")
        for split in ("train", "val"):
            for img in load_dataset(src, split, cfg.data.canonical):
                dest = out / img.id
                dest.parent.mkdir(parents=True, exist_ok=True)
                write_image(dest.with_suffix(".png"), img.pixels)
    else:
        generate_synthetic_dataset(cfg.data.n_per_class, cfg.seed, out)
        names = class_names(out, "train")
    write_classes(run / "classes.txt", names)
    counts = {split: len(load_dataset(out, split, cfg.data.canonical)) for split in ("train", "val")}
    (run / "manifest.json").write_text(json.dumps(
        {"classes": names, "counts": counts, "scales": cfg.data.scales,
         "canonical": cfg.data.canonical, "source": cfg.data.root or "synthetic"},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")
    first = load_dataset(out, "val", cfg.data.canonical)[:1]
    if first:
        plot_degradation(first[0], run / "degradation.png", cfg.data.scales)
    print(f"dataset: {counts['train']} train / {counts['val']} val images in {out}")


def cmd_train_fer(args, cfg: RunConfig, run: Path) -> None:
    root = dataset_root(args.data)
    train = load_dataset(root, "train", cfg.data.canonical)
    val = load_dataset(root, "val", cfg.data.canonical)
    f = cfg.fer
    tcfg = FerTrainConfig(epochs=f.epochs, lr=f.lr, beta1=f.beta1, beta2=f.beta2, batch_size=f.batch_size,
                          patience=f.patience, augment=f.augment, seed=cfg.seed)
    history: list = []
    model = train_fer(train, val, _fer_arch(cfg), tcfg, checkpoint=run / "fer.ckpt", history=history)
    with open(run / "fer_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    best = max(r["val_acc"] for r in history) if history else float("nan")
    print(f"FER trained: best HR val accuracy {100 * best:.3f}% "
          f"(BiMap orthonormality error {model.orthonormality_error():.2e})")


def _banks(fer, root: Path, cfg: RunConfig, splits=("train", "val")):
    return {split: build_bank(fer, load_dataset(root, split, cfg.data.canonical), cfg.data.scales)
            for split in splits}


def cmd_train_fsr(args, cfg: RunConfig, run: Path) -> None:
    from .plotting import plot_training

    fer = load_fer(_require(args.fer_checkpoint, "run train-fer first"))
    root = dataset_root(args.data)
    banks = _banks(fer, root, cfg)
    arch, gan = _gan_parts(cfg, fer.arch.spd_dim)
    fsr = train_fsr(fer, banks["train"], banks["val"], arch, gan, out_dir=run,
                    config_echo={"fer_checkpoint": str(args.fer_checkpoint)})
    plot_training(read_log(run / "train_log.jsonl"), run / "training.png",
                  label=f"re-weighting {'on' if gan.reweight else 'off'}")
    print(f"FSR trained: best mean val accuracy {100 * fsr.best_val_acc:.3f}%")


def _load_restored(bank, fer, restored_dir: Path, root: Path, cfg: RunConfig) -> None:
    """Map ``<dir>/x<s>/<class>/<file>`` onto the val bank's order."""
    from .data import read_image, to_canonical, LabeledImage

    for s in cfg.data.scales:
        sdir = restored_dir / f"x{s}"
        if not sdir.is_dir():
            log.warning("no restored images for x%d in %s", s, restored_dir)
            continue
        images = []
        for img_id, label in zip(bank.ids, bank.labels.tolist()):
            _, cls, fname = img_id.split("/", 2)
            stem = Path(fname).stem
            hits = sorted((sdir / cls).glob(stem + ".*"))
            if not hits:
                raise DatasetError(f"restored image for {img_id} missing under {sdir}")
            px = to_canonical(read_image(hits[0]), cfg.data.canonical)
            images.append(LabeledImage(px, label, img_id))
        add_restored(bank, fer, s, images)


def cmd_eval(args, cfg: RunConfig, run: Path) -> None:
    from .plotting import plot_curves

    fer = load_fer(_require(args.fer_checkpoint, "run train-fer first"))
    root = dataset_root(args.data)
    bank = _banks(fer, root, cfg, splits=("val",))["val"]
    methods = []
    for name in cfg.eval.methods:
        if name == "fsr-fer":
            if not args.fsr_checkpoint:
                raise UsageError("method fsr-fer needs --fsr-checkpoint; run train-fsr first")
            for spec in args.fsr_checkpoint:
                label, _, path = spec.rpartition("=")
                fsr = load_fsr(_require(path, "run train-fsr first"))
                row = f"fsr-fer:{label}" if label else "fsr-fer"
                methods.append(EvalMethod("fsr-fer", fsr, row))
        elif name == "restored-images":
            if not cfg.eval.restored_dir:
                raise UsageError("method restored-images needs --restored-dir")
            _load_restored(bank, fer, Path(cfg.eval.restored_dir), root, cfg)
            methods.append(EvalMethod(name))
        else:
            methods.append(EvalMethod(name))
    report = build_report(methods, cfg.data.scales, bank, fer, config=cfg.to_dict(), seed=cfg.seed)
    write_report(report, run)
    plot_curves(report, run / "accuracy.png")
    sys.stdout.write(render_table(report))


def cmd_report(args, cfg: RunConfig, run: Path) -> None:
    from .plotting import plot_curves, plot_training

    src = Path(args.eval_dir)
    src = src / "report.json" if src.is_dir() else src
    report = ScaleReport.from_dict(json.loads(_require(src, "run eval first").read_text(encoding="utf-8")))
    write_report(report, run)
    plot_curves(report, run / "accuracy.png")
    text = render_table(report)
    if args.logs:
        log_a, log_b = (_require(p, "run train-fsr first") for p in args.logs)
        target = final_smoothed(log_a)
        conv = convergence_compare(log_a, log_b, target)
        summary = {"labels": args.labels, "logs": [str(log_a), str(log_b)], **asdict(conv)}
        (run / "convergence.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
        line = f"convergence ({args.labels[0]} -> {args.labels[1]}): {conv.describe()}\n"
        (run / "convergence.txt").write_text(line, encoding="utf-8")
        for lb, path in zip(args.labels, (log_a, log_b)):
            plot_training(read_log(path), run / f"training_{lb}.png", label=lb)
        text += line
    sys.stdout.write(text)


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-fer": cmd_train_fer,
    "train-fsr": cmd_train_fsr,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        cfg = resolve_config(args, extra)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    print("resolved config:\n" + cfg.dumps(), end="")
    _seed_everything(cfg.seed)
    run = make_run_dir(args.out, args.command)
    (run / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    print(f"run directory: {run}")
    try:
        COMMANDS[args.command](args, cfg, run)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        shutil.rmtree(run, ignore_errors=True)
        return EXIT_USAGE
    except (TrainingError, DatasetError, ValueError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
