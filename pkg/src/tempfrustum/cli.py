"""Command-line entry point.

    tempfrustum ingest-check --root DIR
    tempfrustum synth-gen --out DIR [--synth NAME|FILE]
    tempfrustum train (--root DIR | --synth NAME|FILE) [--tau N] [--branching ob|tb|ours] ...
    tempfrustum eval --checkpoint FILE (--root DIR | --synth NAME|FILE)
    tempfrustum gradcheck
    tempfrustum export-detections --checkpoint FILE --out DIR (--root DIR | --synth NAME|FILE)

Exit status: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data.kitti import list_drives, load_drive, split_counts, write_drive
from .data.records import DriveRecord
from .data.sequences import DEFAULT_VAL_DRIVES, build_sequence_samples, class_anchors, split_train_val
from .data.synth import SynthConfig, benchmark_config, load_synth_config, synth_drives
from .evaluation import AP_MODES, ground_truth_from_drives, write_detections
from .model import ModelConfig
from .training import LossConfig, TrainConfig, config_as_text, evaluate_checkpoint, load_checkpoint, train

DEFAULT_SEED = 17
SYNTH_PRESETS = ("default", "benchmark")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _bounded(kind, lo=None, hi=None):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {kind.__name__}, got {text!r}") from None
        if lo is not None and value < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {value}")
        if hi is not None and value > hi:
            raise argparse.ArgumentTypeError(f"must be <= {hi}, got {value}")
        return value

    parse.__name__ = kind.__name__
    return parse


def _positive_float(text):
    value = _bounded(float)(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _id_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=_bounded(int, 0), default=DEFAULT_SEED, help="root random seed (default 17)")
    p.add_argument("--workers", type=_bounded(int, 1), default=1,
                   help="processes used to build samples (default 1)")
    p.add_argument("--config", type=Path, default=None,
                   help="flat key=value file of defaults; command-line flags take precedence")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--root", type=Path, default=None,
                   help="KITTI tracking root (label_02/, calib/, velodyne/); default $TFN_DATA_ROOT")
    p.add_argument("--synth", default=None,
                   help="use synthetic drives instead: 'default', 'benchmark', or a key=value config file")
    p.add_argument("--synth-drives", type=_bounded(int, 2), default=None,
                   help="number of synthetic drives (default 6, 20 for 'benchmark')")
    p.add_argument("--val-drives", type=_id_list, default=None,
                   help="comma-separated validation drive ids (default 11,15,16,18; last quarter for synthetic)")
    p.add_argument("--points", type=_bounded(int, 1), default=None,
                   help="points sampled per frustum (default 1024, 64 for synthetic data)")


def _add_model(p: argparse.ArgumentParser, for_eval: bool = False) -> None:
    p.add_argument("--tau", type=_bounded(int, 1, 64), default=None if for_eval else 3,
                   help="time steps fused by the TFM" + (" (override; default from checkpoint)" if for_eval
                                                         else " (default 3)"))
    p.add_argument("--branching", type=str.lower, choices=("ob", "tb", "ours"), default=None if for_eval else "ours",
                   help="head branching variant" + ("; must match the checkpoint" if for_eval else " (default ours)"))
    p.add_argument("--with-center", action="store_true", default=None if for_eval else False,
                   help="concatenate the T-Net center to each frame feature before the GRU")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tempfrustum", description="Frustum 3D detection with temporal feature fusion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("ingest-check", help="print per-split frame and instance counts of a data root")
    _add_common(p)
    p.add_argument("--root", type=Path, default=None, help="KITTI tracking root; default $TFN_DATA_ROOT")
    p.add_argument("--val-drives", type=_id_list, default=None,
                   help="comma-separated validation drive ids (default 11,15,16,18)")

    p = sub.add_parser("synth-gen", help="write synthetic drives in the KITTI tracking layout")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output root directory")
    p.add_argument("--synth", default="default", help="'default', 'benchmark', or a key=value config file")
    p.add_argument("--synth-drives", type=_bounded(int, 1), default=None, help="number of drives")

    p = sub.add_parser("train", help="train a detector")
    _add_common(p)
    _add_data(p)
    _add_model(p)
    p.add_argument("--out", type=Path, default=Path("runs/train"), help="run directory (default runs/train)")
    p.add_argument("--epochs", type=_bounded(int, 1), default=100, help="training epochs (default 100)")
    p.add_argument("--batch-size", type=_bounded(int, 1), default=32, help="mini-batch size (default 32)")
    p.add_argument("--lr", type=_positive_float, default=1e-3, help="Adam learning rate (default 0.001)")
    p.add_argument("--beta1", type=_bounded(float, 0.0, 0.999999), default=0.9, help="Adam beta1 (default 0.9)")
    p.add_argument("--cos-weight", type=_bounded(float, 0.0), default=0.0,
                   help="weight of the cosine feature-similarity loss; 0 disables (default 0)")
    p.add_argument("--corner-weight", type=_bounded(float, 0.0), default=0.0,
                   help="weight of the corner loss; 0 disables (default 0)")
    p.add_argument("--eval-every", type=_bounded(int, 1), default=1, help="validate every N epochs (default 1)")
    p.add_argument("--preset", choices=("full", "toy"), default=None,
                   help="layer widths: 'full' (default for --root) or 'toy' (default for --synth)")
    p.add_argument("--normalization", action="store_true", help="batch normalization after hidden layers")
    p.add_argument("--mode", choices=AP_MODES, default="eleven_point", help="AP interpolation (default eleven_point)")

    p = sub.add_parser("eval", help="evaluate a checkpoint and print the AP table")
    _add_common(p)
    _add_data(p)
    _add_model(p, for_eval=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file (.tfn)")
    p.add_argument("--mode", choices=AP_MODES, default="eleven_point", help="AP interpolation (default eleven_point)")
    p.add_argument("--out", type=Path, default=None, help="also write table.txt and table.tsv here")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a toy model")
    _add_common(p)
    p.add_argument("--configs", type=_bounded(int, 1), default=5, help="random configurations per op (default 5)")

    p = sub.add_parser("export-detections", help="write the detections of a checkpoint as KITTI-style text")
    _add_common(p)
    _add_data(p)
    _add_model(p, for_eval=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file (.tfn)")
    p.add_argument("--out", type=Path, required=True, help="output directory (one file per drive)")
    return parser


# -- config file handling ---------------------------------------------------------

def _read_config(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, _, v = line.partition("=")
        values[k.strip().replace("-", "_")] = v.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    try:
        values = _read_config(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            defaults[key] = text.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(text) if action.type else text
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{args.config}: {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{args.config}: {key}: invalid choice {value!r}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- data assembly ------------------------------------------------------------------

def _data_root(args) -> Path | None:
    if args.root is not None:
        return args.root
    env = os.environ.get("TFN_DATA_ROOT")
    return Path(env) if env else None


def _synth_drives(source: str, n: int | None, seed: int) -> list[DriveRecord]:
    if source == "benchmark":
        cfg = benchmark_config(seed)
        count = cfg.pop("num_drives")
        cfg.pop("seed")
        return synth_drives(n or count, SynthConfig(**cfg), seed=seed)
    if source == "default":
        base = SynthConfig(num_objects=4, num_frames=12, occlusion_prob=0.3)
        return synth_drives(n or 6, base, seed=seed)
    path = Path(source)
    if not path.is_file():
        raise UsageError(f"--synth expects one of {SYNTH_PRESETS} or a config file, got {source!r}")
    return synth_drives(n or 6, load_synth_config(path), seed=seed)


def load_split(args) -> tuple[list[DriveRecord], list[DriveRecord], bool]:
    """(train drives, val drives, synthetic?) for the data flags."""
    if getattr(args, "synth", None):
        drives = _synth_drives(args.synth, args.synth_drives, args.seed)
        by_id = {d.drive_id: d for d in drives}
        val_ids = args.val_drives or [d.drive_id for d in drives[-max(1, len(drives) // 4):]]
        train_d, val_d = split_train_val(by_id, val_ids)
        return list(train_d.values()), list(val_d.values()), True
    root = _data_root(args)
    if root is None:
        raise UsageError("no data: pass --root, set TFN_DATA_ROOT, or use --synth")
    if not (root / "label_02").is_dir():
        raise FileNotFoundError(f"{root} has no label_02/ directory")
    ids = list_drives(root)
    train_ids, val_ids = split_train_val(ids, args.val_drives)
    train_d = [load_drive(root, i) for i in train_ids]
    val_d = [load_drive(root, i) for i in val_ids]
    return train_d, val_d, False


def _build_one(job):
    drive, tau, n, seed, anchors = job
    return build_sequence_samples(drive, tau, n=n, seed=seed, anchors=anchors)


def build_samples(drives: Sequence[DriveRecord], tau: int, n: int, seed: int, anchors: np.ndarray,
                  workers: int = 1) -> list:
    jobs = [(d, tau, n, seed, anchors) for d in drives]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_build_one, jobs))
    else:
        parts = [_build_one(j) for j in jobs]
    return [s for part in parts for s in part]


# -- subcommands ------------------------------------------------------------------

def cmd_ingest_check(args) -> int:
    root = _data_root(args)
    if root is None:
        raise UsageError("ingest-check needs --root or TFN_DATA_ROOT")
    ids = list_drives(root)
    if not ids:
        raise FileNotFoundError(f"no label files under {root / 'label_02'}")
    train_ids, val_ids = split_train_val(ids, args.val_drives)
    for name, split in (("train", train_ids), ("val", val_ids)):
        c = split_counts(load_drive(root, i, with_clouds=False) for i in split)
        print(f"{name}: {c['frames']} frames, {c['Car']} car, {c['Pedestrian']} pedestrian, "
              f"{c['Cyclist']} cyclist ({len(split)} drives)")
    return 0


def cmd_synth_gen(args) -> int:
    drives = _synth_drives(args.synth, args.synth_drives, args.seed)
    for d in drives:
        write_drive(args.out, d)
    print(f"wrote {len(drives)} drives to {args.out}")
    return 0


def _points(args, synthetic: bool) -> int:
    return args.points or (64 if synthetic else 1024)


def cmd_train(args) -> int:
    train_d, val_d, synthetic = load_split(args)
    anchors = class_anchors(train_d)
    n = _points(args, synthetic)
    preset = args.preset or ("toy" if synthetic else "full")
    base = ModelConfig.toy() if preset == "toy" else ModelConfig()
    base = replace(base, normalization=args.normalization)
    tc = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=args.lr, beta1=args.beta1, seed=args.seed,
                     tau=args.tau, branching=args.branching, with_center_concat=args.with_center,
                     cos_weight=args.cos_weight, eval_every=args.eval_every, ap_mode=args.mode)
    train_s = build_samples(train_d, args.tau, n, args.seed, anchors, args.workers)
    val_s = build_samples(val_d, args.tau, n, args.seed, anchors, args.workers)
    print(f"{len(train_s)} training / {len(val_s)} validation samples, {n} points, {preset} widths")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "train_config.txt").write_text(config_as_text(tc) + f"points={n}\npreset={preset}\n")
    res = train(train_s, val_s, tc, base, LossConfig(corner=args.corner_weight), out_dir=args.out,
                val_frames=ground_truth_from_drives(val_d), anchors=anchors, log=print)
    print(f"best epoch {res.best_epoch}; checkpoints in {args.out}")
    return 0


def _eval_samples(args):
    model, _ = load_checkpoint(args.checkpoint)
    _, val_d, synthetic = load_split(args)
    tau = args.tau or model.cfg.tau
    samples = build_samples(val_d, tau, _points(args, synthetic), args.seed, model.cfg.anchors, args.workers)
    return samples, val_d, tau


def cmd_eval(args) -> int:
    samples, val_d, tau = _eval_samples(args)
    report = evaluate_checkpoint(args.checkpoint, samples, tau, args.branching, args.with_center,
                                 ground_truth_from_drives(val_d), args.mode)
    print(report.table, end="")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "table.txt").write_text(report.table)
        (args.out / "table.tsv").write_text(report.tsv)
    return 0


def cmd_export(args) -> int:
    samples, val_d, tau = _eval_samples(args)
    report = evaluate_checkpoint(args.checkpoint, samples, tau, args.branching, args.with_center,
                                 ground_truth_from_drives(val_d))
    calibs = {(s.drive_id, s.frame): s.calib for s in samples}
    write_detections(args.out, report.detections, calibs)
    print(f"wrote {len(report.detections)} detections to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import END_TO_END_TOLERANCE, OPS_TOLERANCE, run_suite

    res = run_suite(seed=args.seed, n_configs=args.configs)
    for name, err in res.ops.items():
        print(f"{name:32s} {err:.3e}")
    print(f"max relative error (ops): {res.max_op_error:.3e} (tolerance {OPS_TOLERANCE:g})")
    print(f"max relative error (end-to-end toy model): {res.end_to_end:.3e} (tolerance {END_TO_END_TOLERANCE:g})")
    print(f"{res.seconds:.1f} s")
    if not res.passed:
        print("FAILED: " + "; ".join(res.failures), file=sys.stderr)
        return 2
    return 0


COMMANDS = {
    "ingest-check": cmd_ingest_check,
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-detections": cmd_export,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (OSError, ValueError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
