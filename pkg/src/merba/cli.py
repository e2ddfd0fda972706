"""Command-line entry point: ``merba <command> [flags]``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 when
a numerical check fails or training diverges.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from .tensor import ShapeError, default_dtype
from .tensor.mert import MertError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
SCAN_CHOICES = ("a", "b", "c", "d", "a_bi", "a_sy", "b_bi", "b_sy")

log = logging.getLogger("merba")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2, which is reserved here for numerical failures
    def error(self, message):
        raise UsageError(message)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _common():
    p = _Parser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--config", default="default",
                   help="preset name (default, mini, tiny, mmew, three; join with +) or JSON file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one dotted config key; repeatable")
    g.add_argument("--seed", type=int, default=0, help="seed for weights, data and shuffling")
    g.add_argument("--out", default="runs", help="parent directory for run directories")
    g.add_argument("--dtype", choices=("f32", "f64"), default="f32", help="floating-point width")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="merba", description="Micro-expression recognition with a "
                     "multi-scan state-space backbone and coarse-to-fine head.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_,
                              formatter_class=_Formatter)

    p = add("scan", "print a window scan order")
    p.add_argument("--direction", choices=SCAN_CHOICES, default="a", help="scan order")
    p.add_argument("--height", type=int, default=7, help="window rows")
    p.add_argument("--width", type=int, default=7, help="window columns")
    p.add_argument("--grid", action="store_true", help="print the step number of every cell")
    p.add_argument("--plot", action="store_true", help="also draw the order to scan.png")

    add("shapes", "print the per-stage shape trace (no weights are built)")

    p = add("paramcount", "print total and per-module parameter counts")
    p.add_argument("--csv", action="store_true", help="also write params.csv to a run directory")

    p = add("synth", "write a synthetic flow dataset")
    p.add_argument("--kind", choices=("three", "seven"), default="seven",
                   help="3-class separable set or 7-class set with confusable negatives")
    p.add_argument("--n-per-class", type=int, default=16, help="samples per class")
    p.add_argument("--subjects", type=int, default=8, help="distinct subject ids")
    p.add_argument("--noise", type=float, default=None,
                   help="flow noise std (default: 0 for three, 0.3 for seven)")
    p.add_argument("--angle-gap", type=float, default=25.0,
                   help="degrees between negative subclasses (seven only)")

    p = add("train", "train a classifier and write log, checkpoint and report")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--no-val", action="store_true",
                   help="train on everything; no validation slice or early stopping")

    p = add("eval", "evaluate a checkpoint, or score a predictions CSV")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--predictions", default=None,
                   help="CSV with columns truth,pred (label names or indices)")

    p = add("saliency", "activation map of one sample")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint directory (default: untrained model from --config)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--index", type=int, default=0, help="sample index")
    p.add_argument("--target", default=None, help="label to explain (default: ground truth)")

    p = add("gradcheck", "float64 finite-difference checks of blocks and a tiny model")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    p.add_argument("--max-entries", type=int, default=8,
                   help="entries probed per parameter tensor")
    return parser


# ---- helpers ----------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args):
    exp = cfgmod.load_config(args.config)
    flat = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        flat[key.strip()] = _parse_value(value)
    flat["train.seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        flat["train.epochs"] = args.epochs
    return cfgmod.from_flat(flat, exp)


def _echo(args, exp):
    """The fully resolved configuration goes to stderr so stdout stays parseable."""
    flags = {k: v for k, v in vars(args).items() if k not in ("set",)}
    print("# flags " + json.dumps(flags, sort_keys=True), file=sys.stderr)
    print("# config " + json.dumps(cfgmod.to_flat(exp), sort_keys=True), file=sys.stderr)


def make_run_dir(args):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(args.out, f"{stamp}-{args.command}-seed{args.seed}")
    n = 1
    while os.path.exists(path):
        n += 1
        path = os.path.join(args.out, f"{stamp}-{args.command}-seed{args.seed}-{n}")
    os.makedirs(path)
    print(f"# run directory {path}", file=sys.stderr)
    return path


def _write_run_config(run, args, exp):
    cfgmod.dump_config(exp, os.path.join(run, "config.json"))
    with open(os.path.join(run, "flags.json"), "w") as fh:
        json.dump({k: v for k, v in vars(args).items()}, fh, indent=2, sort_keys=True)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _report_dict(rep):
    return {"uf1": rep.uf1, "uar": rep.uar, "acc": rep.acc,
            "per_class": {name: {"precision": float(p), "recall": float(r), "f1": float(f)}
                          for name, p, r, f in zip(rep.labels, rep.precision, rep.recall, rep.f1)}}


def _print_report(rep):
    print(f"uf1,{rep.uf1:.6f}")
    print(f"uar,{rep.uar:.6f}")
    print(f"acc,{rep.acc:.6f}")


def _save_report(run, rep, stem):
    from .plotting import plot_confusion
    rep.write_confusion_csv(os.path.join(run, f"{stem}_confusion.csv"))
    _write_json(os.path.join(run, f"{stem}_report.json"), _report_dict(rep))
    plot_confusion(rep, os.path.join(run, f"{stem}_confusion.png"))


# ---- commands ---------------------------------------------------------------

def cmd_scan(args, exp):
    from .scan import build_permutation, step_grid
    if args.height < 1 or args.width < 1:
        raise UsageError("--height and --width must be positive")
    perm = build_permutation(args.direction, args.height, args.width)
    if args.grid:
        width = len(str(perm.length - 1))
        for row in step_grid(perm):
            print(" ".join(f"{v:>{width}d}" for v in row))
    else:
        print(",".join(str(i) for i in perm.order))
    if args.plot:
        from .plotting import plot_scan_grid
        run = make_run_dir(args)
        plot_scan_grid(perm, os.path.join(run, "scan.png"),
                       f"{args.direction} on {args.height}x{args.width}")
    return EXIT_OK


def cmd_shapes(args, exp):
    from .model import format_trace, shape_trace
    rows, out_shape = shape_trace(exp.model)
    for line in format_trace(rows):
        print(line)
    print("features: " + "x".join(str(n) for n in out_shape))
    return EXIT_OK


def cmd_paramcount(args, exp):
    from .model import param_report
    lines = param_report(exp)
    for row in lines:
        print(",".join(row))
    if args.csv:
        run = make_run_dir(args)
        with open(os.path.join(run, "params.csv"), "w", newline="") as fh:
            csv.writer(fh).writerows(lines)
    return EXIT_OK


def cmd_synth(args, exp):
    from .dgcm import LabelSpace
    from .synth import seven_class_spec, synth_dataset, three_class_spec
    from .train import Dataset, save_dataset
    if args.n_per_class < 1 or args.subjects < 1:
        raise UsageError("--n-per-class and --subjects must be positive")
    extent = exp.model.input_size
    if args.kind == "three":
        spec = three_class_spec(extent, noise=args.noise or 0.0)
    else:
        noise = 0.3 if args.noise is None else args.noise
        spec = seven_class_spec(extent, angle_gap=math.radians(args.angle_gap), noise=noise)
    space = LabelSpace.from_config(exp.labels)
    if set(spec.labels) != set(space.full):
        raise UsageError(f"{args.kind}-class labels {list(spec.labels)} do not match the "
                         f"configured label set {list(space.full)}; pick a matching --config")
    samples = synth_dataset(spec, args.n_per_class, np.random.default_rng(args.seed),
                            n_subjects=args.subjects)
    run = make_run_dir(args)
    _write_run_config(run, args, exp)
    path = os.path.join(run, "data")
    save_dataset(path, Dataset.from_samples(samples, space))
    print(f"dataset,{path}")
    print(f"samples,{len(samples)}")
    return EXIT_OK


def cmd_train(args, exp):
    from .dgcm import LabelSpace
    from .model import build_classifier, save_checkpoint
    from .plotting import plot_training_log
    from .splits import holdout_subjects
    from .train import evaluate, load_dataset, train, write_log_csv
    space = LabelSpace.from_config(exp.labels)
    data = load_dataset(args.data, space)
    if data.x.shape[1:3] != (exp.model.input_size,) * 2:
        raise UsageError(f"data extent {data.x.shape[1]} does not match model.input_size "
                         f"{exp.model.input_size}")
    val = None
    if not args.no_val:
        tr_idx, val_idx = holdout_subjects(data.subjects, exp.train.val_fraction, exp.train.seed)
        if len(val_idx):
            data, val = data.subset(tr_idx), data.subset(val_idx)
        else:
            log.warning("too few subjects for a %.0f%% validation slice; training without one",
                        100 * exp.train.val_fraction)
    run = make_run_dir(args)
    _write_run_config(run, args, exp)
    model = build_classifier(exp, seed=args.seed)
    result = train(model, data, exp.train, val=val)
    write_log_csv(os.path.join(run, "log.csv"), result.log)
    plot_training_log(result.log, os.path.join(run, "loss.png"))
    save_checkpoint(os.path.join(run, "checkpoint"), model, exp,
                    {"best_epoch": result.best_epoch, "stop_reason": result.stop_reason})
    _save_report(run, evaluate(model, data), "train")
    if val is not None:
        rep = evaluate(model, val)
        _save_report(run, rep, "val")
    else:
        rep = evaluate(model, data)
    print(f"epochs,{len(result.log)}")
    print(f"stop,{result.stop_reason}")
    _print_report(rep)
    return EXIT_OK


def _read_predictions(path, space):
    truth, pred = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"truth", "pred"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: need a header with columns truth,pred")
        for row in reader:
            truth.append(space.index(_label(row["truth"])))
            pred.append(space.index(_label(row["pred"])))
    return np.array(truth), np.array(pred)


def _label(text):
    text = text.strip()
    return int(text) if text.isdigit() else text


def cmd_eval(args, exp):
    from .dgcm import LabelSpace
    from .metrics import EvalReport
    from .model import load_checkpoint
    from .train import evaluate, load_dataset
    if args.predictions:
        if args.checkpoint or args.data:
            raise UsageError("--predictions excludes --checkpoint and --data")
        space = LabelSpace.from_config(exp.labels)
        truth, pred = _read_predictions(args.predictions, space)
        rep = EvalReport.from_predictions(truth, pred, len(space.full), space.full)
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("eval needs --checkpoint and --data, or --predictions")
        model, exp, _ = load_checkpoint(args.checkpoint)
        rep = evaluate(model, load_dataset(args.data, model.space))
    run = make_run_dir(args)
    _write_run_config(run, args, exp)
    _save_report(run, rep, "eval")
    _print_report(rep)
    return EXIT_OK


def cmd_saliency(args, exp):
    from .model import FlowTriplet, build_classifier, load_checkpoint
    from .plotting import plot_saliency
    from .saliency import grad_cam, upsample_nearest, write_pgm
    from .train import load_dataset
    if args.checkpoint:
        model, exp, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_classifier(exp, seed=args.seed)
    data = load_dataset(args.data, model.space)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} outside 0..{len(data) - 1}")
    x = data.x[args.index]
    target = _label(args.target) if args.target is not None else int(data.labels[args.index])
    res = grad_cam(model, FlowTriplet.from_array(x), target)
    run = make_run_dir(args)
    _write_run_config(run, args, exp)
    big = upsample_nearest(res.cam, x.shape[0])
    write_pgm(os.path.join(run, "cam.pgm"), big)
    write_pgm(os.path.join(run, "cam_raw.pgm"), res.cam)
    name = model.space.full[model.space.index(target)]
    plot_saliency(x[..., 2], big, os.path.join(run, "overlay.png"), f"target {name}")
    print(f"target,{name}")
    print(f"map,{res.cam.shape[0]}x{res.cam.shape[1]}")
    print(f"degenerate,{str(res.degenerate).lower()}")
    return EXIT_OK


def cmd_gradcheck(args, exp):
    from .checks import run_suite
    results = run_suite(args.seed, args.tolerance, args.max_entries)
    ok = True
    for name, rep in results:
        print(f"{name},{rep.max_error:.3e},{'pass' if rep.passed else 'FAIL'}")
        if not rep.passed:
            ok = False
            for line in rep.lines():
                log.warning("%s: %s", name, line)
    if not ok:
        raise NumericalFailure("gradient check failed")
    return EXIT_OK


COMMANDS = {"scan": cmd_scan, "shapes": cmd_shapes, "paramcount": cmd_paramcount,
            "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "saliency": cmd_saliency, "gradcheck": cmd_gradcheck}


@contextlib.contextmanager
def _thread_cap():
    cap = os.environ.get("MERBA_THREADS")
    if not cap:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(cap)):
        yield


def run(argv=None):
    """Parse ``argv`` and run one command; returns the exit status."""
    from .train import TrainingDiverged
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:      # --help
            return int(exc.code or 0)
        exp = resolve_config(args)
        _echo(args, exp)
        dtype = np.float64 if args.dtype == "f64" else np.float32
        with _thread_cap(), default_dtype(dtype):
            return COMMANDS[args.command](args, exp)
    except (TrainingDiverged, NumericalFailure, FloatingPointError) as exc:
        print(f"merba: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, KeyError, ShapeError, MertError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"merba: error: {msg}", file=sys.stderr)
        return EXIT_INVALID


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
