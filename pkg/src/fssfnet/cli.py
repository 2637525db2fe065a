"""Command-line entry point: ``fssfnet <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 data/format problem, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SplitSpec,
    check_pair,
    filter_classes,
    ingest_raw,
    ingest_raw_labels,
    load_cube,
    load_labels,
    read_sidecar,
    save_cube,
    save_labels,
    split,
    synth_scene,
)
from .exceptions import ConfigurationError, FssfError, NumericalError
from .metrics import confusion, metrics, render_map
from .model import build_psc, build_sfe, load_model, save_model
from .train import DESK_EPOCHS, FULL_EPOCHS, TrainOptions, fit_scene, predict

logger = logging.getLogger("fssfnet")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class StageFailure(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (FssfError, ValueError, ArithmeticError, OSError) as exc:
        raise StageFailure(name, exc) from exc


def _threads(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def write_manifest(out, command, args, extra=None):
    """Flat ``key=value`` record of the resolved configuration."""
    items = {"command": command, "version": __version__,
             "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")}
    items.update({k: v for k, v in sorted(vars(args).items()) if k != "func"})
    items.update(extra or {})
    lines = [f"{k}={v}" for k, v in items.items()]
    (Path(out) / "manifest.txt").write_text("\n".join(lines) + "\n")


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scene(args):
    cube = _stage("load", load_cube, args.cube)
    labels = _stage("load", load_labels, args.labels)
    _stage("load", check_pair, cube, labels)
    if getattr(args, "min_class_count", None):
        labels = _stage("filter", filter_classes, labels, args.min_class_count)
    return cube, labels


def _split_spec(args, seed):
    if args.fixed_counts:
        counts = [int(c) for c in args.fixed_counts.split(",")]
        return SplitSpec("fixed", counts=counts, seed=seed)
    if args.fraction is not None:
        return SplitSpec("fraction", fraction=args.fraction, seed=seed)
    return SplitSpec("count", count=args.per_class, seed=seed)


def _epochs(args):
    pre, fine = DESK_EPOCHS if args.desk else FULL_EPOCHS
    return (pre if args.pretrain_epochs is None else args.pretrain_epochs,
            fine if args.finetune_epochs is None else args.finetune_epochs)


def _train_options(args, seed, **overrides):
    pre, fine = _epochs(args)
    kw = dict(width=args.patch_width, hidden=args.hidden, pretrain=not args.no_pretrain,
              sharing=not args.no_sharing, pretrain_epochs=pre, finetune_epochs=fine,
              seed=seed, acc_stride=args.acc_stride)
    kw.update(overrides)
    return TrainOptions(**kw)


def write_split(path, labels, train, test):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "label", "set"])
        for name, coords in (("train", train), ("test", test)):
            for r, c in coords:
                writer.writerow([r, c, labels[r, c], name])


def read_split(path, which="test"):
    coords, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["set"] == which:
                coords.append((int(row["row"]), int(row["col"])))
                labels.append(int(row["label"]))
    return np.array(coords, dtype=np.int64).reshape(-1, 2), np.array(labels, dtype=np.int64)


# -- commands ---------------------------------------------------------------

def cmd_synth(args):
    out = _outdir(args.out)
    cube, labels = _stage("synth", synth_scene, args.rows, args.cols, args.bands, args.classes,
                          args.noise, args.blob_scale, args.seed)
    save_cube(cube, out / "scene.hsc")
    save_labels(labels, out / "scene.hsl")
    write_manifest(out, "synth", args)
    print(f"wrote {out / 'scene.hsc'} and {out / 'scene.hsl'}")


def cmd_ingest(args):
    out = _outdir(args.out)
    header = _stage("ingest", read_sidecar, args.header)
    cube = _stage("ingest", ingest_raw, args.raw, header)
    save_cube(cube, out / "cube.hsc")
    if args.raw_labels:
        labels = _stage("ingest", ingest_raw_labels, args.raw_labels, cube.shape[0], cube.shape[1],
                        header.get("byteorder", "little"))
        save_labels(labels, out / "labels.hsl")
    write_manifest(out, "ingest", args)
    print(f"wrote {out / 'cube.hsc'} ({cube.shape[0]}x{cube.shape[1]}x{cube.shape[2]})")


def cmd_train(args):
    out = _outdir(args.out)
    cube, labels = _load_scene(args)
    train, test = _stage("split", split, labels, _split_spec(args, args.seed))
    options = _train_options(args, args.seed)
    with _threads(args.threads):
        model, histories = _stage("train", fit_scene, cube, labels, train, options, int(labels.max()))
    save_model(model, out / "model.fsf")
    extra = {}
    for stage, history in histories.items():
        if history is not None:
            history.to_csv(out / f"{stage}_history.csv")
            extra[f"{stage}_seconds"] = f"{history.seconds:.3f}"
    write_split(out / "split.csv", labels, train, test)
    write_manifest(out, "train", args, {"n_train": len(train), "n_test": len(test), **extra})
    print(f"trained on {len(train)} pixels; checkpoint {out / 'model.fsf'}")


def _evaluate(model, cube, coords, truth, n_classes, run_id=""):
    pred = predict(model, cube, coords)
    return metrics(confusion(pred, truth, n_classes), run_id)


def cmd_eval(args):
    out = _outdir(args.out)
    cube = _stage("load", load_cube, args.cube)
    model = _stage("load", load_model, args.checkpoint, cube.shape[2])
    split_path = args.split or Path(args.checkpoint).with_name("split.csv")
    coords, truth = _stage("load", read_split, split_path, args.set)
    with _threads(args.threads):
        report = _stage("eval", _evaluate, model, cube, coords, truth, model.n_classes, str(args.checkpoint))
    report.to_csv(out / "report.csv")
    text = report.to_text()
    (out / "report.txt").write_text(text)
    write_manifest(out, "eval", args, {"n_eval": len(coords)})
    print(text, end="")


def cmd_map(args):
    out = _outdir(args.out)
    cube = _stage("load", load_cube, args.cube)
    model = _stage("load", load_model, args.checkpoint, cube.shape[2])
    labels = None
    if args.labels:
        labels = _stage("load", load_labels, args.labels)
        _stage("load", check_pair, cube, labels)
    with _threads(args.threads):
        if args.labeled_only:
            if labels is None:
                raise StageFailure("map", ConfigurationError("--labeled-only needs --labels"))
            raster = np.zeros(labels.shape, dtype=np.int64)
            coords = np.argwhere(labels > 0)
            raster[coords[:, 0], coords[:, 1]] = _stage("predict", predict, model, cube, coords)
        else:
            raster = _stage("predict", predict, model, cube)
    render_map(raster, out / "map.ppm", labels if args.ground_truth else None)
    write_manifest(out, "map", args)
    print(f"wrote {out / 'map.ppm'}")


def param_audit(bands, classes, hidden="fcn", sharing=True, width=7):
    """Per-layer parameter rows and ``(trainable, total)`` without training."""
    rng = np.random.default_rng(0)
    copies = 1 if sharing else width * width
    rows = []
    trainable = total = 0
    for net_name, net, mult in (("sfe", build_sfe(bands, classes, hidden, rng=rng), copies),
                                ("psc", build_psc(classes, width, rng=rng), 1)):
        for layer in net.layers:
            t, n = layer.count_params()
            rows.append((net_name, layer.name, repr(layer), t * mult, n * mult))
            trainable += t * mult
            total += n * mult
    return rows, trainable, total


def cmd_params(args):
    rows, trainable, total = _stage("params", param_audit, args.bands, args.classes, args.hidden,
                                    not args.no_sharing, args.patch_width)
    copies = "" if not args.no_sharing else f" (x{args.patch_width ** 2} replicas)"
    print(f"{'net':<4} {'layer':<22} {'shape':<48} {'trainable':>10} {'total':>10}")
    for net, name, desc, t, n in rows:
        suffix = copies if net == "sfe" else ""
        print(f"{net:<4} {name:<22} {desc + suffix:<48} {t:>10,} {n:>10,}")
    print(f"trainable {trainable:,}")
    print(f"total {total:,}")
    return total


def _ablation_cells(hidden_kinds):
    for pre in (True, False):
        for share in (True, False):
            for hidden in hidden_kinds:
                yield pre, share, hidden


def run_ablation(cube, labels, split_args, seeds, hidden_kinds, options_for):
    """Train and score every (pretrain, sharing, hidden) cell for every seed.

    Returns per-run rows; failed runs carry ``status`` with the error text.
    """
    n_classes = int(labels.max())
    runs = []
    for pre, share, hidden in _ablation_cells(hidden_kinds):
        for seed in seeds:
            row = {"pretraining": "Yes" if pre else "No", "sharing": "Yes" if share else "No",
                   "hidden": hidden, "seed": seed}
            try:
                train, test = split(labels, _split_spec(split_args, seed))
                options = options_for(seed, pretrain=pre, sharing=share, hidden=hidden)
                model, _ = fit_scene(cube, labels, train, options, n_classes)
                report = _evaluate(model, cube, test, labels[test[:, 0], test[:, 1]], n_classes)
                row.update(status="ok", OA=report.oa, AA=report.aa, kappa=report.kappa)
            except (FssfError, ValueError, ArithmeticError) as exc:
                logger.warning("ablation cell %s failed: %s", row, exc)
                row.update(status=f"failed: {exc}", OA="", AA="", kappa="")
            runs.append(row)
    return runs


def summarize_ablation(runs):
    cells = {}
    for row in runs:
        cells.setdefault((row["pretraining"], row["sharing"], row["hidden"]), []).append(row)
    summary = []
    for (pre, share, hidden), rows in cells.items():
        ok = [r for r in rows if r["status"] == "ok"]
        entry = {"pretraining": pre, "sharing": share, "hidden": hidden,
                 "runs": len(rows), "failed": len(rows) - len(ok)}
        for key in ("OA", "AA", "kappa"):
            vals = np.array([r[key] for r in ok], dtype=np.float64)
            entry[f"{key}_mean"] = f"{vals.mean():.2f}" if vals.size else ""
            entry[f"{key}_std"] = f"{vals.std():.2f}" if vals.size else ""
        summary.append(entry)
    return summary


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_ablate(args):
    out = _outdir(args.out)
    cube, labels = _load_scene(args)
    seeds = [int(s) for s in args.seed_list.split(",")] if args.seed_list else list(range(args.seed, args.seed + args.seeds))
    hidden_kinds = [h.strip() for h in args.hidden_kinds.split(",")]
    for h in hidden_kinds:
        if h not in ("fcn", "lcn", "cnn"):
            raise StageFailure("ablate", ConfigurationError(f"unknown hidden kind {h!r}"))

    def options_for(seed, **kw):
        return _train_options(args, seed, **kw)

    start = time.perf_counter()
    with _threads(args.threads):
        runs = run_ablation(cube, labels, args, seeds, hidden_kinds, options_for)
    _write_rows(out / "runs.csv", runs)
    summary = summarize_ablation(runs)
    _write_rows(out / "summary.csv", summary)
    write_manifest(out, "ablate", args, {"n_runs": len(runs), "seconds": f"{time.perf_counter() - start:.1f}"})
    for row in summary:
        print(",".join(str(v) for v in row.values()))


# -- argument parsing -------------------------------------------------------

def _add_split_flags(p):
    p.add_argument("--per-class", type=int, default=50, help="training pixels per class (default 50)")
    p.add_argument("--fraction", type=float, help="training fraction per class instead of a count")
    p.add_argument("--fixed-counts", help="comma-separated training count for each class")
    p.add_argument("--min-class-count", type=int, help="drop classes with fewer labelled pixels and renumber")


def _add_training_flags(p):
    p.add_argument("--seed", type=int, default=0)
    sched = p.add_mutually_exclusive_group()
    sched.add_argument("--desk", action="store_true", help=f"scaled schedule {DESK_EPOCHS[0]}/{DESK_EPOCHS[1]} epochs")
    sched.add_argument("--paper-epochs", action="store_true",
                       help=f"full schedule {FULL_EPOCHS[0]}/{FULL_EPOCHS[1]} epochs (default)")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--no-pretrain", action="store_true")
    p.add_argument("--no-sharing", action="store_true")
    p.add_argument("--hidden", choices=("fcn", "lcn", "cnn"), default="fcn")
    p.add_argument("--patch-width", type=int, default=7)
    p.add_argument("--acc-stride", type=int, default=1, help="record training accuracy every N epochs")
    p.add_argument("--threads", type=int, default=0, help="BLAS threads (0 = library default)")


def build_parser():
    parser = argparse.ArgumentParser(prog="fssfnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--bands", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--blob-scale", type=float, default=16.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="convert a headerless raw cube to HSC1/HSL1")
    p.add_argument("--raw", required=True)
    p.add_argument("--header", required=True, help="sidecar text file with key=value lines")
    p.add_argument("--raw-labels", help="raw uint16 row-major label file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="split, pre-train, fine-tune and checkpoint")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    _add_split_flags(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a saved split")
    p.add_argument("--cube", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split.csv written by train (default: next to the checkpoint)")
    p.add_argument("--set", choices=("test", "train"), default="test")
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render a PPM classification map")
    p.add_argument("--cube", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels")
    p.add_argument("--ground-truth", action="store_true", help="append a ground-truth panel (needs --labels)")
    p.add_argument("--labeled-only", action="store_true", help="predict only labelled pixels")
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("params", help="parameter audit without training")
    p.add_argument("--bands", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--hidden", choices=("fcn", "lcn", "cnn"), default="fcn")
    p.add_argument("--no-sharing", action="store_true")
    p.add_argument("--patch-width", type=int, default=7)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", help="pretrain x sharing x hidden grid over several seeds")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds starting at --seed")
    p.add_argument("--seed-list", help="explicit comma-separated seeds")
    p.add_argument("--hidden-kinds", default="fcn,lcn,cnn")
    _add_split_flags(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate, desk=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "map" and args.ground_truth and not args.labels:
        parser.error("--ground-truth needs --labels")
    if args.command == "ablate" and args.paper_epochs:
        args.desk = False
    try:
        args.func(args)
    except StageFailure as failure:
        print(f"fssfnet {args.command}: {failure}", file=sys.stderr)
        if isinstance(failure.exc, NumericalError):
            return EXIT_NUMERICAL
        if isinstance(failure.exc, ConfigurationError):
            return EXIT_USAGE
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
