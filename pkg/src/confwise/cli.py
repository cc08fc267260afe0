"""``confwise`` command line: gen, eval, loss, train, compare, reliability.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import __version__, harness
from .losses import LOSS_NAMES, make_loss
from .metrics import bece, ece, export_reliability, merge_reports
from .model import DivergenceError
from .synth import SynthConfig, write_dataset
from .tensor_io import TensorFormatError, read_csv_tensor, read_tensor, write_tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _jobs_default() -> int:
    try:
        return max(1, int(os.environ.get("CONFWISE_JOBS", "1")))
    except ValueError:
        return 1


def _load(path, csv_shape=None, dtype=np.float64):
    if str(path).endswith(".csv"):
        return read_csv_tensor(path, csv_shape, dtype)
    return read_tensor(path)


def _add_eval_flags(p):
    p.add_argument("--bins", type=int, default=10, help="number of equal-width confidence bins (default 10)")
    p.add_argument("--radius", type=int, default=2, help="boundary band dilation radius in pixels (default 2)")
    p.add_argument("--shape", choices=("square", "cross"), default="square", help="dilation footprint")


def _add_loss_flags(p):
    p.add_argument("--alpha", type=float, default=0.4, help="ACW rebalanced weight in [0,1) (default 0.4)")
    p.add_argument("--q", type=float, default=0.8, help="share of each region in the high-confidence group (default 0.8)")
    p.add_argument("--scope", choices=("per_class", "global"), default="per_class", help="threshold scope")
    p.add_argument("--literal-percentile", action="store_true", help="use the q quantile itself as threshold")
    p.add_argument("--exclude-background", action="store_true", help="drop class 0 from the ACW class average")
    p.add_argument("--gamma", type=float, default=2.0, help="focal exponent (default 2)")
    p.add_argument("--tversky-a", type=float, default=0.3, help="Tversky false-positive weight (default 0.3)")
    p.add_argument("--tversky-b", type=float, default=0.7, help="Tversky false-negative weight (default 0.7)")
    p.add_argument("--gamma-ft", type=float, default=0.75, help="focal Tversky exponent (default 0.75)")
    p.add_argument("--smooth", type=float, default=1e-5, help="Dice/Tversky smoothing (default 1e-5)")
    p.add_argument("--combo-weight", type=float, default=0.5, help="ACW share in acw+X losses (default 0.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="confwise", description="Confidence-wise segmentation losses, calibration metrics and experiments.")
    parser.add_argument("--version", action="version", version=f"confwise {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=200, help="number of samples (default 200)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--height", type=int, default=64, help="image height (default 64)")
    p.add_argument("--width", type=int, default=64, help="image width (default 64)")
    p.add_argument("--ring-thickness", type=int, default=2, help="ring class thickness in pixels (default 2)")
    p.add_argument("--blur-sigma", type=float, default=1.5, help="boundary blur sigma (default 1.5; 0 disables)")
    p.add_argument("--noise-sigma", type=float, default=0.05, help="additive noise sigma (default 0.05)")
    p.add_argument("--artifact-prob", type=float, default=0.2, help="probability of a bright stripe (default 0.2)")

    p = sub.add_parser("eval", help="score prediction files against label files")
    p.add_argument("--pred", required=True, help="directory of *_NNNNN.segt predictions ([C,H,W] probs or [H,W] labels)")
    p.add_argument("--labels", required=True, help="directory of *_NNNNN.segt label maps")
    p.add_argument("--out", required=True, help="output directory for metrics and reliability CSVs")
    p.add_argument("--num-classes", type=int, default=None, help="class count for label-map predictions")
    p.add_argument("--pred-prefix", default="", help="only prediction files starting with this prefix")
    p.add_argument("--label-prefix", default="lbl_", help="only label files starting with this prefix (default lbl_)")
    _add_eval_flags(p)

    p = sub.add_parser("loss", help="evaluate a loss on one probability map")
    p.add_argument("--probs", required=True, help="[C,H,W] probabilities (.segt, or .csv rows h,w,c,value)")
    p.add_argument("--labels", required=True, help="[H,W] label map (.segt, or .csv rows h,w,0,label)")
    p.add_argument("--loss", choices=LOSS_NAMES, default="acw", help="loss name (default acw)")
    p.add_argument("--grad-out", default=None, help="write the logit gradient to this .segt file")
    _add_loss_flags(p)

    p = sub.add_parser("train", help="train TinyNet from a config and evaluate on the held-out 20%%")
    p.add_argument("--config", default=None, help="INI file with an [experiment] section (defaults if omitted)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="training seed (default: first seed of the config)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("compare", help="run a config matrix over seeds and tabulate mean ± stdev")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--matrix", help="matrix INI with [defaults] and [cell NAME] sections")
    src.add_argument("--preset", choices=harness.PRESETS, help="bundled matrix")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a key in every cell")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=_jobs_default(), help="parallel cells (default $CONFWISE_JOBS or 1)")

    p = sub.add_parser("reliability", help="export reliability-diagram data for probability maps")
    p.add_argument("--probs", required=True, nargs="+", help="one or more [C,H,W] probability .segt files")
    p.add_argument("--labels", required=True, nargs="+", help="matching label .segt files, same order")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--svg", default=None, help="optional SVG bar chart path")
    p.add_argument("--boundary", action="store_true", help="restrict to the boundary band (BECE)")
    _add_eval_flags(p)
    return parser


def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    try:
        cfg = SynthConfig(
            height=args.height,
            width=args.width,
            ring_thickness=args.ring_thickness,
            boundary_blur_sigma=args.blur_sigma,
            noise_sigma=args.noise_sigma,
            artifact_prob=args.artifact_prob,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_dataset(args.out, cfg, args.n)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    for d in (args.pred, args.labels):
        if not os.path.isdir(d):
            raise UsageError(f"{d} is not a directory")
    if not harness.index_files(args.pred, args.pred_prefix):
        raise UsageError(f"{args.pred}: no .segt files")
    ev = harness.evaluate_corpus(
        args.pred, args.labels, args.bins, args.radius, args.shape, args.num_classes, args.pred_prefix, args.label_prefix
    )
    meta = {"pred": args.pred, "labels": args.labels, "bins": args.bins, "radius": args.radius, "shape": args.shape}
    harness.write_corpus(ev, args.out, meta)
    fg = slice(1, None) if ev.num_classes > 1 else slice(None)
    mean_dsc = np.mean([p[1].dsc[fg].mean() for p in ev.per_image])
    print(f"images {len(ev.per_image)}  mean DSC {mean_dsc:.4f}  ECE {ev.ece.score:.4f}  BECE {ev.bece.score:.4f}")
    return EXIT_OK


def cmd_loss(args) -> int:
    probs = _load(args.probs)
    labels = _load(args.labels, dtype=np.uint8)
    if labels.ndim == 3 and labels.shape[0] == 1:
        labels = labels[0]
    fn = make_loss(
        args.loss,
        alpha=args.alpha,
        q=args.q,
        scope=args.scope,
        literal_percentile=args.literal_percentile,
        include_background=not args.exclude_background,
        gamma=args.gamma,
        tversky_a=args.tversky_a,
        tversky_b=args.tversky_b,
        gamma_ft=args.gamma_ft,
        smooth=args.smooth,
        combo_weight=args.combo_weight,
    )
    res, part = fn(np.asarray(probs, dtype=np.float64), labels.astype(np.int64))
    if not np.isfinite(res.value):
        raise FloatingPointError(f"loss is {res.value}")
    print(f"{args.loss} {res.value!r}")
    if part is not None:
        for i, cp in enumerate(part):
            if not cp.empty:
                print(f"  class {i}: threshold {cp.threshold:.6g} beta {cp.beta:.4f} "
                      f"high {cp.high_idx.size} low {cp.low_idx.size}{' degenerate' if cp.degenerate else ''}")
    if args.grad_out:
        write_tensor(args.grad_out, res.grad_logits)
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = harness.parse_overrides(args.set)
    cfg = harness.load_config(args.config, overrides) if args.config else harness.config_from_items(overrides)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    cfg = cfg.replace(seeds=(seed,))
    res = harness.run_cell(cfg, seed, keep_net=True)
    os.makedirs(args.out, exist_ok=True)
    res.net.save(os.path.join(args.out, "checkpoint"))
    with open(os.path.join(args.out, "trainlog.csv"), "w", newline="") as fh:
        for line in harness.provenance_lines([cfg]):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss"])
        for e, (lr, loss) in enumerate(zip(res.log.lr, res.log.epoch_loss), start=1):
            w.writerow([e, repr(lr), repr(loss)])
    harness.write_results(os.path.join(args.out, "results.csv"), [res], [cfg])
    m = res.metrics
    print(f"{cfg.name} seed {seed}: ring DSC {m['dsc_1']:.4f} mean DSC {m['mean_dsc']:.4f} "
          f"ECE {m['ece']:.4f} BECE {m['bece']:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    overrides = harness.parse_overrides(args.set)
    cells = harness.load_matrix(args.matrix or args.preset, overrides)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")

    def progress(r):
        print(f"  {r.config.name} seed {r.seed}: {r.status}", file=sys.stderr, flush=True)

    results = harness.run_matrix(cells, args.jobs, progress)
    agg = harness.aggregate(results)
    os.makedirs(args.out, exist_ok=True)
    harness.write_results(os.path.join(args.out, "results.csv"), results, cells)
    harness.write_aggregate(os.path.join(args.out, "aggregate.csv"), agg, cells)
    table = harness.render_table(agg)
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write("\n".join(harness.provenance_lines(cells)) + "\n" + table)
    print(table, end="")
    failed = [r for r in results if r.status != "ok"]
    if failed:
        print(f"{len(failed)} of {len(results)} runs failed; see results.csv", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_reliability(args) -> int:
    if len(args.probs) != len(args.labels):
        raise UsageError("--probs and --labels need the same number of files")
    reports = []
    for pp, lp in zip(args.probs, args.labels):
        probs, labels = read_tensor(pp), read_tensor(lp)
        if args.boundary:
            reports.append(bece(probs, labels, args.bins, args.radius, args.shape))
        else:
            reports.append(ece(probs, labels, args.bins))
    rep = merge_reports(reports)
    meta = {"confwise version": __version__, "metric": "bece" if args.boundary else "ece",
            "bins": args.bins, "files": " ".join(args.probs)}
    export_reliability(rep, args.out, args.svg, meta)
    print(f"{'BECE' if args.boundary else 'ECE'} {rep.score:.6f} over {rep.n} pixels")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "eval": cmd_eval,
    "loss": cmd_loss,
    "train": cmd_train,
    "compare": cmd_compare,
    "reliability": cmd_reliability,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"confwise {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"confwise {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TensorFormatError, OSError, ValueError, TypeError) as exc:
        print(f"confwise {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
