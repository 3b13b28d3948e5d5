"""Command-line entry point: ``smsframes <command> ...``.

Exit codes: 0 success, 1 some videos failed, 2 usage or input error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import mapper as mp
from . import pipeline as pl
from .errors import ArgumentError, SmsError
from .features import SynthConfig

log = logging.getLogger("smsframes")


def _budgets(text):
    try:
        values = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad budget list {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("budgets must be positive integers")
    return values


def _selection(text):
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {text!r}")
    return name, path


def _oracle_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--probe", help="linear-probe JSON file")
    g.add_argument("--remote", help="command line of a stdio loss server")


def _train_args(p):
    p.add_argument("--variant", choices=["transformer", "mlp"], default="transformer")
    p.add_argument("--hidden", type=int, default=64, help="FFN width (transformer) or hidden width (mlp)")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=mp.TrainConfig.learning_rate)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--weight-decay", type=float, default=0.0, help="decoupled decay on weight matrices")
    p.add_argument("--schedule", choices=["constant", "cosine"], default="constant")
    p.add_argument("--pos-scale", type=float, default=None,
                   help="positional-encoding amplitude (default 1/sqrt(d))")


def build_parser():
    parser = argparse.ArgumentParser(prog="smsframes", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="random seed (command-specific default)")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic planted-frame benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=200)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--informative", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--layout", choices=["scattered", "contiguous"], default="scattered")

    p = sub.add_parser("fit-probe", help="fit the linear-probe loss oracle on the training split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--pool", choices=["auto", "informative", "all"], default="auto")

    p = sub.add_parser("search-labels", help="stage 1: search the best combination per video")
    p.add_argument("--manifest", required=True)
    _oracle_args(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--K", type=int, default=30)
    p.add_argument("--budget", type=int, default=400)
    p.add_argument("--split", choices=["all", "train", "heldout"], default="all")
    p.add_argument("--flat", action="store_true", help="frame-level GLS without the clip phase")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-mapper", help="stage 2: fit the feature mapping network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    _train_args(p)
    p.add_argument("--out", required=True, help="model file (SMSM)")
    p.add_argument("--report", help="JSON loss-curve report")

    p = sub.add_parser("select", help="stage 3 (sms) or a baseline selection per video")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=pl.STRATEGIES, default="sms")
    p.add_argument("--model")
    p.add_argument("--probe", help="needed by brute; base/random record probe losses when given")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--budget", type=int, default=2000)
    p.add_argument("--split", choices=["all", "train", "heldout"], default="heldout")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="compare selection strategies")
    p.add_argument("--manifest", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--selection", type=_selection, action="append", required=True,
                   metavar="NAME=PATH")
    p.add_argument("--split", choices=["all", "train", "heldout"], default="heldout")
    p.add_argument("--out", required=True, help="JSON report; a CSV is written next to it")

    p = sub.add_parser("compare-search", help="best loss per search algorithm and budget")
    p.add_argument("--manifest", required=True)
    _oracle_args(p)
    p.add_argument("--algorithms", default="hier,flat,brute")
    p.add_argument("--budgets", type=_budgets, default=[50, 100, 200, 400])
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--K", type=int, default=30)
    p.add_argument("--split", choices=["all", "train", "heldout"], default="all")
    p.add_argument("--brute-cap", type=int, default=10**6)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the mapper gradients")
    p.add_argument("--variant", choices=["transformer", "mlp"], default="transformer")
    p.add_argument("--m", type=int, default=6)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-6)
    return parser


def _seed(args, default):
    return default if args.seed is None else args.seed


def _finish(ok, failed, what):
    for f in failed:
        log.error("%s: %s", f["video_id"], f["error"])
    log.info("%s: %d videos ok, %d failed", what, len(ok), len(failed))
    return 1 if failed else 0


def run(args):
    cmd = args.command
    if cmd == "gen-synth":
        cfg = SynthConfig(args.videos, args.classes, args.frames, args.dim, args.informative,
                          args.sigma, _seed(args, 1), args.layout)
        print(pl.gen_synth(cfg, args.out))
        return 0

    if cmd == "fit-probe":
        probe = pl.fit_probe(args.manifest, args.out, args.epochs, args.lr, args.l2, _seed(args, 0), args.pool)
        log.info("probe with %d classes, d=%d written to %s", probe.classes, probe.d, args.out)
        return 0

    if cmd == "search-labels":
        ok, failed = pl.search_labels(args.manifest, args.out, args.probe, args.remote, args.n, args.K,
                                      args.budget, _seed(args, 0), args.workers, args.split, args.flat)
        if ok:
            log.info("mean objective %.6f, mean evaluations %.1f",
                     np.mean([r["objective"] for r in ok]), np.mean([r["evaluations"] for r in ok]))
        return _finish(ok, failed, "search-labels")

    if cmd == "train-mapper":
        cfg = mp.TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                             seed=_seed(args, 0), optimizer=args.optimizer, weight_init_scale=args.init_scale,
                             weight_decay=args.weight_decay, schedule=args.schedule)
        _, report = pl.train_mapper(args.manifest, args.labels, args.out, args.report, args.variant,
                                    args.hidden, args.heads, args.layers, cfg, pos_scale=args.pos_scale)
        log.info("%s: train loss %.4f -> %.4f", args.variant, report.train_loss[0], report.train_loss[-1])
        if report.val_loss:
            log.info("held-out loss %.4f -> %.4f", report.val_loss[0], report.val_loss[-1])
        return 0

    if cmd == "select":
        ok, failed = pl.select(args.manifest, args.out, args.strategy, args.model, args.probe, args.n,
                               args.budget, _seed(args, 0), args.workers, args.split)
        if args.strategy == "sms" and ok:
            mean_dist = float(np.mean([r["objective"] for r in ok]))
            log.info("mean cosine distance to predicted feature %.4f", mean_dist)
            if mean_dist > 0.5:
                log.warning("high distances: the mapper may be untrained or mismatched")
        return _finish(ok, failed, "select")

    if cmd == "eval":
        out_csv = os.path.splitext(args.out)[0] + ".csv"
        report = pl.evaluate(args.manifest, dict(args.selection), args.probe, args.out, out_csv, args.split)
        if not args.quiet:
            print(json.dumps(report["strategies"], indent=1, sort_keys=True))
        return 0

    if cmd == "compare-search":
        algos = [a for a in args.algorithms.split(",") if a]
        _, summary = pl.compare_search(args.manifest, args.out, args.probe, args.remote, algos, args.budgets,
                                       args.n, args.K, _seed(args, 0), args.workers, args.split, args.brute_cap)
        for row in summary:
            log.info("%s budget=%s evals=%s best=%s (%s)", *row[:1], row[2], row[3], row[4], row[5])
        return 0

    if cmd == "gradcheck":
        rng = np.random.default_rng(_seed(args, 0))
        params = mp.init_params(args.variant, args.d, args.hidden, args.heads, args.layers,
                                seed=_seed(args, 0))
        for t in params.tensors.values():
            t += 0.1 * rng.standard_normal(t.shape)
        example = mp.TrainingExample(rng.standard_normal((args.m, args.d)), rng.standard_normal(args.d))
        errors = mp.gradient_check(params, example, args.step)
        worst = max(errors.values())
        if not args.quiet:
            for name, err in errors.items():
                print(f"{name:16s} {err:.3e}")
            print(f"max relative error {worst:.3e} ({'ok' if worst <= args.tol else 'FAIL'})")
        return 0 if worst <= args.tol else 1
    raise AssertionError(cmd)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ArgumentError, SmsError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
