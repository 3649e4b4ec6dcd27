"""Command-line entry point.

Subcommands: synth-data, train, eval, grad-check, export-dct, score.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as config_mod
from . import dct, gradcheck, metrics, train
from .errors import ConfigError, DataError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tfctx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, checkpoint=False, trials=False):
        p.add_argument("--config", help="run-config JSON (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint path")
        if trials:
            p.add_argument("--trials", required=True, help="trial list file")

    common(sub.add_parser("synth-data", help="generate the synthetic corpus, manifests and trials"))
    common(sub.add_parser("train", help="train an embedder on the synthetic corpus"))
    common(sub.add_parser("eval", help="score a trial list with a trained model"),
           checkpoint=True, trials=True)

    p = sub.add_parser("grad-check", help="finite-difference check every block variant")
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--skip-full-network", action="store_true",
                   help="skip the miniature end-to-end check")

    p = sub.add_parser("export-dct", help="write DCT basis grids as CSV files")
    p.add_argument("--grid-f", type=int, default=8, help="frequency extent of the grid")
    p.add_argument("--grid-t", type=int, default=25, help="time extent of the grid")
    p.add_argument("--components", type=int, default=16, help="number of lowest components")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("score", help="compute EER/minDCF from existing score and trial files")
    p.add_argument("--trials", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", help="optional directory for report.txt and det.csv")
    return parser


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    train.synth_corpus(cfg)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = cfg.out_dir
    try:
        path = train.train_run(cfg, out_dir)
    except NumericalError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        kept = sorted(p for p in os.listdir(out_dir) if p.startswith("checkpoint_epoch")) \
            if os.path.isdir(out_dir) else []
        if kept:
            print(f"last good checkpoint: {os.path.join(out_dir, kept[-1])}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"checkpoint written to {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    embedder, ckpt_cfg = train.load_embedder(args.checkpoint)
    # the checkpoint owns the model/features; the caller picks data and output
    ckpt_cfg.data = cfg.data
    trials = metrics.read_trials(args.trials)
    out_dir = args.out or cfg.out_dir
    report, _, _, skipped = train.evaluate_run(ckpt_cfg, embedder, trials, out_dir)
    print(report)
    if skipped:
        for rel in skipped:
            print(f"missing audio, trials skipped: {rel}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_grad_check(args) -> int:
    report = gradcheck.run_grad_checks(seed=args.seed,
                                       include_full_network=not args.skip_full_network)
    width = max(len(n) for n in report)
    failed = False
    for name, err in report.items():
        ok = err < gradcheck.TOLERANCE
        failed |= not ok
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_export_dct(args) -> int:
    if not 1 <= args.components <= args.grid_f * args.grid_t:
        raise ConfigError(f"components must lie in [1, {args.grid_f * args.grid_t}]")
    paths = dct.export_basis_csv(args.grid_f, args.grid_t, args.components, args.out)
    print(f"wrote {len(paths)} basis grids to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    trials = metrics.read_trials(args.trials)
    scores = metrics.match_scores(trials, metrics.read_scores(args.scores))
    eer, thr_eer = metrics.compute_eer(trials, scores)
    dcf, thr_dcf = metrics.compute_min_dcf(trials, scores)
    report = metrics.format_report(eer, dcf, thr_eer, thr_dcf)
    print(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(report + "\n")
        metrics.write_det_csv(os.path.join(args.out, "det.csv"),
                              metrics.det_points(trials, scores))
    return EXIT_OK


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "export-dct": cmd_export_dct,
    "score": cmd_score,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
