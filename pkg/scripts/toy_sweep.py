#!/usr/bin/env python3
"""Train and score every context-block variant on the synthetic corpus.

Builds the corpus once, trains SE / attention / attention+TFE / DCT /
DCT+TFE embedders with a shared seed and prints an EER/minDCF table.
Run from the repo root:

    python scripts/toy_sweep.py --workdir runs/sweep --epochs 7
"""

import argparse
import os
import sys
import time

from tfctx import config, metrics, train

VARIANTS = {
    "se": ("se", False),
    "att_gcm": ("att_gcm", False),
    "att_gcm_tfe": ("att_gcm", True),
    "dct_gcm": ("dct_gcm", False),
    "dct_gcm_tfe": ("dct_gcm", True),
}


def variant_config(workdir, name, epochs, seed):
    kind, tfe = VARIANTS[name]
    cfg = config.RunConfig()
    cfg.seed = seed
    cfg.out_dir = os.path.join(workdir, name)
    cfg.data.data_dir = os.path.join(workdir, "data")
    cfg.train.epochs = epochs
    cfg.train.speakers_per_batch = 20
    cfg.model.block.kind = kind
    cfg.model.block.tfe = tfe
    cfg.model.block.dct_grid = [4, 13]  # smallest feature map of the toy net
    return config.validate(cfg)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/sweep")
    parser.add_argument("--epochs", type=int, default=7)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    base = variant_config(args.workdir, "se", args.epochs, args.seed)
    if not os.path.exists(os.path.join(base.data.data_dir, train.TRAIN_MANIFEST)):
        print("synthesizing corpus ...")
        train.synth_corpus(base)
    trials = metrics.read_trials(os.path.join(base.data.data_dir, train.TRIALS_FILE))

    print(f"{'variant':14s} {'train':>8s} {'EER':>8s} {'minDCF':>8s}")
    results = {}
    for name in VARIANTS:
        cfg = variant_config(args.workdir, name, args.epochs, args.seed)
        t0 = time.time()
        ckpt = train.train_run(cfg, cfg.out_dir, quiet=True)
        elapsed = time.time() - t0
        embedder, ckpt_cfg = train.load_embedder(ckpt)
        _, eer, dcf, skipped = train.evaluate_run(ckpt_cfg, embedder, trials,
                                                  os.path.join(cfg.out_dir, "eval"))
        if skipped:
            print(f"warning: {len(skipped)} utterances missing", file=sys.stderr)
        results[name] = eer
        print(f"{name:14s} {elapsed:7.1f}s {100 * eer:7.2f}% {dcf:8.4f}")

    ordering = " < ".join(sorted(results, key=results.get))
    print(f"\nEER ordering (toy scale, not statistically meaningful): {ordering}")


if __name__ == "__main__":
    main()
