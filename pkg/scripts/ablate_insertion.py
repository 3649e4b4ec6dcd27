#!/usr/bin/env python3
"""Insertion-position ablation: train the attention+TFE variant with the
context block placed after the batch norm, before it, or before the first
convolution of each residual branch, and compare EER/minDCF.

    python scripts/ablate_insertion.py --workdir runs/ablate --epochs 7
"""

import argparse
import os
import time

from tfctx import config, metrics, train

POSITIONS = ("after_bn", "before_bn", "before_conv")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="runs/ablate")
    parser.add_argument("--epochs", type=int, default=7)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    base = config.RunConfig()
    base.seed = args.seed
    base.data.data_dir = os.path.join(args.workdir, "data")
    if not os.path.exists(os.path.join(base.data.data_dir, train.TRAIN_MANIFEST)):
        print("synthesizing corpus ...")
        train.synth_corpus(base)
    trials = metrics.read_trials(os.path.join(base.data.data_dir, train.TRIALS_FILE))

    print(f"{'position':12s} {'train':>8s} {'EER':>8s} {'minDCF':>8s}")
    for position in POSITIONS:
        cfg = config.RunConfig()
        cfg.seed = args.seed
        cfg.data.data_dir = base.data.data_dir
        cfg.out_dir = os.path.join(args.workdir, position)
        cfg.train.epochs = args.epochs
        cfg.train.speakers_per_batch = 20
        cfg.model.block.kind = "att_gcm"
        cfg.model.block.tfe = True
        cfg.model.block.insertion = position
        config.validate(cfg)
        t0 = time.time()
        ckpt = train.train_run(cfg, cfg.out_dir, quiet=True)
        elapsed = time.time() - t0
        embedder, ckpt_cfg = train.load_embedder(ckpt)
        _, eer, dcf, _ = train.evaluate_run(ckpt_cfg, embedder, trials,
                                            os.path.join(cfg.out_dir, "eval"))
        print(f"{position:12s} {elapsed:7.1f}s {100 * eer:7.2f}% {dcf:8.4f}")


if __name__ == "__main__":
    main()
