#!/usr/bin/env python3
"""Desk-scale versions of the three inversion experiments.

    python scripts/run_experiments.py train   --checkpoint runs/ck.pt
    python scripts/run_experiments.py indist  --checkpoint runs/ck.pt --iters 1500
    python scripts/run_experiments.py ood     --checkpoint runs/ck.pt --iters 1500
    python scripts/run_experiments.py cf      --checkpoint runs/ck.pt --iters 1500

Each experiment prints one line per run and a short summary. Images come
from the held-out part of the synthetic lesion set used for training.
"""
import argparse
import json
import logging
import time

import numpy as np
import torch

from dipcf.checkpoint import load_checkpoint, save_checkpoint
from dipcf.core_model import encode
from dipcf.data import CorruptionSpec, corrupt, localization_ratio, make_synthetic_lesions, psnr, stratified_split
from dipcf.inversion import InversionConfig, generate_counterfactual, recover_preimage
from dipcf.loss_estimator import TrainConfig, train_joint

N_SAMPLES = 600
DATA_SEED = 0


def holdout_set(train_seed):
    ds = make_synthetic_lesions(N_SAMPLES, seed=DATA_SEED)
    return stratified_split(ds, 0.9, train_seed)[1]


def cmd_train(args):
    ds = make_synthetic_lesions(N_SAMPLES, seed=DATA_SEED)
    bundle = train_joint(ds, TrainConfig(epochs=args.epochs, seed=args.seed))
    save_checkpoint(bundle, args.checkpoint)
    last = bundle.log[-1]
    print(f"val_accuracy={last.val_accuracy:.4f} val_rank_correlation={last.val_rank_correlation:.4f}")
    if args.write_reference:
        ref = {"n_samples": N_SAMPLES, "data_seed": DATA_SEED, "epochs": args.epochs, "seed": args.seed,
               "val_accuracy": last.val_accuracy, "val_rank_correlation": last.val_rank_correlation,
               "torch": torch.__version__}
        with open(args.write_reference, "w") as fh:
            json.dump(ref, fh, indent=2)


def run_pair(bundle, x_in, x_ref, seed, iters, **kw):
    target = encode(torch.from_numpy(x_in), 1, bundle.model).detach()
    out = {}
    for mode in ("dip_only", "dip_regularized"):
        cfg = InversionConfig(mode=mode, iterations=iters, seed=seed, **kw)
        out[mode] = recover_preimage(target, x_ref, bundle.model, bundle.head, cfg)
    return out


def cmd_indist(args):
    bundle = load_checkpoint(args.checkpoint)
    ho = holdout_set(bundle.config.seed)
    for idx in args.indices:
        x0, y = ho.items[idx]
        t = time.time()
        res = run_pair(bundle, x0, x0, idx, args.iters)
        a, b = res["dip_only"], res["dip_regularized"]
        print(f"img {idx} class {y}: psnr dip_only {a.psnr_vs_reference:.2f} "
              f"dip_regularized {b.psnr_vs_reference:.2f} (gap {b.psnr_vs_reference - a.psnr_vs_reference:+.2f}) "
              f"lhat {a.final_estimated_loss:.3f} / {b.final_estimated_loss:.3f}  [{time.time() - t:.0f}s]",
              flush=True)


def cmd_ood(args):
    bundle = load_checkpoint(args.checkpoint)
    ho = holdout_set(bundle.config.seed)
    wins = 0
    for idx in args.indices:
        x0, y = ho.items[idx]
        x_in = corrupt(x0, CorruptionSpec.parse(args.corrupt, seed=idx))
        t = time.time()
        res = run_pair(bundle, x_in, x0, idx, args.iters)
        a, b = res["dip_only"], res["dip_regularized"]
        win = b.final_estimated_loss < a.final_estimated_loss
        wins += win
        print(f"img {idx}: lhat dip_only {a.final_estimated_loss:.3f} dip_regularized {b.final_estimated_loss:.3f} "
              f"lower={win}  psnr {a.psnr_vs_reference:.2f} / {b.psnr_vs_reference:.2f} "
              f"(corrupted input {psnr(x_in, x0):.2f})  [{time.time() - t:.0f}s]", flush=True)
    print(f"regularized lower in {wins}/{len(args.indices)}")


def cmd_cf(args):
    bundle = load_checkpoint(args.checkpoint)
    ho = holdout_set(bundle.config.seed)
    stats = {lam: ([], []) for lam in (args.lambda1, 0.0)}
    for idx in args.indices:
        x0, y = ho.items[idx]
        target = (y + 1) % len(bundle.class_names)
        for lam in stats:
            t = time.time()
            cfg = InversionConfig(iterations=args.iters, lambda1=lam, lambda2=args.lambda2, seed=idx)
            r = generate_counterfactual(x0, target, bundle.model, bundle.head, cfg)
            loc = localization_ratio(r.difference_map, ho.masks[idx])
            stats[lam][0].append(r.flipped)
            stats[lam][1].append(loc)
            print(f"img {idx} {y}->{target} lambda1={lam}: pred {r.predicted_class} flipped={r.flipped} "
                  f"loc {loc:.3f} (mask {ho.masks[idx].mean():.3f}) lhat {r.final_estimated_loss:.2f} "
                  f"psnr {r.psnr_vs_reference:.2f}  [{time.time() - t:.0f}s]", flush=True)
    for lam, (flips, locs) in stats.items():
        print(f"lambda1={lam}: flipped {sum(flips)}/{len(flips)} mean localization {np.mean(locs):.4f}")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("experiment", choices=["train", "indist", "ood", "cf"])
    p.add_argument("--checkpoint", default="runs/desk_checkpoint.pt")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=1500)
    p.add_argument("--indices", type=lambda s: [int(i) for i in s.split(",")], default=list(range(5)))
    p.add_argument("--corrupt", default="occlusion:8")
    p.add_argument("--lambda1", type=float, default=0.02)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--write-reference", help="train: also store the final held-out metrics as JSON")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    {"train": cmd_train, "indist": cmd_indist, "ood": cmd_ood, "cf": cmd_cf}[args.experiment](args)


if __name__ == "__main__":
    main()
