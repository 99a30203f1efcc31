"""Memorise four short clips with the micro model and report loss drop and MPJPE."""
import argparse
import json

from dancediff.experiments import ExperimentConfig, overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="optional JSON summary path")
    args = ap.parse_args()
    res = overfit(ExperimentConfig(iters=args.iters, torch_seed=args.seed))
    summary = {"loss_ratio": res.loss_ratio, "mpjpe_m": res.mpjpe, "train_seconds": res.seconds}
    print(json.dumps(summary, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(summary, f, indent=2)


if __name__ == "__main__":
    main()
