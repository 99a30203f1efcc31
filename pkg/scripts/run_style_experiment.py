"""Train on two styles sharing their audio, then classify sampled motions by style."""
import argparse
import json

from dancediff.experiments import STYLE_ITERS, ExperimentConfig, style_conditioning


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=STYLE_ITERS)
    ap.add_argument("--samples", type=int, default=20, help="samples per style")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--w", type=float, default=1.0)
    args = ap.parse_args()
    res = style_conditioning(ExperimentConfig(iters=args.iters, torch_seed=args.seed, w=args.w), args.samples)
    print(json.dumps({"accuracy": res.accuracy, "loss_ratio": res.loss_ratio,
                      "train_seconds": res.seconds}, indent=2))


if __name__ == "__main__":
    main()
