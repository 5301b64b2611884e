"""Bottleneck pre-training on a small frozen passage set.

    python scripts/overfit_probe.py --passages 32 --steps 1500
"""

import argparse

from expandpt.experiments import overfit_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--passages", type=int, default=32)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--threshold", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    probe = overfit_probe(args.passages, args.steps, args.threshold, args.seed)
    for step in range(0, len(probe.dec_losses), max(1, len(probe.dec_losses) // 10)):
        print(f"step {step + 1:>5}  decoder loss {probe.dec_losses[step]:.4f}")
    print(f"final decoder loss {probe.dec_losses[-1]:.4f}; first below {probe.threshold} at step {probe.first_below}")


if __name__ == "__main__":
    main()
