"""Baseline / expanded / curriculum pre-training on the generated topic corpus.

    python scripts/run_trend_experiment.py --seeds 0,1,2 --steps 2000 --finetune
"""

import argparse
import json
import logging

from expandpt.experiments import comparison_table, desk_finetune_config, finetune_mrr, prepare, run_arm
from expandpt.model import DenseModel
from expandpt.train import PRESETS, TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--arms", default="baseline,expanded,curriculum")
    ap.add_argument("--finetune", action="store_true", help="also fine-tune each checkpoint and a random init")
    ap.add_argument("--json", help="write per-run results here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = prepare()
    results, ft = [], []
    for seed in (int(s) for s in args.seeds.split(",")):
        for arm in args.arms.split(","):
            r = run_arm(setup, arm, seed, steps=args.steps, keep_model=args.finetune)
            results.append(r)
            if args.finetune:
                ft.append({"init": arm, "seed": seed, "mrr": finetune_mrr(r.model, setup, seed)})
                r.model = None
        if args.finetune:
            rand = DenseModel(TrainConfig(**PRESETS["tiny"], seed=seed).model_config(len(setup.vocab)), seed=seed)
            ft.append({"init": "random", "seed": seed, "mrr": finetune_mrr(rand, setup, seed)})
        print(comparison_table(results), flush=True)
        for row in ft:
            print(f"finetune {row['init']:<12} seed {row['seed']}: {row['mrr']:.4f}", flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"pretrain": [dict(arm=r.arm, seed=r.seed, mrr=r.mrr, seconds=r.seconds, losses=r.final_losses)
                                    for r in results], "finetune": ft, "finetune_config": desk_finetune_config().to_dict()},
                      fh, indent=2)


if __name__ == "__main__":
    main()
