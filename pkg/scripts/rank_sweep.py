"""LoRA rank sweep on the desk data: trainable ratio and held-out DSC per rank.

    python scripts/rank_sweep.py --epochs 30 --out runs/rank_sweep.csv
"""

import argparse
import logging
from pathlib import Path

from atrous_lab.config import RunConfig
from atrous_lab.experiments import desk_data
from atrous_lab.train import rank_sweep, sweep_csv


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ranks", type=int, nargs="+", default=[2, 4, 16, 32, 64])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    train_s, eval_s = desk_data()
    cfg = RunConfig(seed=args.seed, epochs=args.epochs).validate()
    text = sweep_csv(rank_sweep(cfg, args.ranks, train_s, eval_s))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
