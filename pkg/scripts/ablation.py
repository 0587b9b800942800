"""Attention-module ablation: paired desk runs with and without it over several seeds.

Writes one JSON line per run and prints the per-seed verdict.

    python scripts/ablation.py --out runs/ablation.jsonl
"""

import argparse
import json
import logging
from pathlib import Path

from atrous_lab.experiments import ABLATION_SEEDS, ablation_verdict, desk_data, desk_run


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=list(ABLATION_SEEDS))
    p.add_argument("--out", type=Path, default=None, help="JSON lines, one per run")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    data = desk_data()
    runs = {(s, att): desk_run(s, att, data) for s in args.seeds for att in (True, False)}
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text("".join(json.dumps(r.to_dict()) + "\n" for r in runs.values()))
    verdict = ablation_verdict([runs[s, True] for s in args.seeds],
                               [runs[s, False] for s in args.seeds])
    print(json.dumps(verdict, indent=2))


if __name__ == "__main__":
    main()
