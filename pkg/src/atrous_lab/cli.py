"""``atrous-lab`` command line: data generation, training, evaluation, checks.

Exit codes: 0 success, 1 invalid flags or config, 2 runtime failure.
Logs go to stderr and machine-readable output to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .errors import AtrousLabError, ConfigError, ValidationError
from .data import SynthConfig, generate_dataset, paper_synth_config, read_shard, write_shard

log = logging.getLogger("atrous_lab")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig().validate()


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    if args.count < 0:
        raise ConfigError(f"--count must be >= 0, got {args.count}")
    cfg = paper_synth_config() if args.preset == "paper" else SynthConfig()
    if args.size is not None:
        cfg.size = args.size
    cfg.validate()
    samples = generate_dataset(cfg, args.count, args.seed)
    index = write_shard(samples, args.out, cfg)
    summary = {k: v for k, v in index.items() if k != "samples"}
    summary["path"] = str(args.out)
    _emit(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import evaluate, save_checkpoint, train

    cfg = _load_config(args.config)
    train_path = args.data or cfg.train_data
    if not train_path:
        raise ConfigError("no training data: pass --data or set train_data in the config")
    eval_path = args.eval_data or cfg.eval_data
    train_samples = read_shard(train_path)
    eval_samples = read_shard(eval_path) if eval_path else None
    res = train(cfg, train_samples, eval_samples)
    out = Path(args.out)
    save_checkpoint(res.model, out, res.history)
    (out / "history.json").write_text(res.history_json() + "\n")
    final = dict(res.history[-1]) if res.history else {"epoch": 0}
    if eval_samples:
        rep = evaluate(res.model, eval_samples, cfg)
        final.update(eval_dsc=rep["mean_dsc"], eval_hd=rep["mean_hd"])
    final["checkpoint"] = str(out)
    sys.stdout.write(json.dumps(final, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_checkpoint

    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, read_shard(args.data), model.cfg)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    if not args.tol > 0:
        raise ConfigError(f"--tol must be positive, got {args.tol}")
    report = run_suite(args.module, args.tol, args.seed)
    _emit(report)
    for c in report["checks"]:
        if not c["pass"]:
            log.error("gradcheck failed: %s/%s max_rel_err %.3g > tol %.3g",
                      c["group"], c["name"], c["max_rel_err"], c["tol"])
    return EXIT_OK if report["pass"] else EXIT_RUNTIME


def cmd_params(args) -> int:
    from .model import build_model, parameter_table

    cfg = _load_config(args.config)
    if args.rank is not None:
        cfg = cfg.replace(adapter=type(cfg.adapter)(**{**cfg.adapter.__dict__, "rank": args.rank}))
        cfg.validate()
    _emit(parameter_table(build_model(cfg)))
    return EXIT_OK


def cmd_rank_sweep(args) -> int:
    from .train import rank_sweep, sweep_csv

    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs).validate()
    train_path = args.data or cfg.train_data
    if not train_path:
        raise ConfigError("no training data: pass --data or set train_data in the config")
    eval_path = args.eval_data or cfg.eval_data
    rows = rank_sweep(cfg, args.ranks, read_shard(train_path),
                      read_shard(eval_path) if eval_path else None)
    text = sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _positive_rank(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"rank must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atrous-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic vessel shard")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--count", required=True, type=int)
    g.add_argument("--size", type=int, default=None, help="output size in pixels (preset default)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preset", choices=("desk", "paper"), default="desk")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train adapters and decoder")
    t.add_argument("--config", type=Path, default=None, help="RunConfig JSON (defaults if omitted)")
    t.add_argument("--data", type=Path, default=None, help="training shard directory")
    t.add_argument("--eval-data", type=Path, default=None, help="held-out shard directory")
    t.add_argument("--out", required=True, type=Path, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a shard")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--out", type=Path, default=None, help="also write the report here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="F64 finite-difference suite")
    c.add_argument("--module", choices=("all", "tensor", "layers", "peft", "model", "loss"),
                   default="all")
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("params", help="parameter accounting table")
    m.add_argument("--config", type=Path, default=None)
    m.add_argument("--rank", type=_positive_rank, default=None, help="override the LoRA rank")
    m.set_defaults(func=cmd_params)

    r = sub.add_parser("rank-sweep", help="train one run per LoRA rank, emit CSV")
    r.add_argument("--config", type=Path, default=None)
    r.add_argument("--data", type=Path, default=None)
    r.add_argument("--eval-data", type=Path, default=None)
    r.add_argument("--ranks", type=_positive_rank, nargs="+", default=[2, 4, 16, 32, 64])
    r.add_argument("--epochs", type=int, default=None, help="override the config's epochs")
    r.add_argument("--out", type=Path, default=None, help="also write the CSV here")
    r.set_defaults(func=cmd_rank_sweep)
    return p


def _configure_logging(verbose: bool) -> None:
    # A fresh handler per call so repeated in-process runs write to the current stderr.
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        sys.stderr.write(f"{err}\n")
        return EXIT_INVALID
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as err:
        log.error("%s", err)
        return EXIT_INVALID
    except AtrousLabError as err:
        log.error("%s: %s", type(err).__name__, err)
        return EXIT_RUNTIME
    except OSError as err:
        log.error("%s", err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
