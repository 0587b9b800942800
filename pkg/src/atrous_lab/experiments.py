"""Named desk-scale experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import AdapterConfig, RunConfig
from .data import SegSample, SynthConfig, generate_dataset
from .model import VesselSegmenter
from .peft import count_parameters
from .train import evaluate, train

log = logging.getLogger(__name__)

DESK_TRAIN = (200, 1)   # (count, data seed)
DESK_EVAL = (50, 2)
SMOOTH_WINDOW = 5
ABLATION_SEEDS = (0, 1, 2, 3)
LOSS_FROM_EPOCH = 10


def desk_data(synth: SynthConfig | None = None) -> tuple[list[SegSample], list[SegSample]]:
    synth = synth or SynthConfig()
    return generate_dataset(synth, *DESK_TRAIN), generate_dataset(synth, *DESK_EVAL)


def smoothed(values, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what exists."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class RunSummary:
    seed: int
    atrous_attention: bool
    losses: list[float]
    train_dsc: list[float]
    eval_dsc: float
    eval_hd: float
    trainable_ratio: float
    seconds: float
    model: VesselSegmenter | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "model"}


def desk_run(seed: int = 0, atrous_attention: bool = True, data=None,
             cfg: RunConfig | None = None) -> RunSummary:
    """Default desk configuration trained on the desk data, scored on the held-out split."""
    train_s, eval_s = data or desk_data()
    cfg = (cfg or RunConfig()).replace(
        seed=seed, adapter=AdapterConfig(**{**(cfg or RunConfig()).adapter.__dict__,
                                            "atrous_attention": atrous_attention}))
    cfg.validate()
    started = time.perf_counter()
    res = train(cfg, train_s)
    rep = evaluate(res.model, eval_s, cfg)
    elapsed = time.perf_counter() - started
    log.info("seed %d aam %s: eval dsc %.4f hd %.2f (%.0f s)", seed, atrous_attention,
             rep["mean_dsc"], rep["mean_hd"], elapsed)
    return RunSummary(seed, atrous_attention, [h["loss"] for h in res.history],
                      [h["dsc"] for h in res.history], rep["mean_dsc"], rep["mean_hd"],
                      count_parameters(res.model)["ratio"], elapsed, res.model)


def ablation_verdict(with_aam: list[RunSummary], without: list[RunSummary],
                     from_epoch: int = LOSS_FROM_EPOCH, window: int = SMOOTH_WINDOW) -> dict:
    """Per-seed comparison of held-out DSC and smoothed training loss.

    A seed counts for the model with attention when its held-out DSC is at
    least the other's and its smoothed loss is no higher at every epoch from
    ``from_epoch`` on.  The verdict needs a strict majority of seeds.
    """
    rows = []
    for a, b in zip(with_aam, without):
        sa, sb = smoothed(a.losses, window), smoothed(b.losses, window)
        tail = slice(from_epoch - 1, None)
        rows.append({
            "seed": a.seed,
            "dsc_with": a.eval_dsc, "dsc_without": b.eval_dsc,
            "dsc_ok": a.eval_dsc >= b.eval_dsc,
            "max_smoothed_loss_gap": float(np.max(sa[tail] - sb[tail])),
            "loss_ok": bool(np.all(sa[tail] <= sb[tail])),
        })
    both = sum(r["dsc_ok"] and r["loss_ok"] for r in rows)
    required = len(rows) // 2 + 1
    return {
        "seeds": rows,
        "dsc_wins": sum(r["dsc_ok"] for r in rows),
        "loss_wins": sum(r["loss_ok"] for r in rows),
        "both_wins": both,
        "required": required,
        "pass": both >= required,
    }
