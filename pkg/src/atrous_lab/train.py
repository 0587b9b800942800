"""AdamW training loop, evaluation, checkpoints and the rank sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tsr
from .boxes import BBoxPrompt
from .config import RunConfig
from .data import SegSample, perturb_bbox, stack
from .errors import ContractError, FormatError, NaNLossError
from .layers import Module, Parameter
from .losses import binarize, combined_loss, dsc, hausdorff_flagged
from .model import VesselSegmenter, build_model
from .peft import count_parameters
from .tensor import Precision, Tape, backward, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "atrous-lab/checkpoint/v1"
REPORT_SCHEMA = "atrous-lab/eval-report/v1"
HISTORY_SCHEMA = "atrous-lab/history/v1"
MANIFEST = "manifest.json"


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments.

    Moments are kept only for parameters that are trainable when the
    optimizer is built.
    """

    def __init__(self, params: Sequence[tuple[str, Parameter]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = [(n, p) for n, p in params if p.requires_grad]
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self) -> None:
        missing = [n for n, p in self.params if p.grad is None]
        if missing:
            raise ContractError(f"trainable parameters without gradient: {missing[:5]}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for n, p in self.params:
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.weight_decay) - self.lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adamw_step(opt: AdamW) -> None:
    """Functional alias for ``opt.step()``."""
    opt.step()


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: VesselSegmenter
    history: list[dict] = field(default_factory=list)

    def history_json(self) -> str:
        return json.dumps({"schema": HISTORY_SCHEMA, "epochs": self.history}, indent=2,
                          sort_keys=True)


def _batches(n: int, size: int, rng: np.random.Generator):
    # Sorted within a batch: batch membership is random, reduction order is not.
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield i // size, np.sort(order[i:i + size])


def train(cfg: RunConfig, train_samples: Sequence[SegSample],
          eval_samples: Sequence[SegSample] | None = None,
          model: VesselSegmenter | None = None) -> TrainResult:
    """Deterministic AdamW training of adapters and decoder.

    Each epoch shuffles with a seeded generator and jitters every prompt box
    by up to ``cfg.bbox_max_shift`` pixels.  History rows carry the mean
    combined loss and the mean training DSC of thresholded predictions; with
    ``eval_every > 0`` held-out metrics are added on that cadence.
    """
    cfg.validate()
    model = model or build_model(cfg)
    images, masks, boxes = stack(train_samples)
    if len(train_samples) == 0:
        raise ContractError("training set is empty")
    size = cfg.model.img_size
    if images.shape[-1] != size:
        raise ContractError(f"samples are {images.shape[-1]} px but the model expects {size}")
    images = images.astype(model.precision.dtype)
    frozen_before = model.frozen_state()
    opt = AdamW(model.trainable_parameters(), cfg.optim.lr, cfg.optim.betas, cfg.optim.eps,
                cfg.optim.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        order_rng = np.random.default_rng([cfg.seed, 4, epoch])
        box_rng = np.random.default_rng([cfg.seed, 5, epoch])
        losses, scores = [], []
        for batch_id, idx in _batches(len(images), cfg.batch_size, order_rng):
            jittered = [perturb_bbox(boxes[i], cfg.bbox_max_shift, box_rng, size) for i in idx]
            target = masks[idx]
            with Tape():
                prob = model(images[idx], jittered)
                loss = combined_loss(prob.reshape(len(idx), size, size), target)
                value = loss.item()
                if not math.isfinite(value):
                    raise NaNLossError(batch_id, epoch, f" (sample ids {[train_samples[i].id for i in idx]})")
                backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(value)
            pred = binarize(prob.data[:, 0], cfg.threshold)
            scores.extend(dsc(p, t) for p, t in zip(pred, target))
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "dsc": float(np.mean(scores))}
        if eval_samples and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            rep = evaluate(model, eval_samples, cfg)
            row.update(eval_dsc=rep["mean_dsc"], eval_hd=rep["mean_hd"])
        log.info("epoch %d loss %.4f dsc %.4f", row["epoch"], row["loss"], row["dsc"])
        history.append(row)
    verify_frozen(model, frozen_before)
    model.eval()
    return TrainResult(model, history)


def verify_frozen(model: Module, before: dict[str, np.ndarray]) -> None:
    after = {n: p.data for n, p in model.named_parameters() if not p.requires_grad}
    changed = [n for n in before if n not in after or not np.array_equal(before[n], after[n])]
    if changed or set(after) != set(before):
        raise ContractError(f"frozen parameters modified during training: {changed[:5]}")


# ---------------------------------------------------------------------------
# evaluation

def predict(model: VesselSegmenter, images: np.ndarray, boxes: Sequence[BBoxPrompt],
            batch_size: int = 16) -> np.ndarray:
    """Probability maps ``[B, S, S]`` in inference mode."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            p = model(images[i:i + batch_size].astype(model.precision.dtype), boxes[i:i + batch_size])
            out.append(p.data[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:])


def report_from_masks(pred_masks, gt_masks, ids: Sequence[str], spacing: float = 1.0) -> dict:
    """Per-sample DSC / HD and their mean and population standard deviation."""
    rows = []
    for pid, p, t in zip(ids, pred_masks, gt_masks):
        hd, flag = hausdorff_flagged(p, t, spacing)
        rows.append({"id": pid, "dsc": dsc(p, t), "hd": hd, "hd_sentinel_flag": flag})
    d = np.array([r["dsc"] for r in rows], dtype=float)
    h = np.array([r["hd"] for r in rows], dtype=float)
    stat = (lambda a, f: float(f(a)) if a.size else float("nan"))
    return {
        "schema": REPORT_SCHEMA,
        "count": len(rows),
        "mean_dsc": stat(d, np.mean), "std_dsc": stat(d, np.std),
        "mean_hd": stat(h, np.mean), "std_hd": stat(h, np.std),
        "sentinel_count": sum(r["hd_sentinel_flag"] for r in rows),
        "samples": rows,
    }


def evaluate(model: VesselSegmenter, samples: Sequence[SegSample], cfg: RunConfig | None = None) -> dict:
    cfg = cfg or model.cfg
    images, masks, boxes = stack(samples)
    prob = predict(model, images, boxes)
    return report_from_masks(binarize(prob, cfg.threshold), masks, [s.id for s in samples],
                             cfg.hd_spacing)


# ---------------------------------------------------------------------------
# checkpoints

def _tensor_file(name: str) -> str:
    return f"{name}.tsr"


def save_checkpoint(model: VesselSegmenter, path, history: list[dict] | None = None) -> dict:
    """Directory with ``manifest.json`` and one TSR1 file per parameter or buffer."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    params = dict(model.named_parameters())
    entries = []
    for name, t in model._walk():
        tsr.save(root / _tensor_file(name), t.data)
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype),
                        "kind": "parameter" if name in params else "buffer",
                        "trainable": bool(name in params and params[name].requires_grad),
                        "file": _tensor_file(name)})
    manifest = {"schema": CHECKPOINT_SCHEMA, "config": model.cfg.to_dict(),
                "precision": model.precision.name, "tensors": entries}
    if history is not None:
        manifest["history"] = history
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(path) -> VesselSegmenter:
    root = Path(path)
    man_path = root / MANIFEST
    if not man_path.is_file():
        raise FormatError(f"{man_path}: checkpoint manifest not found")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{man_path}: invalid JSON ({err.msg})", offset=err.pos) from None
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise FormatError(f"{man_path}: expected schema {CHECKPOINT_SCHEMA!r}")
    cfg = RunConfig.from_dict(manifest["config"])
    model = build_model(cfg, Precision[manifest.get("precision", "F32")])
    state = {}
    for e in manifest["tensors"]:
        arr = tsr.load(root / e["file"])
        if list(arr.shape) != e["shape"]:
            raise FormatError(f"{e['file']}: shape {list(arr.shape)} disagrees with manifest {e['shape']}")
        state[e["name"]] = arr
    try:
        model.load_state_dict(state)
    except KeyError as err:
        raise FormatError(f"{man_path}: {err}") from None
    model.eval()
    return model


# ---------------------------------------------------------------------------
# rank sweep

SWEEP_FIELDS = ("rank", "trainable", "total", "trainable_ratio", "final_dsc")


def rank_sweep(cfg: RunConfig, ranks: Sequence[int], train_samples: Sequence[SegSample],
               eval_samples: Sequence[SegSample] | None = None) -> list[dict]:
    """One run per rank with shared seed and data.

    ``final_dsc`` is the held-out mean DSC when ``eval_samples`` is given,
    otherwise the last training-epoch DSC.
    """
    if not ranks:
        raise ContractError("rank list is empty")
    rows = []
    for r in ranks:
        c = cfg.replace(adapter=type(cfg.adapter)(**{**cfg.adapter.__dict__, "rank": int(r)}))
        model = build_model(c)
        counts = count_parameters(model)
        res = train(c, train_samples, None, model)
        if eval_samples:
            final = evaluate(res.model, eval_samples, c)["mean_dsc"]
        else:
            final = res.history[-1]["dsc"] if res.history else float("nan")
        rows.append({"rank": int(r), "trainable": counts["trainable"], "total": counts["total"],
                     "trainable_ratio": counts["ratio"], "final_dsc": final})
        log.info("rank %d ratio %.5f dsc %.4f", r, counts["ratio"], final)
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row[k] for k in SWEEP_FIELDS})
    return buf.getvalue()
