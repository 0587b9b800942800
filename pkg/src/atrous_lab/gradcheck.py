"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, backward, no_grad, tsum, mul


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    n_checked: int
    worst: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {
            "max_rel_err": float(self.max_rel_err),
            "pass": bool(self.passed),
            "tol": float(self.tol),
            "n_checked": int(self.n_checked),
        }


def _forward(f, inputs) -> np.ndarray:
    with no_grad():
        return np.array(f(*inputs).data, dtype=np.float64, copy=True)


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-5,
    seed: int = 0x5EED,
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(*inputs)`` may return a tensor of any shape; it is contracted with a
    fixed random cotangent so every output element is exercised.  Only inputs
    with ``requires_grad`` are perturbed.  Step size is
    ``1e-6 * max(1, |x_i|)``; the per-element relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError(f"gradcheck requires F64 inputs, got {t.dtype}")
        if not t.data.flags.writeable or not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data).copy()

    out0 = _forward(f, inputs)
    out1 = _forward(f, inputs)
    if not np.array_equal(out0, out1, equal_nan=True):
        raise ContractError("function under gradcheck is not deterministic")

    rng = np.random.default_rng(seed)
    cot = np.ones_like(out0) if out0.size == 1 else rng.standard_normal(out0.shape)

    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    with Tape():
        out = f(*inputs)
        loss = tsum(mul(out, Tensor(cot.astype(out.dtype))))
    if loss._tape is not None:
        backward(loss)
    analytic = [
        t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size) for t in inputs
    ]
    for t, g in zip(inputs, saved):
        t.grad = g

    worst_err, worst_at, n = 0.0, None, 0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-6 * max(1.0, abs(orig))
            xp, xm = orig + h, orig - h
            flat[i] = xp
            fp = _forward(f, inputs)
            flat[i] = xm
            fm = _forward(f, inputs)
            flat[i] = orig
            num = float(np.sum((fp - fm) * cot)) / (xp - xm)
            ana = float(analytic[k][i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            n += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (k, i)
    return GradcheckReport(worst_err, worst_err <= tol, tol, n, worst_at)
