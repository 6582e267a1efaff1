"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericError, Tape, Tensor


@dataclass
class GradCheckEntry:
    name: str
    rel_error: float
    max_abs_error: float
    n_checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def __str__(self) -> str:
        rows = [f"{e.name}: rel={e.rel_error:.2e} abs={e.max_abs_error:.2e} n={e.n_checked}" for e in self.entries]
        return "\n".join(rows)


def _relative(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def _scalar(f: Callable[[], Tensor]) -> float:
    value = f()
    value = float(value.data) if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise NumericError(f"objective is not finite during gradient check: {value}")
    return value


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    tol: float | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params`` (which
    are perturbed in place). Relative error per parameter is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)``, defined as 0
    when both are zero. ``max_entries`` limits the number of coordinates
    probed per parameter (sampled with ``seed``).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("objective is not finite at the base point")
    analytic = tape.backward(loss, params)
    rng = np.random.default_rng(seed)

    entries = []
    for pos, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_entries is not None and n > max_entries:
            coords = np.sort(rng.choice(n, size=max_entries, replace=False))
        numeric = np.empty(len(coords))
        base = p.data.copy()
        for j, c in enumerate(coords):
            work = base.copy().reshape(-1)
            work[c] = base.reshape(-1)[c] + h
            p.data = work.reshape(base.shape)
            fp = _scalar(f)
            work[c] = base.reshape(-1)[c] - h
            p.data = work.reshape(base.shape)
            fm = _scalar(f)
            numeric[j] = (fp - fm) / (2.0 * h)
        p.data = base
        a = analytic[p].reshape(-1)[coords]
        name = names[pos] if names is not None else (p.name or f"param{pos}")
        entries.append(
            GradCheckEntry(
                name=name,
                rel_error=_relative(a, numeric),
                max_abs_error=float(np.max(np.abs(a - numeric))) if len(coords) else 0.0,
                n_checked=len(coords),
            )
        )
    report = GradCheckReport(entries)
    if tol is not None and not report.passed(tol):
        raise AssertionError(f"gradient check failed (tol={tol}):\n{report}")
    return report
