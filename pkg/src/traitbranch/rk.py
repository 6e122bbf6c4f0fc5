"""Adaptive Dormand-Prince 5(4) integration with positivity rejection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import StiffnessError

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class IntegrationStats:
    accepted: int = 0
    rejected: int = 0
    positivity_rejections: int = 0
    evaluations: int = 0


def integrate(f: Callable[[float, np.ndarray], np.ndarray], y0, t_eval, *, t0: float | None = None,
              rtol: float = 1e-8, atol: float = 1e-12, positive: np.ndarray | None = None,
              max_steps: int = 1_000_000, implicit: bool = False) -> tuple[np.ndarray, IntegrationStats]:
    """Solve ``y' = f(t, y)`` and return ``y`` at each of ``t_eval``.

    Steps are clipped to land exactly on output times.  Components flagged
    in ``positive`` must stay nonnegative; a step that breaks this is
    rejected and halved.  ``implicit=True`` hands the problem to a stiff
    library solver instead (no positivity control).
    """
    y = np.array(y0, dtype=float)
    t_eval = np.asarray(t_eval, float)
    t = float(t_eval[0]) if t0 is None else float(t0)
    if np.any(np.diff(t_eval) < 0) or t_eval[0] < t:
        raise ValueError("t_eval must be non-decreasing and start at or after t0")
    stats = IntegrationStats()
    out = np.empty((t_eval.size,) + y.shape)
    if implicit:
        return _implicit(f, y, t, t_eval, rtol, atol, out, stats)

    def scale(a, b):
        return atol + rtol * np.maximum(np.abs(a), np.abs(b))

    k1 = f(t, y)
    stats.evaluations += 1
    span = t_eval[-1] - t
    d0 = np.sqrt(np.mean((y / scale(y, y)) ** 2))
    d1 = np.sqrt(np.mean((k1 / scale(y, y)) ** 2))
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
    h = min(h, span) if span > 0 else 0.0

    k = np.empty((7,) + y.shape)
    for idx, target in enumerate(t_eval):
        while t < target:
            if stats.accepted + stats.rejected >= max_steps:
                raise StiffnessError(f"more than {max_steps} steps before t={target}; "
                                     "the system may be stiff, retry with implicit=True")
            step = min(h, target - t)
            if step <= 1e-14 * max(1.0, abs(t)):
                raise StiffnessError(f"step size underflow at t={t:.6g}; retry with implicit=True")
            last = step >= target - t
            k[0] = k1
            try:
                for s in range(1, 7):
                    ys = y + step * np.tensordot(_A[s], k[:s], axes=1)
                    k[s] = f(t + _C[s] * step, ys)
                    stats.evaluations += 1
            except ArithmeticError:
                # an overlong trial step can drive a stage state out of range;
                # failures at accepted states still propagate through k1
                stats.rejected += 1
                h = 0.25 * step
                continue
            y_new = ys  # the seventh stage is evaluated at the 5th-order solution
            err = step * np.tensordot(_E, k, axes=1)
            with np.errstate(invalid="ignore", over="ignore"):
                err_norm = float(np.max(np.abs(err) / scale(y, y_new))) if y.size else 0.0
            if not np.isfinite(err_norm):
                stats.rejected += 1
                h = 0.25 * step
                continue
            if positive is not None and np.any(y_new[positive] < 0):
                stats.rejected += 1
                stats.positivity_rejections += 1
                h = 0.5 * step
                continue
            if err_norm <= 1.0:
                t = target if last else t + step
                y = y_new
                k1 = k[6].copy()
                stats.accepted += 1
                fac = 5.0 if err_norm == 0 else min(5.0, 0.9 * err_norm ** -0.2)
                # a step clipped to an output time says little about the next one
                h = max(h, step * fac) if last and step < h else step * fac
            else:
                stats.rejected += 1
                h = step * max(0.2, 0.9 * err_norm ** -0.2)
        out[idx] = y
    return out, stats


def _implicit(f, y, t, t_eval, rtol, atol, out, stats):
    sol = solve_ivp(f, (t, t_eval[-1]), y, method="Radau", t_eval=t_eval, rtol=rtol, atol=atol)
    if not sol.success:
        raise StiffnessError(f"implicit solver failed: {sol.message}")
    stats.evaluations = int(sol.nfev)
    out[:] = sol.y.T
    return out, stats
