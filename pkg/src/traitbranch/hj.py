"""Viscosity solutions of ``u_t = H(x, u_x)`` on a bounded mesh.

Two independent discretizations are provided and cross-validated:

* ``local-upwind``: explicit local Lax-Friedrichs with the closed-form
  Hamiltonian and a CFL step re-evaluated every step;
* ``nonlocal-exponential``: the exponent ODE system run on the solver mesh
  with an artificial scale ``Lambda = h_hat / dx``.  Its consistency error is
  ``O(1 / Lambda) = O(dx)``.

Both use linear extrapolation at the window edges.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Hamiltonian, discretize_kernel
from .errors import CFLError, ConfigError, SchemeDisagreementError
from .meanfield import exponent_rhs
from .rk import integrate

SCHEMES = ("local-upwind", "nonlocal-exponential")


@dataclass(frozen=True)
class Mesh:
    x_min: float
    x_max: float
    dx: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.dx > 0):
            raise ConfigError("mesh needs x_min < x_max and dx > 0")

    @property
    def x(self) -> np.ndarray:
        n = int(round((self.x_max - self.x_min) / self.dx))
        return self.x_min + self.dx * np.arange(n + 1)


@dataclass
class HJSolution:
    x: np.ndarray
    times: np.ndarray
    u: np.ndarray  # (T, J)
    dx: float
    dt: float | None
    scheme: str
    hamiltonian: Hamiltonian
    steps: int = 0
    error_estimate: float | None = None

    def at(self, t: float) -> np.ndarray:
        """Profile at time ``t``, linear in time between outputs."""
        ts = self.times
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise ConfigError(f"t={t} outside the solved horizon [{ts[0]}, {ts[-1]}]")
        k = int(np.searchsorted(ts, t))
        if k < len(ts) and math.isclose(ts[k], t, rel_tol=0, abs_tol=1e-12):
            return self.u[k]
        if k == 0:
            return self.u[0]
        k = min(k, len(ts) - 1)
        lam = (t - ts[k - 1]) / (ts[k] - ts[k - 1])
        return (1 - lam) * self.u[k - 1] + lam * self.u[k]

    def values(self, t: float, x) -> np.ndarray:
        return np.interp(x, self.x, self.at(t))


def _ghost(u: np.ndarray) -> np.ndarray:
    return np.concatenate([[2 * u[0] - u[1]], u, [2 * u[-1] - u[-2]]])


def _u0_on(u0, x: np.ndarray) -> np.ndarray:
    v = np.asarray(u0(x) if callable(u0) else u0, float)
    if v.shape != x.shape:
        raise ConfigError(f"u0 must give one value per mesh node ({x.size}), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ConfigError("u0 must be finite on the mesh")
    return v


def cfl_step(ham: Hamiltonian, lipschitz: float, dx: float, cfl: float = 0.9) -> float:
    """``cfl * dx / (2 p M'(L + 1))``; infinite when ``p = 0``."""
    speed = 2.0 * ham.p * abs(ham.kernel.mgf_prime(lipschitz + 1.0))
    return math.inf if speed == 0 else cfl * dx / speed


def _solve_upwind(ham, x, u, times, dx, dt, cfl):
    net = ham.net(x)
    p = ham.p
    out = np.empty((times.size, x.size))
    out[0] = u
    t = times[0]
    steps = 0
    for k, target in enumerate(times[1:], start=1):
        while t < target - 1e-14 * max(1.0, abs(target)):
            q = np.diff(_ghost(u)) / dx  # q[j] is the slope left of node j
            qm, qp = q[:-1], q[1:]
            bound = cfl_step(ham, float(np.max(np.abs(q))), dx, cfl)
            if dt is None:
                step = min(bound, target - t)
            else:
                if dt > bound / cfl * 1.0000001:
                    raise CFLError(f"dt = {dt:.4g} violates the monotonicity bound at t={t:.4g}",
                                   suggested_dt=bound)
                step = min(dt, target - t)
            if p > 0:
                mp = ham.kernel.mgf_prime_array(np.concatenate([qm, qp[-1:]]))
                theta = p * np.maximum(np.abs(mp[:-1]), np.abs(mp[1:]))
                flux = net + p * ham.kernel.mgf_array(0.5 * (qm + qp)) + 0.5 * theta * (qp - qm)
            else:
                flux = net
            u = u + step * flux
            t = target if step >= target - t else t + step
            steps += 1
        out[k] = u
    return out, steps


def _solve_nonlocal(ham, x, u, times, dx, h_hat, tail_tol, rtol, atol):
    lam = h_hat / dx
    dk = discretize_kernel(ham.kernel, h_hat, ham.p, tail_tol)
    w = np.asarray(dk.weights, float)
    net = ham.net(x)
    y, stats = integrate(lambda t, v: exponent_rhs(v, net, w, lam, "extrapolate"), u, times,
                         rtol=rtol, atol=atol)
    return y, stats.accepted


def solve_hj(ham: Hamiltonian, u0: Callable | np.ndarray, mesh: Mesh, t_end: float,
             scheme: str = "local-upwind", *, t_eval: Sequence[float] | None = None,
             dt: float | None = None, cfl: float = 0.9, h_hat: float = 0.25,
             tail_tol: float = 1e-12, rtol: float = 1e-7, atol: float = 1e-10) -> HJSolution:
    """Solve ``u_t = H(x, u_x)`` from ``u0`` up to ``t_end``.

    ``dt`` fixes the upwind step (checked against the CFL bound); by
    default the largest admissible step is used.  ``h_hat`` is the kernel
    quadrature step of the nonlocal scheme.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    x = mesh.x
    if x.size < 3:
        raise ConfigError("mesh needs at least three nodes")
    u = _u0_on(u0, x)
    times = np.array([0.0, float(t_end)]) if t_eval is None else np.asarray(t_eval, float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ConfigError("t_eval must start at 0 and increase strictly")
    if scheme == "local-upwind":
        if dt is not None and not dt > 0:
            raise ConfigError("dt must be positive")
        out, steps = _solve_upwind(ham, x, u, times, mesh.dx, dt, cfl)
    else:
        out, steps = _solve_nonlocal(ham, x, u, times, mesh.dx, h_hat, tail_tol, rtol, atol)
    return HJSolution(x, times, out, mesh.dx, dt, scheme, ham, steps)


# --------------------------------------------------------------------------
# Cross-validation
# --------------------------------------------------------------------------


def _sup_on(sol: HJSolution, other: HJSolution, k: int, compact) -> float:
    sel = (sol.x >= compact[0] - 1e-12) & (sol.x <= compact[1] + 1e-12)
    xs = sol.x[sel]
    return float(np.max(np.abs(sol.u[k][sel] - np.interp(xs, other.x, other.u[k]))))


@dataclass
class CrossValidation:
    dx_ladder: tuple[float, ...]
    upwind: list[HJSolution]
    nonlocal_: list[HJSolution]
    refinement_gaps: tuple[float, ...]
    scheme_gap: float
    ref_tol: float
    reference: HJSolution

    @property
    def refinement_ratios(self) -> tuple[float, ...]:
        g = self.refinement_gaps
        return tuple(a / b if b > 0 else math.inf for a, b in zip(g, g[1:]))

    @property
    def agree(self) -> bool:
        return self.scheme_gap <= 2 * self.ref_tol

    def to_json(self) -> str:
        return json.dumps({"dx_ladder": self.dx_ladder, "refinement_gaps": self.refinement_gaps,
                           "refinement_ratios": self.refinement_ratios, "scheme_gap": self.scheme_gap,
                           "ref_tol": self.ref_tol, "error_estimate": self.reference.error_estimate})


def cross_validate(ham: Hamiltonian, u0, window: tuple[float, float], t_end: float, *,
                   compact: tuple[float, float] | None = None,
                   dx_ladder: Sequence[float] = (4e-3, 2e-3, 1e-3), ref_tol: float = 1e-2,
                   t_eval: Sequence[float] | None = None, h_hat: float = 0.25,
                   raise_on_disagreement: bool = True) -> CrossValidation:
    """Run both schemes on a ladder of meshes and compare on ``compact``.

    The reference is the finest upwind solution; its error estimate is the
    last refinement gap.  Scheme disagreement above ``2 * ref_tol`` at the
    finest mesh raises ``SchemeDisagreementError``.
    """
    ladder = tuple(sorted(map(float, dx_ladder), reverse=True))
    if len(ladder) < 2:
        raise ConfigError("need at least two mesh sizes")
    compact = tuple(window) if compact is None else tuple(compact)
    up, nl = [], []
    for dx in ladder:
        mesh = Mesh(window[0], window[1], dx)
        up.append(solve_hj(ham, u0, mesh, t_end, "local-upwind", t_eval=t_eval))
        nl.append(solve_hj(ham, u0, mesh, t_end, "nonlocal-exponential", t_eval=t_eval, h_hat=h_hat))
    last = len(up[0].times) - 1
    gaps = tuple(max(_sup_on(up[j], up[j + 1], k, compact) for k in range(last + 1))
                 for j in range(len(up) - 1))
    scheme_gap = max(_sup_on(up[-1], nl[-1], k, compact) for k in range(last + 1))
    ref = up[-1]
    ref.error_estimate = gaps[-1]
    cv = CrossValidation(ladder, up, nl, gaps, scheme_gap, ref_tol, ref)
    if raise_on_disagreement and not cv.agree:
        raise SchemeDisagreementError(
            f"schemes differ by {scheme_gap:.3g} > 2 * ref_tol = {2 * ref_tol:.3g} at dx = {ladder[-1]}")
    return cv


# --------------------------------------------------------------------------
# Cut-off solution, survival set, Lipschitz constants
# --------------------------------------------------------------------------


@dataclass
class CutoffSolution:
    x: np.ndarray
    times: np.ndarray
    beta: np.ndarray  # -inf on extinction, NaN in the undecided band
    status: np.ndarray  # +1 survival, -1 extinction, 0 undecided
    band_tol: float

    @property
    def survival(self) -> np.ndarray:
        return self.status > 0

    @property
    def extinction(self) -> np.ndarray:
        return self.status < 0


def apply_cutoff(sol: HJSolution, band_tol: float | None = None) -> CutoffSolution:
    """``u`` where ``u > band_tol``, ``-inf`` where ``u < -band_tol``, unclassified otherwise."""
    if band_tol is None:
        band_tol = 2.0 * sol.error_estimate if sol.error_estimate is not None else 0.0
    if band_tol < 0:
        raise ConfigError("band_tol must be nonnegative")
    u = sol.u
    status = np.where(u > band_tol, 1, np.where(u < -band_tol, -1, 0))
    if band_tol == 0:
        status = np.where(u > 0, 1, np.where(u < 0, -1, 0))
    beta = np.where(status > 0, u, np.where(status < 0, -np.inf, np.nan))
    return CutoffSolution(sol.x, sol.times, beta, status, float(band_tol))


@dataclass(frozen=True)
class SurvivalSet:
    t: float
    intervals: tuple[tuple[float, float], ...]

    @property
    def empty(self) -> bool:
        return not self.intervals

    def contains(self, a: float, b: float) -> bool:
        return any(lo <= a and b <= hi for lo, hi in self.intervals)

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "intervals": [list(iv) for iv in self.intervals]})


def survival_set(sol: HJSolution, t: float) -> SurvivalSet:
    """Maximal intervals where ``u(t, .) > 0``; interior endpoints by linear root finding."""
    u = sol.at(t)
    x = sol.x
    pos = u > 0
    out = []
    j = 0
    n = len(u)
    while j < n:
        if not pos[j]:
            j += 1
            continue
        start = j
        while j < n and pos[j]:
            j += 1
        end = j - 1
        a = x[0] if start == 0 else x[start - 1] + (x[start] - x[start - 1]) * u[start - 1] / (u[start - 1] - u[start])
        b = x[-1] if end == n - 1 else x[end] + (x[end + 1] - x[end]) * u[end] / (u[end] - u[end + 1])
        out.append((float(a), float(b)))
    return SurvivalSet(float(t), tuple(out))


def classify_compact(sol: HJSolution, t: float, compact: tuple[float, float], band_tol: float) -> int:
    """+1 if ``u > band_tol`` on the compact, -1 if ``u < -band_tol``, else 0."""
    a, b = compact
    if a < sol.x[0] - 1e-12 or b > sol.x[-1] + 1e-12:
        raise ConfigError(f"compact {compact} is outside the solver window")
    u = sol.at(t)
    sel = (sol.x >= a) & (sol.x <= b)
    vals = np.concatenate([u[sel], np.interp([a, b], sol.x, u)])
    if np.min(vals) > band_tol:
        return 1
    if np.max(vals) < -band_tol:
        return -1
    return 0


@dataclass(frozen=True)
class LipschitzReport:
    times: np.ndarray
    spatial: np.ndarray
    L_T: float
    time_lipschitz: float
    time_bound: float

    def to_json(self) -> str:
        return json.dumps({"L_T": self.L_T, "time_lipschitz": self.time_lipschitz,
                           "time_bound": self.time_bound, "spatial": self.spatial.tolist()})


def lipschitz_report(sol: HJSolution, x_grid: np.ndarray | None = None) -> LipschitzReport:
    """Measured spatial and time Lipschitz constants, with the a priori time bound
    ``bbar + dbar + 2 p int G exp(L_T |y|)``."""
    spatial = np.max(np.abs(np.diff(sol.u, axis=1)), axis=1) / sol.dx
    L_T = float(spatial.max())
    if len(sol.times) > 1:
        time_L = float(np.max(np.abs(np.diff(sol.u, axis=0)) / np.diff(sol.times)[:, None]))
    else:
        time_L = 0.0
    ham = sol.hamiltonian
    xs = sol.x if x_grid is None else x_grid
    bbar = float(np.max(ham.birth(xs)))
    dbar = float(np.max(ham.death(xs)))
    bound = bbar + dbar + 2 * ham.p * ham.kernel.abs_exp_moment(L_T)
    return LipschitzReport(sol.times, spatial, L_T, time_L, bound)


def padded_window(compact: tuple[float, float], t_end: float, ham: Hamiltonian, lipschitz: float,
                  safety: float = 1.5, minimum: float = 0.5) -> tuple[float, float]:
    """Window large enough that edge effects cannot reach ``compact`` by ``t_end``.

    Information travels at most at speed ``p M'(L + 1)`` for slopes up to ``L``.
    """
    speed = ham.p * abs(ham.kernel.mgf_prime(lipschitz + 1.0))
    pad = max(safety * speed * t_end, minimum)
    return compact[0] - pad, compact[1] + pad
