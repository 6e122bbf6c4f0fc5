"""Deterministic moment systems (means, exponents, second moments) and the
variance-bound checks built on them.

Mean and moment systems run in plain simulation time.  The exponent system
``u = ln n / ln K`` runs in rescaled time ``t / ln K``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import MAX_EXP_ARG, Model, TraitGrid, classify_regime, growth_dominates
from .errors import BoundaryError, ConfigError, ExponentOverflowError, WindowBudgetError
from .rk import IntegrationStats, integrate

MEAN_TOL = (1e-8, 1e-12)
MOMENT_TOL = (1e-6, 1e-10)
WINDOW_BUDGET = 300


def _times(t_end: float, t_eval, t0: float = 0.0) -> np.ndarray:
    if t_eval is None:
        return np.array([t0, float(t_end)])
    t = np.asarray(t_eval, float).ravel()
    if t.size == 0 or np.any(np.diff(t) <= 0) or t[0] < t0:
        raise ConfigError("output times must be strictly increasing and nonnegative")
    return t


def mutation_inflow(n: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_l w_l n_{i-l}``: mutants arriving at each site from inside the window."""
    L = (len(weights) - 1) // 2
    return np.convolve(n, weights)[L:L + len(n)]


def outflow_rate(size: int, weights: np.ndarray) -> np.ndarray:
    """Per-individual rate at which each site sends mutants outside the window."""
    L = (len(weights) - 1) // 2
    cw = np.concatenate([[0.0], np.cumsum(weights)])
    pos = np.arange(size)
    # offsets l with 0 <= pos + l <= size - 1 stay inside
    lo = np.clip(-pos, -L, L + 1) + L
    hi = np.clip(size - 1 - pos, -L - 1, L) + L + 1
    inside = cw[np.maximum(hi, lo)] - cw[lo]
    return cw[-1] - inside


def mutation_matrix(model: Model) -> np.ndarray:
    """Dense ``W[i, j] = w_{i-j}``: rate at which one individual at ``j`` seeds ``i``."""
    w = model.dkernel.weights
    L = model.dkernel.L_max
    i = np.arange(model.grid.size)
    off = i[:, None] - i[None, :]
    return np.where(np.abs(off) <= L, w[np.clip(off + L, 0, 2 * L)], 0.0)


# --------------------------------------------------------------------------
# Mean system
# --------------------------------------------------------------------------


@dataclass
class MeanField:
    grid: TraitGrid
    times: np.ndarray
    n: np.ndarray  # (T, sites)
    leak: np.ndarray  # cumulative mutant mass sent outside the window
    stats: IntegrationStats = field(default_factory=IntegrationStats)

    @property
    def total(self) -> np.ndarray:
        return self.n.sum(axis=1)

    def exponent(self) -> "ExponentField":
        with np.errstate(divide="ignore"):
            u = np.log(self.n) / self.grid.log_K
        return ExponentField(self.grid, self.times / self.grid.log_K, u)


def integrate_mean(model: Model, n0, t_end: float, t_eval=None, *, rtol: float = MEAN_TOL[0],
                   atol: float = MEAN_TOL[1], implicit: bool = False,
                   leak_tol: float = 1e-12) -> MeanField:
    """Mean sizes ``n_i(t)`` with the window-truncated convolution."""
    n0 = np.asarray(n0, float)
    size = model.grid.size
    if n0.shape != (size,):
        raise ConfigError(f"n0 must have {size} entries, got shape {n0.shape}")
    if np.any(n0 < 0) or not np.all(np.isfinite(n0)):
        raise ConfigError("n0 must be finite and nonnegative")
    times = _times(t_end, t_eval)
    net = model.rates.b - model.rates.d
    w = np.asarray(model.dkernel.weights, float)
    out_rate = outflow_rate(size, w)

    def rhs(t, y):
        n = y[:size]
        return np.concatenate([net * n + mutation_inflow(n, w), [out_rate @ n]])

    pos = np.ones(size + 1, dtype=bool)
    y, stats = integrate(rhs, np.concatenate([n0, [0.0]]), times, t0=0.0, rtol=rtol, atol=atol,
                         positive=pos, implicit=implicit)
    mf = MeanField(model.grid, times, y[:, :size], y[:, size], stats)
    if model.boundary == "strict":
        scale = max(float(mf.total.max()), 1.0)
        if mf.leak[-1] > leak_tol * scale:
            raise BoundaryError(f"mean mass {mf.leak[-1]:.3g} left the window under the 'strict' policy")
    return mf


# --------------------------------------------------------------------------
# Exponent system
# --------------------------------------------------------------------------


@dataclass
class ExponentField:
    grid: TraitGrid
    times: np.ndarray  # rescaled
    u: np.ndarray  # (T, sites)
    stats: IntegrationStats = field(default_factory=IntegrationStats)

    def lipschitz(self) -> np.ndarray:
        """Discrete spatial Lipschitz constant at each output time."""
        if self.u.shape[1] < 2:
            return np.zeros(len(self.times))
        return np.max(np.abs(np.diff(self.u, axis=1)), axis=1) / self.grid.delta


def _pad(u: np.ndarray, L: int, boundary: str) -> np.ndarray:
    if boundary == "truncate":
        fill = np.full(L, -np.inf)
        return np.concatenate([fill, u, fill])
    if boundary == "extrapolate":
        k = np.arange(1, L + 1)
        if u.size > 1:
            left = u[0] - (u[1] - u[0]) * k[::-1]
            right = u[-1] + (u[-1] - u[-2]) * k
        else:
            left = right = np.full(L, u[0])
        return np.concatenate([left, u, right])
    raise ConfigError(f"boundary must be 'truncate' or 'extrapolate', got {boundary!r}")


def exponent_rhs(u: np.ndarray, net: np.ndarray, weights: np.ndarray, log_K: float,
                 boundary: str = "truncate") -> np.ndarray:
    """``r_i + sum_l w_l exp(ln K (u_{i-l} - u_i))`` evaluated with a max shift."""
    L = (len(weights) - 1) // 2
    if not np.any(weights > 0):
        return net.copy()
    win = sliding_window_view(_pad(u, L, boundary), 2 * L + 1)
    # column c holds site i - L + c, i.e. offset l = L - c from the source
    z = log_K * (win - u[:, None])
    shift = z.max(axis=1)
    with np.errstate(invalid="ignore"):
        s = np.exp(z - shift[:, None]) @ weights[::-1]
    top = shift + np.log(np.maximum(s, 1e-300))
    if np.any(top > MAX_EXP_ARG):
        i = int(np.argmax(top))
        raise ExponentOverflowError(
            f"exponential sum overflows at site {i} (log size {top[i]:.1f}); "
            "the Lipschitz constant is too large for this window")
    return net + np.exp(shift) * s


def integrate_exponent(model: Model, u0, t_end: float, t_eval=None, *, rtol: float = MEAN_TOL[0],
                       atol: float = MEAN_TOL[1], boundary: str = "truncate",
                       implicit: bool = False) -> ExponentField:
    """Exponent system in rescaled time.

    ``boundary='truncate'`` treats sites outside the window as empty (the
    model's absorb policy); ``'extrapolate'`` continues ``u`` linearly.
    """
    u0 = np.asarray(u0, float)
    if u0.shape != (model.grid.size,) or not np.all(np.isfinite(u0)):
        raise ConfigError("u0 must be finite at every site")
    times = _times(t_end, t_eval)
    net = np.asarray(model.rates.b - model.rates.d, float)
    w = np.asarray(model.dkernel.weights, float)
    lk = model.log_K
    y, stats = integrate(lambda t, u: exponent_rhs(u, net, w, lk, boundary), u0, times, t0=0.0,
                         rtol=rtol, atol=atol, implicit=implicit)
    return ExponentField(model.grid, times, y, stats)


# --------------------------------------------------------------------------
# Second moments
# --------------------------------------------------------------------------


@dataclass
class MomentTrajectory:
    grid: TraitGrid
    times: np.ndarray
    m: np.ndarray  # (T, W)
    cov: np.ndarray  # (T, W, W)
    stats: IntegrationStats = field(default_factory=IntegrationStats)

    @property
    def s(self) -> np.ndarray:
        """Raw second moments ``E[N_i N_j]``."""
        return self.cov + self.m[:, :, None] * self.m[:, None, :]

    @property
    def var(self) -> np.ndarray:
        return np.diagonal(self.cov, axis1=1, axis2=2).copy()

    @property
    def variance_to_mean(self) -> np.ndarray:
        """Variance over mean (NaN where the mean is zero)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.m > 0, self.var / self.m, np.nan)

    @property
    def relative_variance(self) -> np.ndarray:
        """``E[((N - m) / m)^2]`` (NaN where the mean is zero)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.m > 0, self.var / self.m**2, np.nan)


def integrate_second_moments(model: Model, m0, t_end: float, t_eval=None, *, cov0="poisson",
                             rtol: float = MOMENT_TOL[0], atol: float = MOMENT_TOL[1],
                             budget: int = WINDOW_BUDGET) -> MomentTrajectory:
    """Exact first and second moments of the branching process.

    ``cov0`` is ``'poisson'`` (independent Poisson sites), ``'deterministic'``
    (zero covariance) or an explicit matrix.
    """
    size = model.grid.size
    if size > budget:
        raise WindowBudgetError(f"window has {size} sites, budget is {budget}; "
                                "restrict the model to a smaller window first")
    m0 = np.asarray(m0, float)
    if m0.shape != (size,) or np.any(m0 < 0):
        raise ConfigError("m0 must be nonnegative with one entry per site")
    if isinstance(cov0, str):
        if cov0 == "poisson":
            C0 = np.diag(m0)
        elif cov0 == "deterministic":
            C0 = np.zeros((size, size))
        else:
            raise ConfigError(f"unknown initial covariance {cov0!r}")
    else:
        C0 = np.asarray(cov0, float)
        if C0.shape != (size, size):
            raise ConfigError("cov0 must be a square matrix matching the window")
    times = _times(t_end, t_eval)
    Wm = mutation_matrix(model)
    A = np.diag(model.rates.b - model.rates.d) + Wm
    bd = model.rates.b + model.rates.d

    def rhs(t, y):
        m = y[:size]
        C = y[size:].reshape(size, size)
        AC = A @ C
        dC = AC + AC.T
        dC[np.diag_indices(size)] += bd * m + Wm @ m
        return np.concatenate([A @ m, dC.ravel()])

    pos = np.zeros(size + size * size, dtype=bool)
    pos[:size] = True
    y, stats = integrate(rhs, np.concatenate([m0, C0.ravel()]), times, t0=0.0, rtol=rtol, atol=atol,
                         positive=pos)
    cov = y[:, size:].reshape(-1, size, size)
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return MomentTrajectory(model.grid, times, y[:, :size], cov, stats)


# --------------------------------------------------------------------------
# Variance bounds
# --------------------------------------------------------------------------


@dataclass
class BoundReport:
    name: str
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    constants: dict

    @property
    def margins(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def margin(self) -> float:
        return float(np.nanmin(self.margins))

    @property
    def passed(self) -> bool:
        return self.margin >= 0

    def to_jsonl(self) -> str:
        rows = [{"bound": self.name, "margin": self.margin, "passed": self.passed, **self.constants}]
        for k, t in enumerate(self.times):
            for i in range(self.lhs.shape[1]):
                if np.isfinite(self.lhs[k, i]):
                    rows.append({"t": float(t), "site": i, "lhs": float(self.lhs[k, i]),
                                 "rhs": float(self.rhs[k, i]), "margin": float(self.rhs[k, i] - self.lhs[k, i])})
        return "\n".join(json.dumps(r) for r in rows) + "\n"


def _bracket_sup(mt: MomentTrajectory, model: Model, keep: np.ndarray) -> float:
    """Largest ``b_i + d_i + (W m)_i / m_i`` over the kept output times and live sites."""
    w = np.asarray(model.dkernel.weights, float)
    bd = model.rates.b + model.rates.d
    best = 0.0
    for k in np.nonzero(keep)[0]:
        m = mt.m[k]
        live = m > 0
        if live.any():
            ratio = bd[live] + mutation_inflow(m, w)[live] / m[live]
            best = max(best, float(ratio.max()))
    return best


def _horizon(times: np.ndarray, horizon: float | None) -> np.ndarray:
    return np.ones(times.size, bool) if horizon is None else times <= horizon + 1e-12


def check_variance_bound_subcritical(mt: MomentTrajectory, model: Model, *, alpha: float | None = None,
                                     horizon: float | None = None) -> BoundReport:
    """``Y_i(t) <= exp((alpha + eps) t) sup_i Y_i(0) + C_B t`` in simulation time."""
    regime = classify_regime(model.rates)
    if regime.tag != "subcritical":
        raise ConfigError(f"subcritical bound needs alpha <= 0, got {regime.alpha:.4g}")
    alpha = regime.alpha if alpha is None else float(alpha)
    eps = model.dkernel.riemann_defect
    keep = _horizon(mt.times, horizon)
    t = mt.times[keep]
    ratio = mt.variance_to_mean[keep]
    y0 = float(np.nanmax(ratio[0])) if np.any(np.isfinite(ratio[0])) else 0.0
    cb = _bracket_sup(mt, model, keep)
    rhs = np.exp((alpha + eps) * t)[:, None] * y0 + cb * t[:, None]
    rhs = np.broadcast_to(rhs, ratio.shape).copy()
    return BoundReport("subcritical-variance", t, ratio, rhs,
                       {"alpha": alpha, "eps_K": eps, "C_B": cb, "sup_var_over_mean_0": y0})


def check_variance_bound_supercritical(mt: MomentTrajectory, model: Model, a_exponent: float, *,
                                       horizon: float | None = None) -> BoundReport:
    """``E[S_i(t)^2] <= sup_i E[S_i(0)^2] + C_B t / K^a`` in simulation time."""
    if not growth_dominates(model.rates):
        raise ConfigError("supercritical bound needs b_i >= d_i at every site")
    keep = _horizon(mt.times, horizon)
    t = mt.times[keep]
    rel = mt.relative_variance[keep]
    s0 = float(np.nanmax(rel[0])) if np.any(np.isfinite(rel[0])) else 0.0
    cb = _bracket_sup(mt, model, keep)
    Ka = math.exp(a_exponent * model.log_K)
    rhs = np.broadcast_to(s0 + cb * t[:, None] / Ka, rel.shape).copy()
    return BoundReport("supercritical-variance", t, rel, rhs,
                       {"a": a_exponent, "K_a": Ka, "C_B": cb, "sup_relative_var_0": s0})


@dataclass(frozen=True)
class DecayLadder:
    log_K: tuple[float, ...]
    max_relative_var: tuple[float, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(a / b for a, b in zip(self.max_relative_var, self.max_relative_var[1:]))

    @property
    def strictly_decreasing(self) -> bool:
        return all(r > 1 for r in self.ratios)


def variance_decay_ladder(runs: Mapping[float, MomentTrajectory], t_rescaled: float,
                          compact: tuple[float, float] | None = None) -> DecayLadder:
    """``max_i E[S_i^2]`` at simulation time ``t_rescaled * ln K`` for each run of a K-ladder."""
    keys = sorted(runs)
    vals = []
    for lk in keys:
        mt = runs[lk]
        k = int(np.argmin(np.abs(mt.times - t_rescaled * lk)))
        if not math.isclose(mt.times[k], t_rescaled * lk, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigError(f"run at ln K = {lk} has no output at rescaled time {t_rescaled}")
        pos = slice(None) if compact is None else mt.grid.sites_in(*compact)
        vals.append(float(np.nanmax(mt.relative_variance[k][pos])))
    return DecayLadder(tuple(keys), tuple(vals))


def weighted_l1_norm(v, C_A: float, grid: TraitGrid) -> float:
    """``sum_i exp(-C_A |i h_K|) |v_i|`` over the window."""
    v = np.asarray(v, float)
    if v.shape != (grid.size,):
        raise ConfigError("field must have one value per site")
    return float(np.sum(np.exp(-C_A * np.abs(grid.indices * grid.h)) * np.abs(v)))
