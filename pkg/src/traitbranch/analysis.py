"""Hopf-Cole transforms of stochastic output with their interpolation and
sup metrics; ensemble experiments comparing simulations with their limits.

This module owns the conversion between plain simulation time and the
rescaled time ``t / ln K`` used by the limit equations.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .core import Model, TraitGrid, classify_regime, growth_dominates
from .ensemble import CountSummary, Moments, Reducer, RunSpec, run_ensemble
from .errors import ConfigError, DataInconsistencyError
from .hj import HJSolution, classify_compact
from .meanfield import MeanField, integrate_mean
from .simulator import Trajectory

EXTINCT = -math.inf


# --------------------------------------------------------------------------
# Hopf-Cole transform and interpolation
# --------------------------------------------------------------------------


@dataclass
class StochasticExponentField:
    grid: TraitGrid
    times: np.ndarray  # rescaled
    beta: np.ndarray  # (T, W); -inf where extinct
    replicate: int | None = None

    @property
    def extinct(self) -> np.ndarray:
        return np.isneginf(self.beta)


def hopf_cole(traj: Trajectory, log_K: float | None = None,
              rescaled_times: Sequence[float] | None = None) -> StochasticExponentField:
    """``beta = ln N / ln K`` with time relabelled to ``t / ln K``.

    If ``rescaled_times`` is given the trajectory must have been observed
    exactly at ``rescaled_times * ln K``; no resampling is done.
    """
    lk = traj.grid.log_K if log_K is None else float(log_K)
    if not math.isclose(lk, traj.grid.log_K, rel_tol=1e-12):
        raise ConfigError(f"ln K = {lk} does not match the trajectory grid ({traj.grid.log_K})")
    times = np.asarray(traj.times, float)
    if rescaled_times is not None:
        want = np.asarray(rescaled_times, float) * lk
        if want.shape != times.shape or not np.allclose(times, want, rtol=1e-10, atol=1e-12):
            raise ConfigError("trajectory was not observed on the requested rescaled time grid")
    counts = np.asarray(traj.counts)
    with np.errstate(divide="ignore"):
        beta = np.where(counts > 0, np.log(np.maximum(counts, 1)) / lk, EXTINCT)
    return StochasticExponentField(traj.grid, times / lk, beta, traj.seed)


@dataclass
class InterpolatedField:
    """Piecewise-linear field through ``(x_i, v_i)``; segments touching an
    extinct node are extinct."""

    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        self.values = np.asarray(self.values, float)
        if self.x.shape != self.values.shape or self.x.size < 1:
            raise ConfigError("need matching, non-empty node and value arrays")

    def __call__(self, xq) -> np.ndarray:
        xq = np.atleast_1d(np.asarray(xq, float))
        lo, hi = self.x[0], self.x[-1]
        tol = 1e-9 * max(1.0, abs(lo), abs(hi))
        if np.any(xq < lo - tol) or np.any(xq > hi + tol):
            raise ConfigError("query points outside the interpolation domain")
        v = self.values
        if v.size == 1:
            return np.full(xq.shape, v[0])
        j = np.clip(np.searchsorted(self.x, xq, side="right") - 1, 0, v.size - 2)
        x0, x1 = self.x[j], self.x[j + 1]
        v0, v1 = v[j], v[j + 1]
        lam = np.clip((xq - x0) / (x1 - x0), 0.0, 1.0)
        dead = np.isneginf(v0) | np.isneginf(v1)
        with np.errstate(invalid="ignore"):
            mix = np.clip((1 - lam) * v0 + lam * v1, np.minimum(v0, v1), np.maximum(v0, v1))
            out = np.where(dead, EXTINCT, mix)
        # nodes keep their own value
        at0 = np.isclose(lam, 0.0, atol=1e-12)
        at1 = np.isclose(lam, 1.0, atol=1e-12)
        out = np.where(at0, v0, np.where(at1, v1, out))
        return out

    def extinct_on(self, a: float, b: float) -> bool:
        """True if some closed extinct segment (or extinct node) meets ``[a, b]``."""
        dead = np.isneginf(self.values)
        if not dead.any():
            return False
        seg = dead[:-1] | dead[1:]
        hit_seg = seg & (self.x[1:] >= a) & (self.x[:-1] <= b)
        hit_node = dead & (self.x >= a) & (self.x <= b)
        return bool(hit_seg.any() or hit_node.any())


def interpolate(values, grid: TraitGrid) -> InterpolatedField:
    v = np.asarray(values, float)
    if v.shape != (grid.size,):
        raise ConfigError("one value per lattice site required")
    return InterpolatedField(grid.x, v)


def sup_distance_on_compact(f: InterpolatedField, g: Callable | InterpolatedField,
                            compact: tuple[float, float], refine: int = 4) -> float:
    """``sup_{[a, b]} |f - g|`` on the nodes of ``f`` in ``[a, b]``, the
    endpoints and ``refine`` interior points per segment."""
    a, b = map(float, compact)
    if not a <= b:
        raise ConfigError("compact must satisfy a <= b")
    inside = f.x[(f.x > a) & (f.x < b)]
    knots = np.concatenate([[a], inside, [b]])
    frac = np.arange(refine + 1) / (refine + 1)
    pts = (knots[:-1, None] + np.diff(knots)[:, None] * frac[None, :]).ravel()
    pts = np.concatenate([pts, [b]])
    gv = np.asarray(g(pts), float)
    fv = f(pts)
    if f.extinct_on(a, b) and np.all(np.isfinite(gv)):
        return math.inf
    both = np.isneginf(fv) & np.isneginf(gv)
    with np.errstate(invalid="ignore"):
        diff = np.where(both, 0.0, np.abs(fv - gv))
    return float(np.max(diff))


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n <= 0:
        raise ConfigError("Wilson interval needs at least one trial")
    if not 0 <= successes <= n:
        raise ConfigError("successes must lie in [0, n]")
    z = float(stats.norm.ppf(0.5 + confidence / 2))
    phat = successes / n
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == n else min(1.0, center + half)
    return lo, hi


@dataclass
class DeviationStats:
    times: np.ndarray
    value: np.ndarray  # E[(N/n - 1)^2]
    se: np.ndarray


def deviation_stats(summary: CountSummary, mean_field: MeanField, times: np.ndarray | None = None) -> DeviationStats:
    """Unbiased per-(t, i) estimates of ``E[(N / n - 1)^2]`` with standard errors."""
    mom = summary.moments
    n = np.asarray(mean_field.n, float)
    if mom.mean.shape != n.shape:
        raise ConfigError(f"ensemble shape {mom.mean.shape} does not match mean field {n.shape}")
    if times is not None and not np.allclose(times, mean_field.times, rtol=1e-10, atol=1e-12):
        raise ConfigError("ensemble and mean field use different observation times")
    zero = n <= 0
    if np.any(zero & (mom.mean > 0)):
        raise DataInconsistencyError("positive counts where the mean field vanishes")
    z, se = mom.shifted_square(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(zero, np.nan, z / n**2)
        err = np.where(zero, np.nan, se / n**2)
    return DeviationStats(np.asarray(mean_field.times), val, err)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    experiment: str
    rows: list[dict]
    trends: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def to_jsonl(self) -> str:
        head = {"experiment": self.experiment, "trends": self.trends, **self.notes}
        lines = [json.dumps(head, default=_jsonable)]
        lines += [json.dumps(r, default=_jsonable) for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        keys = list(self.rows[0])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _jsonable(v) if isinstance(v, (tuple, list, np.generic)) else v for k, v in r.items()})
        return buf.getvalue()


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (tuple, list)):
        return "[" + ",".join(str(_jsonable(x)) for x in v) + "]"
    return str(v)


def _probability_row(base: dict, hits: int, n: int) -> dict:
    lo, hi = wilson_interval(hits, n)
    return {**base, "hits": int(hits), "R": int(n), "p_hat": hits / n, "wilson_lo": lo, "wilson_hi": hi}


def _monotone(values: Sequence[float], increasing: bool) -> bool:
    pairs = zip(values, values[1:])
    return all(b >= a for a, b in pairs) if increasing else all(b <= a for a, b in pairs)


# --------------------------------------------------------------------------
# Subcritical cut-off experiment
# --------------------------------------------------------------------------


class _CutoffReducer(Reducer):
    """Per-replicate indicators on survival and extinction compacts."""

    def __init__(self, grid: TraitGrid, ref_x: np.ndarray, ref_u: np.ndarray,
                 survival: Sequence[tuple[float, float]], extinction: Sequence[tuple[float, float]],
                 eta: float):
        self.grid = grid
        self.ref = InterpolatedField(ref_x, ref_u)
        self.survival = list(survival)
        self.extinction = [grid.sites_in(*c) for c in extinction]
        self.eta = eta

    def add(self, state, r, traj):
        counts = traj.counts[-1]
        beta = np.where(counts > 0, np.log(np.maximum(counts, 1)) / self.grid.log_K, EXTINCT)
        f = InterpolatedField(self.grid.x, beta)
        row = [sup_distance_on_compact(f, self.ref, c) > self.eta for c in self.survival]
        row += [bool(np.all(counts[pos] == 0)) for pos in self.extinction]
        state.append(row)
        return state

    def close(self, state):
        k = len(self.survival) + len(self.extinction)
        arr = np.asarray(state, dtype=np.int64).reshape(-1, k)
        return arr.sum(axis=0), arr.shape[0]

    def merge(self, a, b):
        return a[0] + b[0], a[1] + b[1]


Setup = Callable[[float], tuple[Model, np.ndarray]]


def cutoff_experiment(setup: Setup, log_K_list: Sequence[float], reference: HJSolution,
                         survival_compacts: Sequence[tuple[float, float]],
                         extinction_compacts: Sequence[tuple[float, float]], t: float, eta: float,
                         R: int, base_seed: int, *, band_tol: float | None = None,
                         initial_mode: str = "poisson", workers: int | None = None) -> ConvergenceReport:
    """Empirical failure probabilities of the cut-off limit at rescaled time ``t``.

    ``setup(ln K)`` returns the model and the initial means for that ``K``.
    For each survival compact the event is ``sup |beta~ - u| > eta``; for
    each extinction compact it is "every site in the compact is empty".
    """
    if R < 1:
        raise ConfigError("need at least one replicate")
    if band_tol is None:
        band_tol = 2 * (reference.error_estimate or 0.0)
    for c in survival_compacts:
        if classify_compact(reference, t, c, band_tol) != 1:
            raise ConfigError(f"compact {c} is not inside the survival set with margin {band_tol:.3g}")
    for c in extinction_compacts:
        if classify_compact(reference, t, c, band_tol) != -1:
            raise ConfigError(f"compact {c} is not inside the extinction set with margin {band_tol:.3g}")
    rows = []
    for lk in log_K_list:
        model, means = setup(float(lk))
        if classify_regime(model.rates).tag != "subcritical":
            raise ConfigError("the cut-off experiment needs a subcritical model")
        T = t * model.log_K
        spec = RunSpec(model, np.asarray(means, float), initial_mode, T, np.array([T]))
        red = _CutoffReducer(model.grid, reference.x, reference.at(t), survival_compacts,
                             extinction_compacts, eta)
        ens = run_ensemble(spec, R, base_seed, red, workers=workers)
        hits, n = ens.summary
        if n == 0:
            raise ConfigError(f"every replicate failed at ln K = {lk}: {ens.errors[:1]}")
        k = 0
        for c in survival_compacts:
            rows.append(_probability_row({"log_K": float(lk), "kind": "survival", "compact": tuple(c),
                                          "t": t, "eta": eta}, hits[k], n))
            k += 1
        for c in extinction_compacts:
            rows.append(_probability_row({"log_K": float(lk), "kind": "extinction", "compact": tuple(c),
                                          "t": t}, hits[k], n))
            k += 1
    trends = {}
    for kind, inc in (("survival", False), ("extinction", True)):
        comps = survival_compacts if kind == "survival" else extinction_compacts
        for c in comps:
            ps = [r["p_hat"] for r in rows if r["kind"] == kind and r["compact"] == tuple(c)]
            trends[f"{kind}{list(c)}"] = _monotone(ps, inc)
    return ConvergenceReport("cutoff-limit", rows, trends, {"band_tol": band_tol, "base_seed": base_seed})


# --------------------------------------------------------------------------
# Supercritical uniform-deviation experiment
# --------------------------------------------------------------------------


class _DeviationReducer(Reducer):
    """Sup-deviation indicator and per-(t, i) moments of ``N / n - 1``."""

    def __init__(self, n: np.ndarray, sites: np.ndarray, eta: float):
        self.n = n
        self.sites = sites
        self.eta = eta

    def add(self, state, r, traj):
        rel = traj.counts[:, self.sites] / self.n[:, self.sites] - 1.0
        state.append((float(np.max(np.abs(rel))), rel))
        return state

    def close(self, state):
        if not state:
            return None
        sup, rel = zip(*state)
        sup = np.asarray(sup)
        return int(np.sum(sup > self.eta)), Moments.from_batch(np.stack(rel)), sup.size

    def merge(self, a, b):
        if a is None:
            return b
        if b is None:
            return a
        return a[0] + b[0], a[1].merge(b[1]), a[2] + b[2]


def uniform_deviation_experiment(setup: Setup, log_K_list: Sequence[float], a_exponent: float,
                      window: tuple[float, float], T: float, D: float, eta: float, R: int,
                      base_seed: int, *, n_times: int = 11, initial_mode: str = "deterministic",
                      workers: int | None = None) -> ConvergenceReport:
    """Empirical ``P(sup |N / n - 1| > eta)`` over rescaled ``[0, T] x [-D, D]``
    for the localized supercritical process, with ``max E[(N / n - 1)^2]``
    and a data-fitted envelope ``C / (eta^2 delta_K K^(a/2))``."""
    if R < 1:
        raise ConfigError("need at least one replicate")
    rows = []
    for lk in log_K_list:
        full, means = setup(float(lk))
        if not growth_dominates(full.rates):
            raise ConfigError("the uniform-deviation experiment needs b >= d everywhere")
        model = full.restrict(*window)
        off = model.grid.i_min - full.grid.i_min
        n0 = np.asarray(means, float)[off:off + model.grid.size]
        Ka = math.exp(a_exponent * model.log_K)
        if np.any(n0 < Ka * (1 - 1e-12)):
            raise ConfigError(f"initial means must be >= K^a = {Ka:.4g} on the window")
        times = np.linspace(0.0, T, n_times) * model.log_K
        mf = integrate_mean(model, n0, times[-1], times)
        sites = model.grid.sites_in(-D, D)
        spec = RunSpec(model, n0, initial_mode, times[-1], times)
        ens = run_ensemble(spec, R, base_seed, _DeviationReducer(mf.n, sites, eta), workers=workers)
        hits, mom, n = ens.summary
        z, se = mom.shifted_square(0.0)
        k, i = np.unravel_index(int(np.nanargmax(z)), z.shape)
        row = _probability_row({"log_K": float(lk), "a": a_exponent, "T": T, "D": D, "eta": eta,
                                "delta_K": model.grid.delta}, hits, n)
        row.update({"max_relative_var": float(z[k, i]), "max_relative_var_se": float(se[k, i]), "max_relative_var_t": float(times[k] / lk),
                    "scale": eta**2 * model.grid.delta * math.exp(0.5 * a_exponent * lk)})
        rows.append(row)
    C = max(r["p_hat"] * r["scale"] for r in rows)
    for r in rows:
        r["envelope"] = C / r["scale"]
    ps = [r["p_hat"] for r in rows]
    s2 = [r["max_relative_var"] for r in rows]
    trends = {"p_non_increasing": _monotone(ps, False),
              "relative_var_ratios": [a / b for a, b in zip(s2, s2[1:])]}
    return ConvergenceReport("uniform-deviation", rows, trends, {"fitted_C": C, "base_seed": base_seed})
