"""Replicate ensembles with deterministic, schedule-independent reduction.

Replicates are grouped into fixed-size chunks.  Each chunk is reduced on
one worker and the partial results are merged in chunk order, so the
output does not depend on the number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Any, Callable

import numpy as np

from .core import Model
from .errors import ConfigError, TraitBranchError
from .simulator import (DEFAULT_CAP, Trajectory, replicate_rng, sample_initial, simulate_exact,
                        simulate_tau_leap, simulate_windowed_supercritical)

WORKERS_ENV = "TRAITBRANCH_WORKERS"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


# --------------------------------------------------------------------------
# Streamed moments
# --------------------------------------------------------------------------


@dataclass
class Moments:
    """Count, mean and central power sums up to order four, for arrays of any shape."""

    n: int
    mean: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray

    @classmethod
    def empty(cls, shape) -> "Moments":
        z = np.zeros(shape)
        return cls(0, z, z.copy(), z.copy(), z.copy())

    @classmethod
    def from_batch(cls, values) -> "Moments":
        x = np.asarray(values, float)
        if x.shape[0] == 0:
            return cls.empty(x.shape[1:])
        mean = x.mean(axis=0)
        dev = x - mean
        d2 = dev * dev
        return cls(x.shape[0], mean, d2.sum(0), (d2 * dev).sum(0), (d2 * d2).sum(0))

    def merge(self, other: "Moments") -> "Moments":
        na, nb = self.n, other.n
        if na == 0:
            return other
        if nb == 0:
            return self
        n = na + nb
        delta = other.mean - self.mean
        d2 = delta * delta
        mean = self.mean + delta * nb / n
        m2 = self.m2 + other.m2 + d2 * na * nb / n
        m3 = (self.m3 + other.m3 + d2 * delta * na * nb * (na - nb) / n**2
              + 3.0 * delta * (na * other.m2 - nb * self.m2) / n)
        m4 = (self.m4 + other.m4 + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / n**3
              + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / n**2
              + 4.0 * delta * (na * other.m3 - nb * self.m3) / n)
        return Moments(n, mean, m2, m3, m4)

    @property
    def var(self) -> np.ndarray:
        """Unbiased sample variance."""
        if self.n < 2:
            return np.full_like(self.mean, np.nan)
        return self.m2 / (self.n - 1)

    @property
    def se_mean(self) -> np.ndarray:
        return np.sqrt(self.var / self.n)

    @property
    def se_var(self) -> np.ndarray:
        """Large-sample standard error of the sample variance."""
        n = self.n
        if n < 2:
            return np.full_like(self.mean, np.nan)
        mu4 = self.m4 / n
        s2 = self.m2 / n
        return np.sqrt(np.maximum(mu4 - s2 * s2 * (n - 3) / (n - 1), 0.0) / n)

    def shifted_square(self, center) -> tuple[np.ndarray, np.ndarray]:
        """Mean of ``(X - center)^2`` and its standard error."""
        n = self.n
        c = self.mean - np.asarray(center, float)
        z_mean = self.m2 / n + c * c
        z4 = (self.m4 + 4 * c * self.m3 + 6 * c * c * self.m2) / n + c**4
        z_var = np.maximum(z4 - z_mean * z_mean, 0.0) * n / max(n - 1, 1)
        return z_mean, np.sqrt(z_var / n)


# --------------------------------------------------------------------------
# Reducers
# --------------------------------------------------------------------------


class Reducer:
    """Per-chunk accumulation followed by an ordered merge.

    ``add`` is called with each successful trajectory of a chunk, ``close``
    turns a chunk state into a partial summary, ``merge`` combines two
    partial summaries (called in chunk order).
    """

    def start(self) -> Any:
        return []

    def add(self, state, r: int, traj: Trajectory):
        state.append(traj)
        return state

    def close(self, state):
        return state

    def merge(self, a, b):
        return a + b

    def finish(self, summary):
        return summary


class StoreReducer(Reducer):
    """Keep every trajectory's counts: ``(R, n_obs, sites)``."""

    def add(self, state, r, traj):
        state.append((r, traj.counts, traj.boundary_leak))
        return state

    def finish(self, summary):
        if not summary:
            return StoredCounts(np.zeros(0, int), np.zeros((0, 0, 0), np.int64), np.zeros(0, np.int64))
        rs, counts, leaks = zip(*summary)
        return StoredCounts(np.array(rs), np.stack(counts), np.array(leaks))


@dataclass
class StoredCounts:
    replicates: np.ndarray
    counts: np.ndarray
    leak: np.ndarray


class MomentReducer(Reducer):
    """Per-(time, site) moments of the counts plus leak and event totals."""

    def add(self, state, r, traj):
        state.append((traj.counts, traj.boundary_leak, traj.event_count))
        return state

    def close(self, state):
        if not state:
            return None
        counts, leaks, events = zip(*state)
        return CountSummary(Moments.from_batch(np.stack(counts)), int(sum(leaks)), int(sum(events)))

    def merge(self, a, b):
        if a is None:
            return b
        if b is None:
            return a
        return CountSummary(a.moments.merge(b.moments), a.boundary_leak + b.boundary_leak,
                            a.event_count + b.event_count)


@dataclass
class CountSummary:
    moments: Moments
    boundary_leak: int
    event_count: int

    @property
    def mean(self) -> np.ndarray:
        return self.moments.mean

    @property
    def var(self) -> np.ndarray:
        return self.moments.var


REDUCERS: dict[str, Callable[[], Reducer]] = {"moments": MomentReducer, "store": StoreReducer}


# --------------------------------------------------------------------------
# Runner
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """Everything a worker needs to rebuild replicate ``r`` from scratch."""

    model: Model
    initial_means: np.ndarray
    initial_mode: str
    t_end: float
    observation_times: np.ndarray
    method: str = "exact"
    dt_leap: float | None = None
    leap_bound: float = 0.05
    window: tuple[float, float] | None = None
    cap: int = DEFAULT_CAP

    def run(self, base_seed: int, r: int) -> Trajectory:
        rng = replicate_rng(base_seed, r)
        state0 = sample_initial(self.initial_means, self.initial_mode, rng)
        if self.method == "exact":
            traj = simulate_exact(self.model, state0, self.t_end, self.observation_times, rng, cap=self.cap)
        elif self.method == "tau-leap":
            traj = simulate_tau_leap(self.model, state0, self.t_end, self.dt_leap, self.observation_times,
                                     rng, leap_bound=self.leap_bound, cap=self.cap)
        elif self.method == "windowed":
            traj = simulate_windowed_supercritical(self.model, self.window, state0, self.t_end,
                                                   self.observation_times, rng, cap=self.cap)
        else:
            raise ConfigError(f"unknown simulation method {self.method!r}")
        traj.seed = r
        return traj


@dataclass
class Ensemble:
    summary: Any
    R: int
    base_seed: int
    times: np.ndarray
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def completed(self) -> int:
        return self.R - len(self.errors)


def _run_chunk(spec: RunSpec, reducer: Reducer, base_seed: int, lo: int, hi: int):
    state = reducer.start()
    errors = []
    for r in range(lo, hi):
        try:
            traj = spec.run(base_seed, r)
        except TraitBranchError as exc:
            errors.append((r, f"{type(exc).__name__}: {exc}"))
            continue
        state = reducer.add(state, r, traj)
    return reducer.close(state), errors


def run_ensemble(spec: RunSpec, R: int, base_seed: int, reducer: str | Reducer = "moments", *,
                 workers: int | None = None, chunk_size: int = 256) -> Ensemble:
    """Run ``R`` independent replicates; replicate ``r`` is seeded from ``(base_seed, r)``."""
    if R < 1:
        raise ConfigError("need at least one replicate")
    if isinstance(reducer, str):
        if reducer not in REDUCERS:
            raise ConfigError(f"unknown reducer {reducer!r}; choose from {sorted(REDUCERS)}")
        reducer = REDUCERS[reducer]()
    workers = default_workers() if workers is None else max(int(workers), 1)
    bounds = [(lo, min(lo + chunk_size, R)) for lo in range(0, R, chunk_size)]
    if workers == 1 or len(bounds) == 1:
        parts = [_run_chunk(spec, reducer, base_seed, lo, hi) for lo, hi in bounds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, spec, reducer, base_seed, lo, hi) for lo, hi in bounds]
            parts = [f.result() for f in futures]
    summaries = [p[0] for p in parts]
    errors = [e for p in parts for e in p[1]]
    summary = reducer.finish(reduce(reducer.merge, summaries))
    return Ensemble(summary, R, int(base_seed), np.asarray(spec.observation_times, float), errors)
