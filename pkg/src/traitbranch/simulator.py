"""Stochastic simulation of the trait-structured branching process.

The exact engine is a Gillespie loop over a composite per-site rate
``(b_i + d_i + mu) * N_i`` held in a Fenwick tree.  It can drive several
copies of the process at once from one random stream: each copy lives on
its own set of active sites, the site is drawn with rate proportional to
the largest count over copies, and a uniform mark decides in which copies
the event actually fires.  Every copy is then an exact Markov chain with
the right rates, and copies on nested windows stay ordered sitewise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .core import Model, TraitGrid, growth_dominates
from .errors import BoundaryError, ConfigError, LeapBoundError, PopulationCapError
from .fenwick import fw_add, fw_build, fw_find, fw_top_bit

DEFAULT_CAP = 10**9
_REBUILD_EVERY = 1 << 16

STATUS_OK = 0
STATUS_CAP = 1
STATUS_LEAK = 2


@dataclass(frozen=True)
class PopulationState:
    counts: np.ndarray
    time: float = 0.0
    event_count: int = 0

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or not np.issubdtype(c.dtype, np.integer) or np.any(c < 0):
            raise ConfigError("counts must be a 1-d array of nonnegative integers")

    @property
    def total(self) -> int:
        return int(np.sum(self.counts))


@dataclass
class Trajectory:
    """Snapshots of one run at the observation times (plain simulation time)."""

    grid: TraitGrid
    times: np.ndarray
    counts: np.ndarray  # (n_obs, sites)
    seed: int | None = None
    boundary_leak: int = 0
    event_count: int = 0
    extinction_time: float | None = None
    clip_count: int = 0
    method: str = "exact"

    def state(self, k: int) -> PopulationState:
        return PopulationState(self.counts[k].copy(), float(self.times[k]))

    @property
    def final(self) -> PopulationState:
        return PopulationState(self.counts[-1].copy(), float(self.times[-1]), self.event_count)


@dataclass(frozen=True)
class ExtinctionTime:
    time: float
    censored: bool


# --------------------------------------------------------------------------
# Seeding
# --------------------------------------------------------------------------


def replicate_seed(base_seed: int, r: int) -> np.random.SeedSequence:
    """Independent stream for replicate ``r`` derived by hashing both integers."""
    return np.random.SeedSequence([int(base_seed) & (2**64 - 1), int(r)])


def replicate_rng(base_seed: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(replicate_seed(base_seed, r)))


def _as_rng(seed) -> tuple[np.random.Generator, int | None]:
    if isinstance(seed, np.random.Generator):
        return seed, None
    if seed is None:
        raise ConfigError("a seed or Generator is required; there is no global RNG state")
    return np.random.Generator(np.random.PCG64(int(seed))), int(seed)


# --------------------------------------------------------------------------
# Initial conditions
# --------------------------------------------------------------------------


def sample_initial(means, mode: str = "poisson", seed=None, time: float = 0.0) -> PopulationState:
    """Integer initial state from mean sizes ``n_i(0)``."""
    n = np.asarray(means, float)
    if n.ndim != 1:
        raise ConfigError("initial means must be one value per site")
    if not np.all(np.isfinite(n)):
        raise ConfigError("initial means must be finite")
    if np.any(n < 0):
        raise ConfigError("initial means must be nonnegative")
    if mode == "deterministic":
        counts = np.floor(n + 0.5).astype(np.int64)
    elif mode == "poisson":
        rng, _ = _as_rng(seed)
        counts = rng.poisson(n).astype(np.int64)
    else:
        raise ConfigError(f"initial mode must be 'poisson' or 'deterministic', got {mode!r}")
    return PopulationState(counts, float(time))


# --------------------------------------------------------------------------
# Exact engine
# --------------------------------------------------------------------------


@njit(cache=True)
def _site_weight(counts, coef, s):
    m = counts[0, s]
    for k in range(1, counts.shape[0]):
        if counts[k, s] > m:
            m = counts[k, s]
    return coef[s] * m


@njit(cache=True)
def _gillespie(counts, active, b, d, mu, cumw, L, t0, t_end, obs, cap, rng, strict):
    """Run ``P`` coupled copies; ``counts`` is (P, W) and is modified in place.

    Returns (snapshots, leak, events, extinction_times, status).
    """
    P, W = counts.shape
    n_obs = obs.shape[0]
    snaps = np.zeros((n_obs, P, W), dtype=np.int64)
    leak = np.zeros(P, dtype=np.int64)
    ext = np.full(P, -1.0)
    pop = np.zeros(P, dtype=np.int64)
    for k in range(P):
        for s in range(W):
            pop[k] += counts[k, s]
        if pop[k] == 0:
            ext[k] = t0

    coef = b + d + mu
    weights = np.empty(W)
    for s in range(W):
        weights[s] = _site_weight(counts, coef, s)
    tree = fw_build(weights)
    top = fw_top_bit(W)
    total = weights.sum()

    t = t0
    oi = 0
    events = 0
    status = 0
    since_rebuild = 0
    while True:
        if total <= 0.0:
            break
        tn = t + rng.exponential(1.0) / total
        while oi < n_obs and obs[oi] < tn:
            snaps[oi] = counts
            oi += 1
        if tn > t_end:
            break
        t = tn

        s = fw_find(tree, rng.random() * total, top)
        if s >= W:
            s = W - 1
        if weights[s] <= 0.0:
            # float drift in the tree; fall back to the last live site
            s = W - 1
            while weights[s] <= 0.0:
                s -= 1
        v = rng.random() * coef[s]
        mark = 0
        if P > 1:
            nmax = counts[0, s]
            for k in range(1, P):
                if counts[k, s] > nmax:
                    nmax = counts[k, s]
            mark = int(rng.random() * nmax)
            if mark >= nmax:
                mark = nmax - 1

        if v < b[s]:
            for k in range(P):
                if mark < counts[k, s]:
                    counts[k, s] += 1
                    pop[k] += 1
        elif v < b[s] + d[s]:
            for k in range(P):
                if mark < counts[k, s]:
                    counts[k, s] -= 1
                    pop[k] -= 1
                    if pop[k] == 0 and ext[k] < 0:
                        ext[k] = t
        else:
            j = np.searchsorted(cumw, rng.random(), side="right")
            if j > 2 * L:
                j = 2 * L
            tgt = s + j - L
            for k in range(P):
                if mark < counts[k, s]:
                    if 0 <= tgt < W and active[k, tgt]:
                        counts[k, tgt] += 1
                        pop[k] += 1
                    else:
                        leak[k] += 1
                        if strict:
                            status = 2
            if 0 <= tgt < W:
                nw = _site_weight(counts, coef, tgt)
                delta = nw - weights[tgt]
                if delta != 0.0:
                    weights[tgt] = nw
                    fw_add(tree, tgt, delta)
                    total += delta

        nw = _site_weight(counts, coef, s)
        delta = nw - weights[s]
        if delta != 0.0:
            weights[s] = nw
            fw_add(tree, s, delta)
            total += delta

        events += 1
        since_rebuild += 1
        if since_rebuild >= 65536:
            tree = fw_build(weights)
            total = weights.sum()
            since_rebuild = 0
        for k in range(P):
            if pop[k] > cap:
                status = 1
        if status != 0:
            break

    while oi < n_obs:
        snaps[oi] = counts
        oi += 1
    return snaps, leak, events, ext, status


def _observation_grid(t0: float, t_end: float, observation_times) -> np.ndarray:
    if not math.isfinite(t_end) or t_end < t0:
        raise ConfigError(f"t_end must be finite and >= start time {t0}, got {t_end}")
    if observation_times is None:
        return np.array([t0, t_end]) if t_end > t0 else np.array([t0])
    obs = np.asarray(observation_times, float).ravel()
    if obs.size == 0:
        raise ConfigError("need at least one observation time")
    if np.any(np.diff(obs) <= 0):
        raise ConfigError("observation times must be strictly increasing")
    if obs[0] < t0 or obs[-1] > t_end:
        raise ConfigError(f"observation times must lie in [{t0}, {t_end}]")
    return obs


def _mutation_table(model: Model) -> tuple[np.ndarray, int]:
    w = np.asarray(model.dkernel.weights, float)
    tot = w.sum()
    if tot <= 0:
        return np.ones(w.size), model.dkernel.L_max
    cum = np.cumsum(w) / tot
    cum[-1] = 1.0
    return cum, model.dkernel.L_max


def _run_engine(model: Model, counts: np.ndarray, active: np.ndarray, t0: float, t_end: float,
                obs: np.ndarray, rng: np.random.Generator, cap: int):
    cum, L = _mutation_table(model)
    strict = model.boundary == "strict"
    out = _gillespie(counts, active, np.asarray(model.rates.b, float), np.asarray(model.rates.d, float),
                     float(model.mu), cum, int(L), float(t0), float(t_end), obs, int(cap), rng, strict)
    snaps, leak, events, ext, status = out
    if status == STATUS_CAP:
        raise PopulationCapError(f"total population exceeded cap {cap} (events so far: {events})")
    if status == STATUS_LEAK:
        raise BoundaryError("a mutant landed outside the window under the 'strict' boundary policy; "
                            "enlarge the window or use 'absorb'")
    return snaps, leak, int(events), ext


def _check_state(model: Model, state0: PopulationState) -> np.ndarray:
    counts = np.asarray(state0.counts, np.int64)
    if counts.shape != (model.grid.size,):
        raise ConfigError(f"state has {counts.size} sites, model window has {model.grid.size}")
    return counts


def simulate_exact(model: Model, state0: PopulationState, t_end: float, observation_times=None,
                   seed=None, *, cap: int = DEFAULT_CAP) -> Trajectory:
    """Exact (Gillespie) simulation with snapshots at ``observation_times``.

    ``seed`` is an integer or a ``numpy.random.Generator``.
    """
    counts = _check_state(model, state0).copy()[None, :]
    obs = _observation_grid(state0.time, t_end, observation_times)
    rng, seed_int = _as_rng(seed)
    active = np.ones(counts.shape, dtype=np.bool_)
    snaps, leak, events, ext = _run_engine(model, counts, active, state0.time, t_end, obs, rng, cap)
    return Trajectory(model.grid, obs, snaps[:, 0, :], seed_int, int(leak[0]),
                      state0.event_count + events, float(ext[0]) if ext[0] >= 0 else None)


def simulate_nested(model: Model, windows: Sequence[tuple[float, float]], state0: PopulationState,
                    t_end: float, observation_times=None, seed=None, *,
                    cap: int = DEFAULT_CAP) -> list[Trajectory]:
    """Coupled runs of the localized process on nested trait windows.

    All copies share one event stream.  Each copy starts from ``state0``
    restricted to its window and freezes the sites outside it at zero.
    Returned trajectories are on the full model grid.
    """
    if len(windows) == 0:
        raise ConfigError("need at least one window")
    ws = [tuple(map(float, w)) for w in windows]
    for (a1, b1), (a2, b2) in zip(ws, ws[1:]):
        if not (a2 <= a1 and b1 <= b2):
            raise ConfigError("windows must be nested, smallest first")
    base = _check_state(model, state0)
    active = np.zeros((len(ws), model.grid.size), dtype=np.bool_)
    for k, (a, b) in enumerate(ws):
        active[k, model.grid.sites_in(a, b)] = True
    counts = np.where(active, base[None, :], 0).astype(np.int64)
    obs = _observation_grid(state0.time, t_end, observation_times)
    rng, seed_int = _as_rng(seed)
    absorb = replace(model, boundary="absorb")
    snaps, leak, events, ext = _run_engine(absorb, counts, active, state0.time, t_end, obs, rng, cap)
    return [Trajectory(model.grid, obs, snaps[:, k, :], seed_int, int(leak[k]), events,
                       float(ext[k]) if ext[k] >= 0 else None) for k in range(len(ws))]


def simulate_windowed_supercritical(model: Model, window: tuple[float, float], state0: PopulationState,
                                    t_end: float, observation_times=None, seed=None, *,
                                    a_exponent: float | None = None,
                                    cap: int = DEFAULT_CAP) -> Trajectory:
    """Localized supercritical process on ``window``.

    ``state0`` is given on the model grid; it is restricted to the window.
    Mutants aimed outside are discarded and counted in ``boundary_leak``.
    If ``a_exponent`` is given every initial count must be at least ``K^(a/2)``.
    """
    if not growth_dominates(model.rates):
        raise ConfigError("windowed supercritical mode needs b_i >= d_i at every site")
    base = _check_state(model, state0)
    local = replace(model.restrict(*window), boundary="absorb")
    off = local.grid.i_min - model.grid.i_min
    c0 = base[off:off + local.grid.size]
    if a_exponent is not None:
        floor = math.exp(0.5 * a_exponent * model.log_K)
        if np.any(c0 < floor):
            raise ConfigError(f"initial counts must be >= K^(a/2) = {floor:.4g} on the window")
    return simulate_exact(local, PopulationState(c0.copy(), state0.time, state0.event_count),
                          t_end, observation_times, seed, cap=cap)


# --------------------------------------------------------------------------
# Tau-leaping
# --------------------------------------------------------------------------


def simulate_tau_leap(model: Model, state0: PopulationState, t_end: float, dt_leap: float,
                      observation_times=None, seed=None, *, leap_bound: float = 0.05,
                      cap: int = DEFAULT_CAP) -> Trajectory:
    """Approximate Poisson-leap simulation.

    Every step draws each site's event counts (one per channel) as Poisson
    variables with the rates frozen at the start of the step.  Steps are
    shortened so that observation times are hit exactly.  Counts driven
    negative are clipped to zero; ``clip_count`` totals the removed deficit.
    The per-capita expected number of firings of any channel in one step,
    ``max(b, d, mu) * dt``, must not exceed ``leap_bound``.
    """
    if not dt_leap > 0:
        raise ConfigError("dt_leap must be positive")
    b = np.asarray(model.rates.b, float)
    d = np.asarray(model.rates.d, float)
    mu = model.mu
    worst = max(float(b.max()), float(d.max()), mu) * dt_leap
    if worst > leap_bound:
        raise LeapBoundError(f"per-capita channel mean {worst:.4g} exceeds leap bound {leap_bound}; "
                             f"use dt_leap <= {leap_bound / max(worst / dt_leap, 1e-300):.4g}")
    counts = _check_state(model, state0).copy()
    obs = _observation_grid(state0.time, t_end, observation_times)
    rng, seed_int = _as_rng(seed)
    w = np.asarray(model.dkernel.weights, float)
    L = model.dkernel.L_max
    W = counts.size
    snaps = np.zeros((obs.size, W), dtype=np.int64)
    t = state0.time
    events = clipped = leak = 0
    ext = t if counts.sum() == 0 else None
    for k, t_obs in enumerate(obs):
        span = t_obs - t
        n_steps = int(math.ceil(span / dt_leap - 1e-9)) if span > 0 else 0
        for step in range(n_steps):
            if counts.sum() == 0:
                break
            dt = span / n_steps
            n = counts.astype(float)
            births = rng.poisson(b * n * dt)
            deaths = rng.poisson(d * n * dt)
            incoming = np.convolve(n, w)[L:L + W] if mu > 0 else np.zeros(W)
            mutants = rng.poisson(incoming * dt)
            lost = rng.poisson(max(mu * n.sum() - incoming.sum(), 0.0) * dt)
            new = counts + births - deaths + mutants
            neg = new < 0
            if neg.any():
                clipped += int(-new[neg].sum())
                new[neg] = 0
            counts = new
            events += int(births.sum() + deaths.sum() + mutants.sum() + lost)
            leak += int(lost)
            if counts.sum() > cap:
                raise PopulationCapError(f"total population exceeded cap {cap}")
            if ext is None and counts.sum() == 0:
                ext = t + (step + 1) * dt
        t = float(t_obs)
        snaps[k] = counts
    return Trajectory(model.grid, obs, snaps, seed_int, leak, state0.event_count + events,
                      ext, clipped, "tau-leap")


# --------------------------------------------------------------------------
# Extinction
# --------------------------------------------------------------------------


def extinction_time(trajectory: Trajectory, compact: tuple[float, float] | None = None) -> ExtinctionTime:
    """First time the population (or the part in ``compact``) is zero.

    Without a compact the exact extinction time recorded by the engine is
    used when available; otherwise the first observation time with zero
    counts.  Returns a censored marker at the last observation time if the
    population never dies out.
    """
    if compact is None:
        if trajectory.extinction_time is not None:
            return ExtinctionTime(float(trajectory.extinction_time), False)
        pos = slice(None)
    else:
        pos = trajectory.grid.sites_in(*compact)
    alive = trajectory.counts[:, pos].sum(axis=1) > 0
    dead = np.nonzero(~alive)[0]
    if dead.size:
        return ExtinctionTime(float(trajectory.times[dead[0]]), False)
    return ExtinctionTime(float(trajectory.times[-1]), True)
