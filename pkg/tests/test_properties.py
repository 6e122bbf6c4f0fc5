"""Invariant suites checked over randomly drawn models and data."""

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from traitbranch.analysis import EXTINCT, InterpolatedField
from traitbranch.core import (Constant, GaussianBump, GaussianKernel, Hamiltonian, Hyperbolic, build_grid,
                              classify_regime, make_model)
from traitbranch.ensemble import RunSpec, run_ensemble
from traitbranch.hj import Mesh, cfl_step, solve_hj
from traitbranch.meanfield import integrate_exponent, integrate_mean
from traitbranch.simulator import sample_initial, simulate_exact, simulate_windowed_supercritical

unit = st.floats(0.0, 1.0)
fast = settings(max_examples=25, suppress_health_check=[HealthCheck.too_slow])


@st.composite
def subcritical_models(draw):
    log_K = draw(st.floats(2.0, 5.0))
    death = draw(st.floats(0.5, 2.0))
    p = draw(st.floats(0.0, 0.4)) * death
    # keep sup(b) - d + p <= 0
    room = death - p
    base = draw(unit) * 0.8 * room
    amp = draw(unit) * (room - base)
    grid = build_grid((-0.6, 0.6), log_K=log_K)
    return make_model(grid, GaussianBump(base, amp, width=draw(st.floats(0.2, 2.0))), Constant(death), p,
                      GaussianKernel(draw(st.floats(0.5, 2.0))))


@st.composite
def growth_models(draw):
    log_K = draw(st.floats(2.0, 5.0))
    death = draw(st.floats(0.2, 1.5))
    grid = build_grid((-0.6, 0.6), log_K=log_K)
    birth = GaussianBump(death + draw(unit) * 0.5, draw(unit), width=draw(st.floats(0.2, 2.0)))
    return make_model(grid, birth, Constant(death), draw(st.floats(0.0, 1.0)), GaussianKernel(1.0))


@given(subcritical_models(), st.lists(st.floats(0.0, 100.0), min_size=1, max_size=60))
@fast
def test_subcritical_mass_decays_at_regime_rate(model, seeds):
    n0 = np.resize(np.asarray(seeds, float), model.grid.size)
    t = np.linspace(0.0, 4.0, 9)
    mf = integrate_mean(model, n0, 4.0, t)
    rate = classify_regime(model.rates).alpha + model.dkernel.riemann_defect
    assert classify_regime(model.rates).alpha <= 1e-12
    tot = mf.total
    bound = tot[0] * np.exp(rate * t) * (1 + 1e-7) + 1e-9
    assert np.all(tot <= bound)


@given(growth_models(), st.floats(0.1, 0.9), st.lists(st.floats(0.0, 2.0), min_size=1, max_size=60))
@fast
def test_supercritical_means_stay_above_floor(model, a, extra):
    floor = math.exp(a * model.log_K)
    n0 = floor * (1 + np.resize(np.asarray(extra, float), model.grid.size))
    mf = integrate_mean(model, n0, 3.0, np.linspace(0, 3, 7))
    assert np.all(mf.n >= floor * (1 - 1e-9))
    # every site is individually non-decreasing when b >= d
    assert np.all(mf.n >= n0 * (1 - 1e-9))


@given(st.floats(0.3, 1.5), st.floats(0.2, 2.0), st.floats(0.5, 3.0), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
@settings(max_examples=15)
def test_exponent_and_mean_routes_agree(level, slope, width, base, p):
    grid = build_grid((-0.1, 0.1), log_K=10.0)
    model = make_model(grid, GaussianBump(base, 0.2), Constant(1.0), p, GaussianKernel(1.0))
    u0 = Hyperbolic(level, slope, width)(grid.x)
    t = np.array([0.0, 0.25, 0.5])
    ef = integrate_exponent(model, u0, 0.5, t, rtol=1e-11, atol=1e-13)
    mf = integrate_mean(model, np.exp(grid.log_K * u0), 5.0, t * grid.log_K, rtol=1e-11, atol=1e-13)
    assert np.allclose(np.exp(grid.log_K * ef.u), mf.n, rtol=1e-8, atol=0)


values = st.floats(-5.0, 5.0) | st.just(EXTINCT)


@given(st.lists(values, min_size=2, max_size=30), st.lists(unit, min_size=1, max_size=20))
def test_interpolation_respects_neighbouring_nodes(vals, fracs):
    x = np.linspace(-1.0, 1.0, len(vals))
    v = np.asarray(vals, float)
    f = InterpolatedField(x, v)
    pts = -1.0 + 2.0 * np.asarray(fracs)
    out = f(pts)
    j = np.clip(np.searchsorted(x, pts, side="right") - 1, 0, len(x) - 2)
    lo = np.minimum(v[j], v[j + 1])
    hi = np.maximum(v[j], v[j + 1])
    assert np.all((out >= lo) & (out <= hi))
    finite = np.isfinite(out)
    assert np.all(np.isneginf(out[~finite]))


@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
@settings(max_examples=20)
def test_exact_runs_are_bit_identical(seed, n):
    model = make_model(build_grid((-0.3, 0.3), log_K=3.0), Constant(0.9), Constant(1.0), 0.3,
                       GaussianKernel(1.0))
    s0 = sample_initial(np.full(model.grid.size, float(n)), "poisson", seed)
    a = simulate_exact(model, s0, 2.0, [0.5, 1.0, 2.0], seed)
    b = simulate_exact(model, s0, 2.0, [0.5, 1.0, 2.0], seed)
    assert np.array_equal(a.counts, b.counts) and a.event_count == b.event_count


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=5)
def test_ensemble_is_independent_of_worker_count(seed):
    model = make_model(build_grid((-0.3, 0.3), log_K=3.0), Constant(0.9), Constant(1.0), 0.3,
                       GaussianKernel(1.0))
    spec = RunSpec(model, np.full(model.grid.size, 10.0), "poisson", 1.0, np.array([0.5, 1.0]))
    a = run_ensemble(spec, 40, seed, workers=1, chunk_size=16).summary.moments
    b = run_ensemble(spec, 40, seed, workers=2, chunk_size=16).summary.moments
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.m2, b.m2)


@given(growth_models(), st.integers(0, 2**32 - 1))
@settings(max_examples=10)
def test_windowed_runs_are_bit_identical(model, seed):
    s0 = sample_initial(np.full(model.grid.size, 20.0), "deterministic")
    a = simulate_windowed_supercritical(model, (-0.3, 0.3), s0, 0.5, None, seed)
    b = simulate_windowed_supercritical(model, (-0.3, 0.3), s0, 0.5, None, seed)
    assert np.array_equal(a.counts, b.counts) and a.boundary_leak == b.boundary_leak


@given(st.floats(0.0, 1.0), st.floats(0.5, 1.5), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
@settings(max_examples=15)
def test_hj_comparison_principle(level, slope, gap, p):
    ham = Hamiltonian(GaussianBump(0.4, 0.1), Constant(1.0), p, GaussianKernel(1.0))
    mesh = Mesh(-1.0, 1.0, 0.02)
    lower = Hyperbolic(level, slope, 0.5)
    upper = lambda x: lower(x) + gap * np.exp(-np.asarray(x) ** 2)  # noqa: E731
    dt = min(cfl_step(ham, slope + gap, mesh.dx), 0.05)
    u = solve_hj(ham, lower, mesh, 0.5, dt=dt).u
    v = solve_hj(ham, upper, mesh, 0.5, dt=dt).u
    assert np.all(u <= v + 1e-12)
    # adding a constant commutes with the evolution
    w = solve_hj(ham, lambda x: lower(x) + 0.3, mesh, 0.5, dt=dt).u
    assert np.allclose(w, u + 0.3, atol=1e-10)
