import json
import math

import numpy as np
import pytest
from scipy import stats

from traitbranch.analysis import (EXTINCT, ConvergenceReport, InterpolatedField, deviation_stats,
                                  hopf_cole, interpolate, uniform_deviation_experiment, sup_distance_on_compact,
                                  cutoff_experiment, wilson_interval)
from traitbranch.core import Constant, GaussianKernel, Hyperbolic, build_grid, make_model
from traitbranch.ensemble import RunSpec, run_ensemble
from traitbranch.errors import ConfigError, DataInconsistencyError
from traitbranch.hj import Mesh, cross_validate, solve_hj
from traitbranch.meanfield import integrate_mean, integrate_second_moments
from traitbranch.simulator import Trajectory

from conftest import constant_model, demo_model


def traj_from(counts, times, grid):
    return Trajectory(grid, np.asarray(times, float), np.asarray(counts, np.int64))


class TestHopfCole:
    def test_values(self):
        g = build_grid((0.0, 0.02), log_K=10.0)
        n = round(math.exp(5.0))
        hc = hopf_cole(traj_from([[n, 0, 1]], [10.0], g))
        assert abs(hc.beta[0, 0] - 0.5) <= math.log(1 + 1 / n) / 10
        assert hc.beta[0, 1] == EXTINCT and hc.extinct[0, 1]
        assert hc.beta[0, 2] == 0.0
        assert hc.times.tolist() == [1.0]

    def test_observation_grid_must_match(self):
        g = build_grid((0.0, 0.02), log_K=10.0)
        tr = traj_from([[1, 1, 1], [2, 2, 2]], [0.0, 10.0], g)
        assert hopf_cole(tr, rescaled_times=[0.0, 1.0]).times.tolist() == [0.0, 1.0]
        with pytest.raises(ConfigError):
            hopf_cole(tr, rescaled_times=[0.0, 0.5])
        with pytest.raises(ConfigError):
            hopf_cole(tr, log_K=7.0)


class TestInterpolation:
    def test_midpoint_and_nodes(self):
        g = build_grid((0.0, 0.02), log_K=10.0)
        f = interpolate([0.0, 1.0, 3.0], g)
        assert f(0.005)[0] == pytest.approx(0.5)
        assert f(g.x).tolist() == [0.0, 1.0, 3.0]
        assert f(0.0175)[0] == pytest.approx(2.5)

    def test_constant(self):
        g = build_grid((-0.1, 0.1), log_K=10.0)
        f = interpolate(np.full(g.size, 0.7), g)
        assert np.allclose(f(np.linspace(-0.1, 0.1, 33)), 0.7)

    def test_extinct_segments(self):
        f = InterpolatedField([0.0, 1.0, 2.0], [0.5, EXTINCT, 0.5])
        assert np.all(np.isneginf(f([0.2, 0.8, 1.5])))
        assert f(0.0)[0] == 0.5
        assert f.extinct_on(0.0, 0.0)  # closed segment touches the extinct node
        assert not InterpolatedField([0.0, 1.0], [0.1, 0.2]).extinct_on(0, 1)

    def test_domain_guard(self):
        with pytest.raises(ConfigError):
            InterpolatedField([0.0, 1.0], [0.0, 1.0])(1.5)
        with pytest.raises(ConfigError):
            interpolate([1.0], build_grid((0.0, 0.02), log_K=10.0))


class TestSupDistance:
    def setup_method(self):
        self.x = np.linspace(-1, 1, 21)
        self.g = InterpolatedField(self.x, np.cos(self.x))

    def test_identical(self):
        assert sup_distance_on_compact(self.g, self.g, (-0.5, 0.5)) == 0.0

    def test_shifted(self):
        f = InterpolatedField(self.x, np.cos(self.x) + 0.1)
        assert sup_distance_on_compact(f, self.g, (-0.5, 0.5)) == pytest.approx(0.1, abs=1e-12)

    def test_extinct_is_infinite(self):
        v = np.cos(self.x)
        v[12] = EXTINCT
        f = InterpolatedField(self.x, v)
        assert sup_distance_on_compact(f, self.g, (-0.5, 0.5)) == math.inf
        assert sup_distance_on_compact(f, self.g, (-1.0, -0.5)) < math.inf

    def test_off_node_reference(self):
        f = InterpolatedField(self.x, np.zeros_like(self.x))
        d = sup_distance_on_compact(f, lambda x: np.sin(40 * np.asarray(x)) * 0 + np.asarray(x) ** 2, (0.0, 0.5))
        assert d == pytest.approx(0.25)


class TestWilson:
    def test_against_closed_form(self):
        z = stats.norm.ppf(0.975)
        for k, n in [(0, 400), (3, 40), (20, 20), (17, 100)]:
            p = k / n
            c = (p + z * z / (2 * n)) / (1 + z * z / n)
            h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
            lo, hi = wilson_interval(k, n)
            assert lo == pytest.approx(max(c - h, 0), abs=1e-12)
            assert hi == pytest.approx(min(c + h, 1), abs=1e-12)
            assert lo <= p <= hi

    def test_guards(self):
        with pytest.raises(ConfigError):
            wilson_interval(0, 0)
        with pytest.raises(ConfigError):
            wilson_interval(5, 4)


class TestDeviationStats:
    def test_exact_match_gives_zero(self):
        m = demo_model()
        n0 = np.full(11, 7.0)
        mf = integrate_mean(m, n0, 0.0, [0.0])
        spec = RunSpec(m, n0, "deterministic", 0.0, np.array([0.0]))
        ds = deviation_stats(run_ensemble(spec, 5, 1).summary, mf)
        assert np.all(ds.value == 0)

    def test_pure_death_poisson(self):
        g = build_grid((0.0, 0.05), log_K=3.0)
        m = make_model(g, Constant(0.0), Constant(1.0), 0.0, GaussianKernel(1.0))
        t = np.array([0.0, 1.0])
        mf = integrate_mean(m, [50.0], 1.0, t)
        ens = run_ensemble(RunSpec(m, np.array([50.0]), "poisson", 1.0, t), 4000, 6)
        ds = deviation_stats(ens.summary, mf, t)
        exact = 1 / (50 * math.exp(-1.0))
        assert abs(ds.value[1, 0] - exact) <= 3 * ds.se[1, 0]

    def test_five_site_against_moment_oracle(self):
        m = demo_model(log_K=3.0, window=(-0.23, 0.23))
        assert m.grid.size == 5
        n0 = np.full(5, 10.0)
        t = np.array([0.0, 1.0, 2.0])
        mt = integrate_second_moments(m, n0, 2.0, t)
        mf = integrate_mean(m, n0, 2.0, t)
        ens = run_ensemble(RunSpec(m, n0, "poisson", 2.0, t), 6000, 99, chunk_size=1000)
        ds = deviation_stats(ens.summary, mf, t)
        assert np.all(np.abs(ds.value - mt.relative_variance) <= 3 * ds.se)

    def test_inconsistent_data(self):
        g = build_grid((0.0, 0.05), log_K=3.0)
        m = make_model(g, Constant(0.0), Constant(1.0), 0.0, GaussianKernel(1.0))
        mf = integrate_mean(m, [0.0], 1.0)
        ens = run_ensemble(RunSpec(m, np.array([3.0]), "deterministic", 1.0, np.array([0.0, 1.0])), 2, 1)
        with pytest.raises(DataInconsistencyError):
            deviation_stats(ens.summary, mf)


# net growth b - d + p = -0.25, so the exact profile is u = 1 - t / 4
@pytest.fixture(scope="module")
def constant_reference():
    H = constant_model().hamiltonian
    return solve_hj(H, Constant(1.0), Mesh(-1, 1, 0.01), 16.0, t_eval=[0, 1, 2, 4, 16])


class TestExperiments:

    def _constant_setup(self, lk):
        m = constant_model(log_K=lk, window=(-0.3, 0.3))
        return m, np.full(m.grid.size, math.exp(lk))

    def test_extinction_certain_after_crossing(self, constant_reference):
        rep = cutoff_experiment(self._constant_setup, [3.0, 4.0], constant_reference, [], [(-0.2, 0.2)],
                                   16.0, 0.1, 40, 5, band_tol=0.01)
        rows = rep.select(kind="extinction")
        assert [r["p_hat"] for r in rows] == [1.0, 1.0]
        assert all(r["wilson_lo"] <= r["p_hat"] <= r["wilson_hi"] for r in rows)
        assert rep.trends["extinction[-0.2, 0.2]"]

    def test_large_eta_never_fails(self, constant_reference):
        # ln K = 8 keeps about e^6 individuals per site at t = 1, so no site empties
        rep = cutoff_experiment(self._constant_setup, [8.0], constant_reference, [(-0.2, 0.2)], [],
                                   1.0, 10.0, 20, 5, band_tol=0.01)
        assert rep.rows[0]["p_hat"] == 0.0

    def test_compact_validation(self, constant_reference):
        # at t = 4 the profile sits on zero, inside neither set once the margin is applied
        for surv, ext in [([(-0.2, 0.2)], []), ([], [(-0.2, 0.2)])]:
            with pytest.raises(ConfigError):
                cutoff_experiment(self._constant_setup, [3.0], constant_reference, surv, ext,
                                     4.0, 0.1, 10, 1, band_tol=0.01)
        with pytest.raises(ConfigError):
            cutoff_experiment(self._constant_setup, [3.0], constant_reference, [(-0.2, 0.2)], [],
                                 2.0, 0.1, 0, 1, band_tol=0.01)

    def test_critical_single_site_second_moment(self):
        a, lk = 0.5, 6.0

        def setup(log_K):
            g = build_grid((0.0, 0.5 / log_K**2), log_K=log_K)
            m = make_model(g, Constant(1.0), Constant(1.0), 0.0, GaussianKernel(1.0))
            return m, np.array([math.exp(a * log_K)])

        rep = uniform_deviation_experiment(setup, [lk], a, (0.0, 0.01), 1.0, 0.5, 100.0, 3000, 8, n_times=3)
        row = rep.rows[0]
        assert row["p_hat"] == 0.0
        assert row["max_relative_var_t"] == pytest.approx(1.0)
        expected = 2.0 * 1.0 * lk / math.exp(a * lk)
        assert abs(row["max_relative_var"] - expected) <= 3 * row["max_relative_var_se"]

    def test_deterministic_start_has_no_deviation(self):
        def setup(log_K):
            g = build_grid((-0.2, 0.2), log_K=log_K)
            m = make_model(g, Constant(1.0), Constant(1.0), 0.2, GaussianKernel(1.0))
            return m, np.full(g.size, math.ceil(math.exp(0.5 * log_K)))

        rep = uniform_deviation_experiment(setup, [4.0], 0.5, (-0.2, 0.2), 0.0, 0.2, 0.1, 10, 1, n_times=1)
        assert rep.rows[0]["p_hat"] == 0.0 and rep.rows[0]["max_relative_var"] == 0.0

    def test_uniform_deviation_guards(self):
        with pytest.raises(ConfigError):
            uniform_deviation_experiment(self._constant_setup, [3.0], 0.5, (-0.2, 0.2), 1.0, 0.2, 0.1, 10, 1)


def test_report_serialization():
    rep = ConvergenceReport("demo", [{"log_K": 7.0, "compact": (-0.5, 0.5), "p_hat": 0.25}], {"ok": True},
                            {"base_seed": 3})
    lines = rep.to_jsonl().splitlines()
    assert json.loads(lines[0])["trends"] == {"ok": True}
    assert json.loads(lines[1])["compact"] == [-0.5, 0.5]
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "log_K,compact,p_hat"
    assert rep.select(log_K=7.0) == rep.rows and rep.select(log_K=9.0) == []
