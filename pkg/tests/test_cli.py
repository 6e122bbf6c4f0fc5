import json
import math

import numpy as np
import pytest
import yaml

from traitbranch.cli import EXIT_ASSUMPTION, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, main
from traitbranch.io import read_csv, read_jsonl

# constant rates: net growth -0.25, so the rescaled exponent is 1 - t / 4
SMALL = {
    "grid": {"log_K": 3.0, "window": [-0.3, 0.3]},
    "rates": {"birth": 0.5, "death": 1.0, "p": 0.25},
    "kernel": {"kind": "gaussian", "sigma": 1.0},
    "initial": {"u0": {"kind": "constant", "value": 1.0}, "mode": "poisson"},
    "run": {"t_end": 1.0, "observation_times": [0.0, 0.5, 1.0], "R": 20, "base_seed": 4},
    "mean": {"t_end": 6.0, "t_eval": [0.0, 3.0, 6.0], "exponent_boundary": "extrapolate"},
    "hj": {"window": [-1.0, 1.0], "dx": 0.01, "t_end": 16.0, "t_eval": [0.0, 1.0, 16.0]},
    "compare": {"log_K": [3.0], "t": 16.0, "eta": 0.1, "R": 20, "extinction": [[-0.2, 0.2]],
                "band_tol": 0.01},
    "sweep": {"log_K": [3.0, 4.0], "compact": [-0.2, 0.2], "t": 1.0},
}


def write_cfg(tmp_path, **sections):
    raw = json.loads(json.dumps(SMALL))
    for sec, vals in sections.items():
        raw.setdefault(sec, {}).update(vals)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def run(*args):
    return main([str(a) for a in args])


class TestCheck:
    def test_shipped_demo_passes(self, tmp_path, capsys):
        assert run("check", "demo:subcritical_demo", "--out", tmp_path) == EXIT_OK
        out = capsys.readouterr().out
        assert "alpha = -0.2" in out and "assumptions: pass" in out
        head, rows = read_jsonl(tmp_path / "assumptions.jsonl")
        assert len(head["config_hash"]) == 64
        checks = {r["check"]: r for r in rows if "check" in r}
        assert checks["B4-subcritical"]["passed"] and checks["B4-subcritical"]["required"]

    def test_wrong_regime_fails(self, tmp_path):
        # p = 0.6 > d - b makes the model supercritical
        cfg = write_cfg(tmp_path, rates={"p": 0.6}, regime={"expect": "subcritical"})
        assert run("check", cfg, "--out", tmp_path / "o") == EXIT_ASSUMPTION

    def test_coarse_mesh_fails(self, tmp_path):
        cfg = write_cfg(tmp_path, grid={"delta": 0.5})
        assert run("check", cfg, "--out", tmp_path / "o") == EXIT_ASSUMPTION

    def test_required_checks_gate_other_commands(self, tmp_path):
        cfg = write_cfg(tmp_path, rates={"p": 0.6}, regime={"expect": "subcritical"})
        assert run("mean", cfg, "--out", tmp_path / "o") == EXIT_ASSUMPTION
        assert run("mean", cfg, "--out", tmp_path / "o", "--force") == EXIT_OK


class TestMean:
    def test_constant_exponent_is_affine(self, tmp_path):
        assert run("mean", "demo:constant", "--out", tmp_path) == EXIT_OK
        _, rows = read_csv(tmp_path / "exponent.csv")
        for r in rows:
            assert float(r["u"]) == pytest.approx(1.0 - 0.25 * float(r["t"]), abs=1e-8)
        _, rows = read_csv(tmp_path / "mean.csv")
        assert {float(r["time"]) for r in rows} == {0.0, 5.0, 10.0, 20.0}

    def test_moments_and_bound(self, tmp_path, capsys):
        assert run("mean", "demo:eleven_site", "--out", tmp_path) == EXIT_OK
        assert "pass" in capsys.readouterr().out
        _, rows = read_jsonl(tmp_path / "bounds.jsonl")
        assert rows
        _, m = read_csv(tmp_path / "moments.csv")
        assert len(m) == 5 * 11


class TestSimulate:
    def test_outputs_and_verify(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "o"
        assert run("simulate", cfg, "--out", out, "--workers", 2) == EXIT_OK
        _, counts = read_csv(out / "simulate_counts.csv")
        assert len(counts) == 20 * 3 * 5
        assert {r["replicate"] for r in counts} == {str(r) for r in range(20)}
        capsys.readouterr()
        assert run("simulate", cfg, "--out", out, "--workers", 1, "--verify") == EXIT_OK
        assert "MISMATCH" not in capsys.readouterr().out

    def test_verify_detects_tampering(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "o"
        assert run("simulate", cfg, "--out", out) == EXIT_OK
        path = out / "simulate_summary.csv"
        lines = path.read_text().splitlines()
        lines[-1] = lines[-1].rsplit(",", 1)[0] + ",123.0"
        path.write_text("\n".join(lines) + "\n")
        assert run("simulate", cfg, "--out", out, "--verify") == EXIT_NUMERICAL
        assert "MISMATCH simulate_summary.csv" in capsys.readouterr().out

    def test_seed_changes_output(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert run("simulate", cfg, "--out", tmp_path / "a", "--seed", 1) == EXIT_OK
        assert run("simulate", cfg, "--out", tmp_path / "b", "--seed", 2) == EXIT_OK
        a = (tmp_path / "a" / "simulate_counts.csv").read_text()
        b = (tmp_path / "b" / "simulate_counts.csv").read_text()
        assert a != b

    def test_moments_only_for_large_runs(self, tmp_path):
        cfg = write_cfg(tmp_path, run={"R": 120})
        assert run("simulate", cfg, "--out", tmp_path / "o") == EXIT_OK
        assert not (tmp_path / "o" / "simulate_counts.csv").exists()
        _, rows = read_csv(tmp_path / "o" / "simulate_summary.csv")
        first = [r for r in rows if float(r["time"]) == 0.0]
        # Poisson start with mean e^3
        assert all(abs(float(r["mean"]) - math.exp(3)) < 4 * float(r["se_mean"]) + 1e-9 for r in first)


class TestHJAndCompare:
    def test_hj_outputs(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert run("hj", cfg, "--out", tmp_path) == EXIT_OK
        _, rows = read_csv(tmp_path / "hj.csv")
        last = [r for r in rows if float(r["t"]) == 16.0]
        assert all(float(r["u"]) == pytest.approx(-3.0, abs=1e-6) for r in last)
        assert all(float(r["beta"]) == -math.inf and r["status"] == "-1" for r in last)
        _, surv = read_jsonl(tmp_path / "survival.jsonl")
        assert len(surv) == 3

    def test_compare_extinction(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        assert run("compare", cfg, "--out", tmp_path) == EXIT_OK
        head, rows = read_jsonl(tmp_path / "compare.jsonl")
        assert rows[0]["p_hat"] == 1.0
        assert "trends" in head

    def test_compare_mixed_rows(self, tmp_path, monkeypatch):
        import traitbranch.cli as cli
        from traitbranch.analysis import ConvergenceReport

        rows = [{"log_K": 3.0, "kind": "survival", "compact": [-0.2, 0.2], "eta": 0.1, "p_hat": 0.0,
                 "wilson_lo": 0.0, "wilson_hi": 0.1},
                {"log_K": 3.0, "kind": "extinction", "compact": [0.5, 0.6], "p_hat": 1.0,
                 "wilson_lo": 0.9, "wilson_hi": 1.0}]
        monkeypatch.setattr(cli, "cutoff_experiment",
                            lambda *a, **k: ConvergenceReport("cutoff", rows, {}, {}))
        assert run("compare", write_cfg(tmp_path), "--out", tmp_path) == EXIT_OK
        _, back = read_csv(tmp_path / "compare.csv")
        assert back[0]["eta"] == "0.1" and back[1]["eta"] == ""
        assert back[1]["compact"] == "[0.5, 0.6]"


class TestSweep:
    def test_cells_are_reused(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        assert run("sweep", cfg, "--out", tmp_path) == EXIT_OK
        assert "(2 computed)" in capsys.readouterr().out
        before = (tmp_path / "sweep_summary.csv").read_text()
        assert run("sweep", cfg, "--out", tmp_path) == EXIT_OK
        assert "(0 computed)" in capsys.readouterr().out
        assert (tmp_path / "sweep_summary.csv").read_text() == before
        _, rows = read_jsonl(tmp_path / "sweep_summary.jsonl")
        # constant coefficients: the discrete exponent is exact at every ln K
        assert all(r["sup_error"] < 1e-8 for r in rows[1:])

    def test_changed_config_recomputes(self, tmp_path, capsys):
        assert run("sweep", write_cfg(tmp_path), "--out", tmp_path) == EXIT_OK
        capsys.readouterr()
        cfg = write_cfg(tmp_path, run={"R": 3})
        assert run("sweep", cfg, "--out", tmp_path) == EXIT_OK
        assert "(2 computed)" in capsys.readouterr().out

    def test_empty_ladder(self, tmp_path):
        assert run("sweep", write_cfg(tmp_path, sweep={"log_K": []}), "--out", tmp_path) == EXIT_ASSUMPTION


class TestErrors:
    def test_missing_config_file(self, tmp_path):
        assert run("check", tmp_path / "none.yaml") == EXIT_IO

    def test_output_path_is_a_file(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        assert run("check", write_cfg(tmp_path), "--out", blocker) == EXIT_IO

    def test_verify_without_outputs(self, tmp_path):
        assert run("check", write_cfg(tmp_path), "--out", tmp_path / "empty", "--verify") == EXIT_IO

    def test_bad_config(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("grid: {log_K: 3}\n")
        assert run("check", path) == EXIT_ASSUMPTION

    def test_unknown_demo(self):
        assert run("check", "demo:missing") == EXIT_ASSUMPTION
