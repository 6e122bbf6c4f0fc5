"""Command-line experiment runner.

    traitbranch {check,simulate,mean,hj,compare,sweep} CONFIG [options]

CONFIG is a YAML file or ``demo:NAME`` for a bundled config.  Exit codes:
0 success, 2 assumption or configuration failure, 3 numerical diagnostic,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import uniform_deviation_experiment, cutoff_experiment
from .config import ExperimentConfig, load_shipped
from .core import REQUIRED, AssumptionReport, classify_regime, verify_assumptions
from .ensemble import Moments, RunSpec, default_workers, run_ensemble
from .errors import ConfigError, NumericalDiagnostic, TraitBranchError
from .hj import Mesh, apply_cutoff, cross_validate, lipschitz_report, solve_hj, survival_set
from .io import file_digest, provenance, read_jsonl, write_csv, write_jsonl
from .meanfield import (check_variance_bound_subcritical, check_variance_bound_supercritical,
                        integrate_exponent, integrate_mean, integrate_second_moments)

EXIT_OK, EXIT_ASSUMPTION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("check", "simulate", "mean", "hj", "compare", "sweep")


class AssumptionFailure(TraitBranchError):
    pass


class Context:
    def __init__(self, cfg: ExperimentConfig, out: Path, seed: int, workers: int, force: bool):
        self.cfg = cfg
        self.out = out
        self.seed = seed
        self.workers = workers
        self.force = force

    @property
    def meta(self) -> dict:
        return provenance(self.cfg.hash, self.seed)

    def path(self, name: str) -> Path:
        return self.out / name


def load_config(spec: str) -> ExperimentConfig:
    if spec.startswith("demo:"):
        return load_shipped(spec[5:])
    return ExperimentConfig.load(spec)


# --------------------------------------------------------------------------
# check
# --------------------------------------------------------------------------


def assumption_report(cfg: ExperimentConfig) -> tuple[AssumptionReport, tuple[str, ...]]:
    model = cfg.model()
    u0 = cfg.u0_samples(model.grid)
    a = cfg["regime"]["a"]
    report = verify_assumptions(model, u0, K_exponent=a)
    expect = cfg["regime"]["expect"]
    if expect is None:
        required = ("A1-rates", "A2-kernel", "A3-lipschitz", "A5-mesh")
    else:
        required = REQUIRED[expect]
    return report, required


def cmd_check(ctx: Context) -> int:
    report, required = assumption_report(ctx.cfg)
    rows = [json.loads(line) for line in report.to_jsonl().splitlines()]
    for r in rows:
        r["required"] = r.get("check") in required
    write_jsonl(ctx.path("assumptions.jsonl"), ctx.meta, rows)
    for c in report.checks:
        flag = "PASS" if c.passed else "FAIL"
        mark = "*" if c.name in required else " "
        vals = ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in c.values.items())
        print(f"{mark} {flag} {c.name}: {vals}")
    print(f"  regime: {report.regime.tag}, alpha = {report.regime.alpha:.6g}")
    ok = report.passed(required)
    print("assumptions:", "pass" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_ASSUMPTION


def _precheck(ctx: Context) -> None:
    if ctx.force:
        return
    report, required = assumption_report(ctx.cfg)
    if not report.passed(required):
        failed = [c.name for c in report.checks if c.name in required and not c.passed]
        raise AssumptionFailure(f"required assumptions fail: {failed}; run 'check' or pass --force")


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def _run_spec(cfg: ExperimentConfig) -> tuple[RunSpec, object]:
    run = cfg["run"]
    model = cfg.model()
    means = cfg.initial_means(model.grid)
    obs = cfg.observation_times()
    window = tuple(run["window"]) if run["window"] else None
    if run["method"] == "windowed" and window is None:
        raise ConfigError("[run] method 'windowed' needs a window")
    spec = RunSpec(model, means, cfg["initial"]["mode"], float(run["t_end"]), obs, run["method"],
                   run["dt_leap"], float(run["leap_bound"]), window, int(run["cap"]))
    grid = model.restrict(*window).grid if run["method"] == "windowed" else model.grid
    return spec, grid


def cmd_simulate(ctx: Context) -> int:
    _precheck(ctx)
    cfg = ctx.cfg
    spec, grid = _run_spec(cfg)
    R = int(cfg["run"]["R"])
    store = cfg["run"]["store"] if cfg["run"]["store"] is not None else R <= 100
    ens = run_ensemble(spec, R, ctx.seed, "store" if store else "moments", workers=ctx.workers)
    times, x = spec.observation_times, grid.x
    if store:
        sc = ens.summary
        write_csv(ctx.path("simulate_counts.csv"), ctx.meta, ("replicate", "time", "site", "x", "count"),
                  ((int(r), float(t), int(grid.i_min + i), float(x[i]), int(sc.counts[k, j, i]))
                   for k, r in enumerate(sc.replicates) for j, t in enumerate(times) for i in range(grid.size)))
        mom = Moments.from_batch(sc.counts) if len(sc.replicates) else None
        leak, events = int(sc.leak.sum()), None
    else:
        mom = ens.summary.moments if ens.summary is not None else None
        leak, events = ens.summary.boundary_leak, ens.summary.event_count
    if mom is not None:
        var = mom.var
        se = mom.se_mean
        write_csv(ctx.path("simulate_summary.csv"), ctx.meta, ("time", "site", "x", "mean", "var", "se_mean"),
                  ((float(t), int(grid.i_min + i), float(x[i]), float(mom.mean[j, i]), float(var[j, i]),
                    float(se[j, i])) for j, t in enumerate(times) for i in range(grid.size)))
    write_jsonl(ctx.path("simulate_report.jsonl"), ctx.meta,
                [{"R": R, "completed": ens.completed, "boundary_leak": leak, "event_count": events,
                  "method": spec.method},
                 *({"replicate": r, "error": msg} for r, msg in ens.errors)])
    print(f"simulated {ens.completed}/{R} replicates; boundary leak {leak}")
    return EXIT_OK if ens.completed else EXIT_NUMERICAL


# --------------------------------------------------------------------------
# mean
# --------------------------------------------------------------------------


def cmd_mean(ctx: Context) -> int:
    _precheck(ctx)
    cfg = ctx.cfg
    sec = cfg["mean"]
    model = cfg.model()
    g = model.grid
    t_end = float(sec["t_end"] if sec["t_end"] is not None else cfg["run"]["t_end"])
    t_eval = np.asarray(sec["t_eval"], float) if sec["t_eval"] is not None else np.array([0.0, t_end])
    n0 = cfg.initial_means(g)
    mf = integrate_mean(model, n0, t_end, t_eval)
    write_csv(ctx.path("mean.csv"), ctx.meta, ("time", "site", "x", "n"),
              ((float(t), int(g.i_min + i), float(g.x[i]), float(mf.n[k, i]))
               for k, t in enumerate(mf.times) for i in range(g.size)))
    report = [{"kind": "mean", "leak": float(mf.leak[-1]), "steps": mf.stats.accepted,
               "rejected": mf.stats.rejected}]
    u0 = cfg.u0_samples(g)
    if np.all(np.isfinite(u0)):
        ef = integrate_exponent(model, u0, t_end / g.log_K, t_eval / g.log_K,
                                boundary=sec["exponent_boundary"])
        write_csv(ctx.path("exponent.csv"), ctx.meta, ("t", "site", "x", "u"),
                  ((float(t), int(g.i_min + i), float(g.x[i]), float(ef.u[k, i]))
                   for k, t in enumerate(ef.times) for i in range(g.size)))
        report.append({"kind": "exponent", "lipschitz": ef.lipschitz().tolist(), "steps": ef.stats.accepted})
    if sec["moments"]:
        mode = cfg["initial"]["mode"]
        mt = integrate_second_moments(model, n0, t_end, t_eval, cov0=mode)
        write_csv(ctx.path("moments.csv"), ctx.meta, ("time", "site", "x", "mean", "var", "var_over_mean", "relative_var"),
                  ((float(t), int(g.i_min + i), float(g.x[i]), float(mt.m[k, i]), float(mt.var[k, i]),
                    float(mt.variance_to_mean[k, i]), float(mt.relative_variance[k, i]))
                   for k, t in enumerate(mt.times) for i in range(g.size)))
        tag = classify_regime(model.rates).tag
        bound = None
        if tag == "subcritical":
            bound = check_variance_bound_subcritical(mt, model)
        elif tag == "supercritical" and cfg["regime"]["a"] is not None:
            bound = check_variance_bound_supercritical(mt, model, float(cfg["regime"]["a"]))
        if bound is not None:
            rows = [json.loads(line) for line in bound.to_jsonl().splitlines()]
            write_jsonl(ctx.path("bounds.jsonl"), ctx.meta, rows)
            print(f"{bound.name}: margin {bound.margin:.6g} ({'pass' if bound.passed else 'FAIL'})")
    write_jsonl(ctx.path("mean_report.jsonl"), ctx.meta, report)
    print(f"mean field written to {ctx.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# hj
# --------------------------------------------------------------------------


def _hj_solution(cfg: ExperimentConfig):
    sec = cfg["hj"]
    u0 = cfg.u0_function()
    if u0 is None:
        raise ConfigError("[initial] u0 is required for the Hamilton-Jacobi solver")
    ham = cfg.hamiltonian()
    window = tuple(sec["window"] or cfg["grid"]["window"])
    t_eval = sec["t_eval"] if sec["t_eval"] is not None else [0.0, float(sec["t_end"])]
    if sec["cross_validate"]:
        cv = cross_validate(ham, u0, window, float(sec["t_end"]), compact=sec["compact"],
                            dx_ladder=sec["dx_ladder"], ref_tol=float(sec["ref_tol"]), t_eval=t_eval,
                            h_hat=float(sec["h_hat"]))
        return cv.reference, cv
    sol = solve_hj(ham, u0, Mesh(window[0], window[1], float(sec["dx"])), float(sec["t_end"]),
                   sec["scheme"], t_eval=t_eval, h_hat=float(sec["h_hat"]))
    return sol, None


def cmd_hj(ctx: Context) -> int:
    _precheck(ctx)
    sol, cv = _hj_solution(ctx.cfg)
    cut = apply_cutoff(sol)
    write_csv(ctx.path("hj.csv"), ctx.meta, ("t", "x", "u", "beta", "status"),
              ((float(t), float(sol.x[j]), float(sol.u[k, j]), float(cut.beta[k, j]), int(cut.status[k, j]))
               for k, t in enumerate(sol.times) for j in range(sol.x.size)))
    surv = [json.loads(survival_set(sol, float(t)).to_json()) for t in sol.times]
    write_jsonl(ctx.path("survival.jsonl"), ctx.meta, surv)
    lip = lipschitz_report(sol)
    rows = [{"kind": "lipschitz", **json.loads(lip.to_json())}]
    if cv is not None:
        rows.append({"kind": "cross-validation", **json.loads(cv.to_json())})
    write_jsonl(ctx.path("hj_report.jsonl"), ctx.meta, rows)
    print(f"HJ solved ({sol.scheme}, dx={sol.dx}); L_T = {lip.L_T:.4g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------


def cmd_compare(ctx: Context) -> int:
    _precheck(ctx)
    cfg = ctx.cfg
    sec = cfg["compare"]
    ladder = sec["log_K"] or [cfg["grid"]["log_K"]]
    tag = cfg["regime"]["expect"] or classify_regime(cfg.model().rates).tag
    if tag == "subcritical":
        ref, _ = _hj_solution(cfg)
        rep = cutoff_experiment(cfg.setup, ladder, ref, [tuple(c) for c in sec["survival"]],
                                   [tuple(c) for c in sec["extinction"]], float(sec["t"]),
                                   float(sec["eta"]), int(sec["R"]), ctx.seed, band_tol=sec["band_tol"],
                                   initial_mode=cfg["initial"]["mode"], workers=ctx.workers)
    elif tag == "supercritical":
        a = cfg["regime"]["a"]
        if a is None:
            raise ConfigError("[regime] a is required for the supercritical comparison")
        window = tuple(sec["window"] or cfg["grid"]["window"])
        rep = uniform_deviation_experiment(cfg.setup, ladder, float(a), window, float(sec["T"]), float(sec["D"]),
                                float(sec["eta"]), int(sec["R"]), ctx.seed, n_times=int(sec["n_times"]),
                                initial_mode=cfg["initial"]["mode"], workers=ctx.workers)
    else:
        raise ConfigError("comparison needs a subcritical or supercritical model")
    head = {"experiment": rep.experiment, "trends": rep.trends, **rep.notes}
    write_jsonl(ctx.path("compare.jsonl"), {**ctx.meta, **head}, rep.rows)
    # survival and extinction rows carry different fields
    cols = list(dict.fromkeys(k for r in rep.rows for k in r))
    cell = lambda v: json.dumps(v) if isinstance(v, (list, tuple)) else ("" if v is None else v)  # noqa: E731
    write_csv(ctx.path("compare.csv"), ctx.meta, cols, ([cell(r.get(c)) for c in cols] for r in rep.rows))
    for r in rep.rows:
        print(f"ln K = {r['log_K']:g}: p_hat = {r['p_hat']:.4f} [{r['wilson_lo']:.4f}, {r['wilson_hi']:.4f}]")
    print("trends:", json.dumps(rep.trends))
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------


def _sweep_cell(cfg_yaml: str, log_K: float, ref_x, ref_u, compact, t) -> dict:
    cfg = ExperimentConfig.from_yaml(cfg_yaml)
    model = cfg.model(log_K)
    g = model.grid
    ef = integrate_exponent(model, cfg.u0_samples(g), t, [0.0, t], boundary=cfg["mean"]["exponent_boundary"])
    pos = g.sites_in(*compact)
    err = float(np.max(np.abs(ef.u[-1][pos] - np.interp(g.x[pos], ref_x, ref_u))))
    return {"log_K": log_K, "t": t, "compact": list(compact), "sites": int(g.size),
            "sup_error": err, "lipschitz": float(ef.lipschitz()[-1])}


def _cell_name(log_K: float) -> str:
    return f"cell_logK={log_K:g}.jsonl"


def cmd_sweep(ctx: Context) -> int:
    _precheck(ctx)
    cfg = ctx.cfg
    sec = cfg["sweep"]
    if not sec["log_K"]:
        raise ConfigError("[sweep] log_K ladder is empty")
    cells = ctx.out / "sweep"
    todo = []
    for lk in sec["log_K"]:
        path = cells / _cell_name(float(lk))
        if path.exists():
            try:
                head, _ = read_jsonl(path)
                if head.get("config_hash") == cfg.hash:
                    continue
            except (ValueError, OSError):
                pass
        todo.append(float(lk))
    if todo:
        t = float(sec["t"])
        ref, _ = _hj_solution(cfg.with_updates("hj", t_end=t, t_eval=[0.0, t]))
        args = [(cfg.to_yaml(), lk, ref.x, ref.u[-1], tuple(sec["compact"]), t) for lk in todo]
        if ctx.workers > 1 and len(args) > 1:
            with ProcessPoolExecutor(max_workers=ctx.workers) as pool:
                results = list(pool.map(_sweep_cell, *zip(*args)))
        else:
            results = [_sweep_cell(*a) for a in args]
        for lk, res in zip(todo, results):
            write_jsonl(cells / _cell_name(lk), ctx.meta, [res])
    rows = []
    for lk in sec["log_K"]:
        _, body = read_jsonl(cells / _cell_name(float(lk)))
        rows.append(body[0])
    errs = [r["sup_error"] for r in rows]
    monotone = all(b < a for a, b in zip(errs, errs[1:]))
    write_csv(ctx.path("sweep_summary.csv"), ctx.meta, ("log_K", "sup_error", "lipschitz", "sites"),
              ((r["log_K"], r["sup_error"], r["lipschitz"], r["sites"]) for r in rows))
    write_jsonl(ctx.path("sweep_summary.jsonl"), ctx.meta, [{"monotone_decreasing": monotone}, *rows])
    print(f"{len(rows)} cells ({len(todo)} computed); sup errors {['%.4g' % e for e in errs]}; "
          f"strictly decreasing: {monotone}")
    return EXIT_OK


HANDLERS = {"check": cmd_check, "simulate": cmd_simulate, "mean": cmd_mean, "hj": cmd_hj,
            "compare": cmd_compare, "sweep": cmd_sweep}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _verify(args, cfg: ExperimentConfig, out: Path, seed: int, workers: int) -> int:
    """Re-run into a scratch directory and compare every file byte for byte."""
    originals = sorted(p for p in out.rglob("*") if p.is_file())
    if not originals:
        print(f"nothing to verify in {out}")
        return EXIT_IO
    with tempfile.TemporaryDirectory() as tmp:
        ctx = Context(cfg, Path(tmp), seed, workers, args.force)
        code = HANDLERS[args.command](ctx)
        if code != EXIT_OK:
            return code
        bad = 0
        for p in originals:
            twin = Path(tmp) / p.relative_to(out)
            if not twin.exists():
                continue
            same = file_digest(p) == file_digest(twin)
            bad += not same
            print(f"{'ok' if same else 'MISMATCH'} {p.relative_to(out)}")
    return EXIT_OK if bad == 0 else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="traitbranch", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", ""))
        sp.add_argument("config", help="YAML config path or demo:NAME")
        sp.add_argument("--out", help="output directory (default: [outputs] dir)")
        sp.add_argument("--seed", type=int, help="override [run] base_seed")
        sp.add_argument("--workers", type=int, help="worker processes (default: $TRAITBRANCH_WORKERS or 1)")
        sp.add_argument("--force", action="store_true", help="run even if required assumptions fail")
        sp.add_argument("--verify", action="store_true",
                        help="re-derive the outputs and compare them with the existing files")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg["outputs"]["dir"])
        seed = int(args.seed if args.seed is not None else cfg["run"]["base_seed"])
        workers = int(args.workers) if args.workers is not None else default_workers()
        if args.verify:
            return _verify(args, cfg, out, seed, workers)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](Context(cfg, out, seed, workers, args.force))
    except (AssumptionFailure, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except NumericalDiagnostic as exc:
        print(f"numerical diagnostic: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
