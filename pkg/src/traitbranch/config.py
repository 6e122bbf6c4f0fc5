"""Experiment configuration: YAML in, validated and normalized mapping out.

Sections: ``grid``, ``rates``, ``kernel``, ``initial``, ``regime``, ``run``,
``mean``, ``hj``, ``compare``, ``sweep``, ``outputs``.  Only ``grid``,
``rates`` and ``kernel`` are required.  The normalized mapping has every
default filled in, so its canonical JSON is a stable identity (the config
hash) and ``to_yaml`` round-trips losslessly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .core import (Hamiltonian, Model, TraitGrid, build_grid, function_from_spec, kernel_from_spec,
                   make_model)
from .errors import ConfigError

DEFAULTS: dict[str, dict[str, Any]] = {
    "grid": {"log_K": None, "K": None, "delta": None, "window": None},
    "rates": {"birth": None, "death": None, "p": None, "bbar": None, "dbar": None},
    "kernel": {"kind": "gaussian", "tail_tol": 1e-12},
    "initial": {"u0": None, "n0": None, "mode": "poisson"},
    "regime": {"expect": None, "a": None},
    "run": {"t_end": 1.0, "observation_times": None, "R": 1, "base_seed": 0, "boundary": "absorb",
            "method": "exact", "dt_leap": None, "leap_bound": 0.05, "cap": 10**9, "window": None,
            "store": None},
    "mean": {"t_end": None, "t_eval": None, "exponent_boundary": "truncate", "moments": False},
    "hj": {"window": None, "dx": 1e-3, "t_end": 1.0, "t_eval": None, "scheme": "local-upwind",
           "cross_validate": False, "dx_ladder": [4e-3, 2e-3, 1e-3], "ref_tol": 1e-2, "h_hat": 0.25,
           "compact": None},
    "compare": {"log_K": None, "t": 1.0, "eta": 0.15, "R": 100, "survival": [], "extinction": [],
                "band_tol": None, "T": 0.5, "D": 0.5, "window": None, "n_times": 11},
    "sweep": {"log_K": [], "compact": [-0.5, 0.5], "t": 1.0},
    "outputs": {"dir": "out", "formats": ["csv", "jsonl"]},
}
REQUIRED_SECTIONS = ("grid", "rates", "kernel")


def _plain(obj):
    """Convert tuples and numpy scalars so the mapping is JSON/YAML friendly."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def normalize(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for sec in REQUIRED_SECTIONS:
        if sec not in raw:
            raise ConfigError(f"missing required section [{sec}]")
    out = {}
    for sec, defaults in DEFAULTS.items():
        given = raw.get(sec) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"section [{sec}] must be a mapping")
        if sec not in ("kernel",):
            extra = set(given) - set(defaults)
            if extra:
                raise ConfigError(f"unknown keys in [{sec}]: {sorted(extra)}")
        merged = copy.deepcopy(defaults)
        merged.update(copy.deepcopy(given))
        out[sec] = merged
    g = out["grid"]
    if (g["K"] is None) == (g["log_K"] is None):
        raise ConfigError("[grid] needs exactly one of K or log_K")
    if g["K"] is not None:
        g["log_K"], g["K"] = math.log(float(g["K"])), None
    g["log_K"] = float(g["log_K"])
    if g["window"] is None or len(g["window"]) != 2:
        raise ConfigError("[grid] window must be [x_min, x_max]")
    r = out["rates"]
    for key in ("birth", "death", "p"):
        if r[key] is None:
            raise ConfigError(f"[rates] {key} is required")
    if out["run"]["boundary"] not in ("absorb", "strict"):
        raise ConfigError("[run] boundary must be 'absorb' or 'strict'")
    if out["initial"]["mode"] not in ("poisson", "deterministic"):
        raise ConfigError("[initial] mode must be 'poisson' or 'deterministic'")
    if out["regime"]["expect"] not in (None, "subcritical", "supercritical"):
        raise ConfigError("[regime] expect must be 'subcritical' or 'supercritical'")
    return _plain(out)


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return cls(normalize(raw))

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def with_updates(self, section: str, **values) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        d[section].update(values)
        return ExperimentConfig.from_dict(d)

    # ---- model construction -------------------------------------------------

    def grid(self, log_K: float | None = None, window=None) -> TraitGrid:
        g = self["grid"]
        lk = g["log_K"] if log_K is None else float(log_K)
        return build_grid(window or g["window"], log_K=lk, delta=g["delta"])

    def hamiltonian(self) -> Hamiltonian:
        r = self["rates"]
        return Hamiltonian(function_from_spec(r["birth"]), function_from_spec(r["death"]), float(r["p"]),
                           self.kernel())

    def kernel(self):
        return kernel_from_spec(self["kernel"])

    def model(self, log_K: float | None = None, window=None) -> Model:
        r = self["rates"]
        return make_model(self.grid(log_K, window), function_from_spec(r["birth"]),
                          function_from_spec(r["death"]), float(r["p"]), self.kernel(),
                          tail_tol=float(self["kernel"]["tail_tol"]), boundary=self["run"]["boundary"],
                          bbar=r["bbar"], dbar=r["dbar"])

    def u0_function(self):
        spec = self["initial"]["u0"]
        return None if spec is None else function_from_spec(spec)

    def u0_samples(self, grid: TraitGrid) -> np.ndarray:
        f = self.u0_function()
        if f is not None:
            return np.asarray(f(grid.x), float) * np.ones(grid.size)
        with np.errstate(divide="ignore"):
            return np.log(self.initial_means(grid)) / grid.log_K

    def initial_means(self, grid: TraitGrid) -> np.ndarray:
        ini = self["initial"]
        if ini["n0"] is not None:
            spec = ini["n0"]
            if isinstance(spec, list):
                vals = np.asarray(spec, float)
                if vals.shape != (grid.size,):
                    raise ConfigError(f"[initial] n0 list needs {grid.size} entries")
                return vals
            return np.asarray(function_from_spec(spec)(grid.x), float) * np.ones(grid.size)
        f = self.u0_function()
        if f is None:
            raise ConfigError("[initial] needs u0 or n0")
        return np.exp(grid.log_K * np.asarray(f(grid.x), float)) * np.ones(grid.size)

    def observation_times(self) -> np.ndarray:
        run = self["run"]
        obs = run["observation_times"]
        return np.array([0.0, float(run["t_end"])]) if obs is None else np.asarray(obs, float)

    def setup(self, log_K: float):
        """Model and initial means for a given ``ln K`` (used by K-ladder experiments)."""
        m = self.model(log_K)
        return m, self.initial_means(m.grid)


def shipped_configs() -> dict[str, str]:
    """Name -> YAML text of the configs bundled with the package."""
    root = resources.files("traitbranch") / "configs"
    return {p.name.removesuffix(".yaml"): p.read_text() for p in root.iterdir() if p.name.endswith(".yaml")}


def load_shipped(name: str) -> ExperimentConfig:
    texts = shipped_configs()
    if name not in texts:
        raise ConfigError(f"no shipped config {name!r}; available: {sorted(texts)}")
    return ExperimentConfig.from_yaml(texts[name])
