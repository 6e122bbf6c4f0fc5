"""Static model data: trait lattice, rate tables, mutation kernels, regime.

Everything here is immutable after construction.  Natural logarithms are
used throughout; ``log_K`` is the primary scale parameter because ``K``
itself overflows for the ladders of interest (``ln K = 28`` and beyond).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from .errors import ConfigError, KernelError, MeshConditionError, SaturationError

# exp() overflows just above this argument
MAX_EXP_ARG = math.log(np.finfo(float).max)
_INDEX_SLACK = 1e-9


# --------------------------------------------------------------------------
# Rate and initial-condition families
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, x):
        return np.full(np.shape(x), float(self.value)) if np.ndim(x) else float(self.value)


@dataclass(frozen=True)
class AffineClamped:
    intercept: float
    slope: float
    lo: float = 0.0
    hi: float = math.inf

    def __call__(self, x):
        return np.clip(self.intercept + self.slope * np.asarray(x, float), self.lo, self.hi)


@dataclass(frozen=True)
class GaussianBump:
    base: float
    amplitude: float
    center: float = 0.0
    width: float = 1.0

    def __call__(self, x):
        z = (np.asarray(x, float) - self.center) / self.width
        return self.base + self.amplitude * np.exp(-0.5 * z * z)


@dataclass(frozen=True)
class Tabulated:
    """Piecewise-linear interpolation of tabulated values, flat outside."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]

    def __post_init__(self):
        if len(self.xs) != len(self.ys) or len(self.xs) < 1:
            raise ConfigError("tabulated function needs matching, non-empty xs and ys")
        if np.any(np.diff(self.xs) <= 0):
            raise ConfigError("tabulated xs must be strictly increasing")

    def __call__(self, x):
        return np.interp(x, self.xs, self.ys)


@dataclass(frozen=True)
class Cone:
    """``level - slope * |x - center|``; a negative slope gives linear growth."""

    level: float
    slope: float
    center: float = 0.0

    def __call__(self, x):
        return self.level - self.slope * np.abs(np.asarray(x, float) - self.center)


@dataclass(frozen=True)
class Hyperbolic:
    """Smooth cone: ``level - slope * (sqrt(width^2 + x^2) - width)``."""

    level: float
    slope: float
    width: float = 1.0
    center: float = 0.0

    def __call__(self, x):
        z = np.asarray(x, float) - self.center
        return self.level - self.slope * (np.hypot(self.width, z) - self.width)


@dataclass(frozen=True)
class Quadratic:
    level: float
    curvature: float
    center: float = 0.0

    def __call__(self, x):
        z = np.asarray(x, float) - self.center
        return self.level - 0.5 * self.curvature * z * z


FUNCTION_KINDS: dict[str, type] = {
    "constant": Constant,
    "affine-clamped": AffineClamped,
    "gaussian-bump": GaussianBump,
    "table": Tabulated,
    "cone": Cone,
    "hyperbolic": Hyperbolic,
    "quadratic": Quadratic,
}


def function_from_spec(spec: dict | float) -> Callable:
    """Build a rate or initial-condition function from a config mapping."""
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in FUNCTION_KINDS:
        raise ConfigError(f"unknown function kind {kind!r}; expected one of {sorted(FUNCTION_KINDS)}")
    if kind == "table":
        return Tabulated(tuple(map(float, spec["xs"])), tuple(map(float, spec["ys"])))
    try:
        return FUNCTION_KINDS[kind](**spec)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind!r}: {exc}") from None


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------


class Kernel:
    """Symmetric mutation kernel ``G`` with unit mass.

    Subclasses supply ``density`` and, to pass the super-exponential decay
    check, an analytic ``tail_mass``.  ``mgf`` falls back to adaptive
    quadrature with tolerance ``quad_tol`` when no closed form exists.
    """

    quad_tol = 1e-11
    has_tail_bound = False

    def density(self, y):
        raise NotImplementedError

    def tail_mass(self, r: float) -> float:
        """Mass of ``{|y| > r}``."""
        raise KernelError(f"{type(self).__name__} declares no super-exponential tail bound")

    def _tilted(self, y: float, q: float) -> float:
        g = float(self.density(y))
        if g == 0.0:
            return 0.0
        return g * math.exp(min(q * y, MAX_EXP_ARG))

    def _quad(self, f) -> float:
        val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=0.0, epsrel=self.quad_tol, limit=200)
        if not math.isfinite(val):
            raise SaturationError("exponential moment quadrature diverged")
        return val

    def mgf(self, q: float) -> float:
        return self._quad(lambda y: self._tilted(y, q))

    def mgf_prime(self, q: float) -> float:
        return self._quad(lambda y: y * self._tilted(y, q))

    def mgf_array(self, q) -> np.ndarray:
        return np.vectorize(self.mgf, otypes=[float])(q)

    def mgf_prime_array(self, q) -> np.ndarray:
        return np.vectorize(self.mgf_prime, otypes=[float])(q)

    def abs_exp_moment(self, L: float) -> float:
        """``int G(y) exp(L |y|) dy``."""
        return self._quad(lambda y: self._tilted(abs(y), L) if y != 0 else float(self.density(0.0)))

    @property
    def total_variation(self) -> float:
        # unimodal symmetric density
        return 2.0 * float(self.density(0.0))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianKernel(Kernel):
    sigma: float = 1.0
    has_tail_bound = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("Gaussian kernel needs sigma > 0")

    def density(self, y):
        z = np.asarray(y, float) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))

    def tail_mass(self, r: float) -> float:
        return float(special.erfc(max(r, 0.0) / (self.sigma * math.sqrt(2.0))))

    def _exponent(self, q: float) -> float:
        arg = 0.5 * (q * self.sigma) ** 2
        if arg > MAX_EXP_ARG:
            raise SaturationError(f"q^2 sigma^2 / 2 = {arg:.4g} exceeds exp range at q={q}")
        return arg

    def mgf(self, q: float) -> float:
        return math.exp(self._exponent(q))

    def mgf_prime(self, q: float) -> float:
        return q * self.sigma**2 * math.exp(self._exponent(q))

    def mgf_array(self, q) -> np.ndarray:
        return np.exp(self._exponent_array(q))

    def mgf_prime_array(self, q) -> np.ndarray:
        q = np.asarray(q, float)
        return q * self.sigma**2 * np.exp(self._exponent_array(q))

    def _exponent_array(self, q) -> np.ndarray:
        arg = 0.5 * (np.asarray(q, float) * self.sigma) ** 2
        if np.any(arg > MAX_EXP_ARG):
            raise SaturationError(f"q^2 sigma^2 / 2 up to {np.max(arg):.4g} exceeds exp range")
        return arg

    def abs_exp_moment(self, L: float) -> float:
        return 2.0 * math.exp(self._exponent(L)) * float(special.ndtr(L * self.sigma))

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "sigma": self.sigma}


@dataclass(frozen=True)
class ExpSquareKernel(Kernel):
    """Two-sided exponential times Gaussian: ``G ~ exp(-rate |y| - y^2 / (2 scale^2))``."""

    rate: float = 1.0
    scale: float = 1.0
    has_tail_bound = True

    def __post_init__(self):
        if self.rate < 0 or not self.scale > 0:
            raise ConfigError("exp-square kernel needs rate >= 0 and scale > 0")

    def _half(self, c: float) -> float:
        # int_0^inf exp(-c y - y^2/(2 s^2)) dy
        x = c * self.scale / math.sqrt(2.0)
        if x < 0 and x * x > MAX_EXP_ARG - 2:
            raise SaturationError(f"exponential moment saturates at effective drift {c}")
        return self.scale * math.sqrt(math.pi / 2.0) * float(special.erfcx(x))

    def _first(self, c: float) -> float:
        # int_0^inf y exp(-c y - y^2/(2 s^2)) dy
        return self.scale**2 * (1.0 - c * self._half(c))

    @property
    def _norm(self) -> float:
        return 2.0 * self._half(self.rate)

    def density(self, y):
        y = np.abs(np.asarray(y, float))
        return np.exp(-self.rate * y - 0.5 * (y / self.scale) ** 2) / self._norm

    def tail_mass(self, r: float) -> float:
        r = max(r, 0.0)
        log_pref = -self.rate * r - 0.5 * (r / self.scale) ** 2
        return 2.0 * math.exp(log_pref) * self._half(self.rate + r / self.scale**2) / self._norm

    def mgf(self, q: float) -> float:
        return (self._half(self.rate - q) + self._half(self.rate + q)) / self._norm

    def mgf_prime(self, q: float) -> float:
        return (self._first(self.rate - q) - self._first(self.rate + q)) / self._norm

    def abs_exp_moment(self, L: float) -> float:
        return 2.0 * self._half(self.rate - L) / self._norm

    def to_dict(self) -> dict:
        return {"kind": "exp-square", "rate": self.rate, "scale": self.scale}


def kernel_from_spec(spec: dict) -> Kernel:
    spec = dict(spec)
    kind = spec.pop("kind", "gaussian")
    spec.pop("tail_tol", None)
    if kind == "gaussian":
        return GaussianKernel(**spec)
    if kind == "exp-square":
        return ExpSquareKernel(**spec)
    raise KernelError(f"unknown kernel kind {kind!r}; built-ins are 'gaussian' and 'exp-square'")


# --------------------------------------------------------------------------
# Grid, rates, discrete kernel
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TraitGrid:
    log_K: float
    delta: float
    i_min: int
    i_max: int

    @property
    def K(self) -> float:
        return math.exp(self.log_K) if self.log_K < MAX_EXP_ARG else math.inf

    @property
    def h(self) -> float:
        return self.delta * self.log_K

    @property
    def size(self) -> int:
        return self.i_max - self.i_min + 1

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.i_min, self.i_max + 1)

    @property
    def x(self) -> np.ndarray:
        return self.indices * self.delta

    def position(self, i: int) -> int:
        """Array position of lattice index ``i``."""
        if not self.i_min <= i <= self.i_max:
            raise IndexError(f"site {i} outside window [{self.i_min}, {self.i_max}]")
        return i - self.i_min

    def sites_in(self, a: float, b: float) -> np.ndarray:
        """Array positions of sites with trait in ``[a, b]``."""
        x = self.x
        return np.nonzero((x >= a - _INDEX_SLACK * self.delta) & (x <= b + _INDEX_SLACK * self.delta))[0]

    def subgrid(self, i_lo: int, i_hi: int) -> "TraitGrid":
        return TraitGrid(self.log_K, self.delta, max(i_lo, self.i_min), min(i_hi, self.i_max))


def default_mesh(log_K: float) -> float:
    """delta_K = (ln K)^-2."""
    return log_K**-2


def build_grid(
    window: Sequence[float],
    *,
    K: float | None = None,
    log_K: float | None = None,
    delta: float | Callable[[float], float] | None = None,
) -> TraitGrid:
    """Lattice ``{i delta_K}`` covering ``window``.

    ``delta`` may be a number, a rule ``log_K -> delta``, or None for the
    default ``(ln K)^-2``.
    """
    if (K is None) == (log_K is None):
        raise ConfigError("give exactly one of K or log_K")
    if log_K is None:
        if not K >= 2:
            raise ConfigError(f"K must be >= 2, got {K}")
        log_K = math.log(K)
    if not log_K >= math.log(2):
        raise ConfigError(f"ln K must be >= ln 2, got {log_K}")
    x_min, x_max = map(float, window)
    if not (math.isfinite(x_min) and math.isfinite(x_max)) or not x_min < x_max:
        raise ConfigError(f"window must be finite with x_min < x_max, got {window}")
    if delta is None:
        d = default_mesh(log_K)
    elif callable(delta):
        d = float(delta(log_K))
    else:
        d = float(delta)
    if not d > 0:
        raise ConfigError(f"mesh must be positive, got {d}")
    if d >= 1.0 / log_K:
        raise MeshConditionError(f"delta_K = {d:.6g} >= 1/ln K = {1.0 / log_K:.6g}")
    i_min = math.ceil(x_min / d - _INDEX_SLACK)
    i_max = math.floor(x_max / d + _INDEX_SLACK)
    if i_min > 0 or i_max < 0:
        raise ConfigError(f"window {window} must contain the trait 0")
    if i_max < i_min:
        raise ConfigError(f"window {window} contains no lattice site")
    return TraitGrid(float(log_K), d, i_min, i_max)


@dataclass(frozen=True)
class RateTables:
    b: np.ndarray
    d: np.ndarray
    p: float
    bbar: float
    dbar: float

    @property
    def net(self) -> np.ndarray:
        return self.b - self.d


def tabulate_rates(grid: TraitGrid, birth: Callable, death: Callable, p: float,
                   bbar: float | None = None, dbar: float | None = None) -> RateTables:
    """Evaluate rate functions on the lattice, clamped to ``[0, bar]``."""
    # p = 0 is accepted for decoupled test cases; the A1 check flags it
    if not p >= 0:
        raise ConfigError(f"mutation rate p must be >= 0, got {p}")
    x = grid.x
    b = np.clip(np.asarray(birth(x), float) * np.ones_like(x), 0.0, None)
    d = np.clip(np.asarray(death(x), float) * np.ones_like(x), 0.0, None)
    bbar = float(b.max()) if bbar is None else float(bbar)
    dbar = float(d.max()) if dbar is None else float(dbar)
    b = np.minimum(b, bbar)
    d = np.minimum(d, dbar)
    b.setflags(write=False)
    d.setflags(write=False)
    return RateTables(b, d, float(p), bbar, dbar)


@dataclass(frozen=True)
class DiscreteKernel:
    """Per-offset mutation rates ``w_l = p h G(l h)`` for ``|l| <= L_max``.

    An individual at site ``j`` produces a mutant at ``j + l`` at rate ``w_l``.
    """

    weights: np.ndarray
    L_max: int
    tail_mass: float
    h: float
    p: float
    riemann_tol: float

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.L_max, self.L_max + 1)

    @property
    def total_rate(self) -> float:
        return float(self.weights.sum())

    @property
    def riemann_defect(self) -> float:
        return self.total_rate - self.p

    def weight(self, l: int) -> float:
        return float(self.weights[l + self.L_max]) if abs(l) <= self.L_max else 0.0


def discretize_kernel(kernel: Kernel, h: float, p: float, tail_tol: float = 1e-12) -> DiscreteKernel:
    """Truncate ``p h G(l h)`` at the smallest radius whose discarded cells
    ``|y| > (L + 1/2) h`` carry analytic mass at most ``tail_tol``."""
    if not getattr(kernel, "has_tail_bound", False):
        raise KernelError(f"{type(kernel).__name__} declares no super-exponential tail bound")
    if not tail_tol > 0:
        raise ConfigError("tail_tol must be positive")
    L = 0
    while kernel.tail_mass((L + 0.5) * h) > tail_tol:
        L += 1
        if L > 10_000_000:
            raise KernelError("kernel truncation radius exceeds 10^7 sites")
    l = np.arange(-L, L + 1)
    w = p * h * np.asarray(kernel.density(l * h), float)
    if np.any(w < 0):
        raise KernelError("kernel density must be nonnegative")
    w.setflags(write=False)
    tol = p * kernel.total_variation * h
    return DiscreteKernel(w, L, float(kernel.tail_mass((L + 0.5) * h)), float(h), float(p), tol)


# --------------------------------------------------------------------------
# Hamiltonian and model bundle
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Hamiltonian:
    """``H(x, q) = b(x) - d(x) + p M_G(q)``."""

    birth: Callable
    death: Callable
    p: float
    kernel: Kernel

    def net(self, x):
        return np.asarray(self.birth(x), float) - np.asarray(self.death(x), float)

    def __call__(self, x, q):
        m = self.kernel.mgf(float(q)) if np.ndim(q) == 0 else self.kernel.mgf_array(q)
        return self.net(x) + self.p * m

    def dq(self, x, q):
        m = self.kernel.mgf_prime(float(q)) if np.ndim(q) == 0 else self.kernel.mgf_prime_array(q)
        return np.zeros(np.shape(x)) + self.p * m


@dataclass(frozen=True)
class Model:
    grid: TraitGrid
    birth: Callable
    death: Callable
    kernel: Kernel
    rates: RateTables
    dkernel: DiscreteKernel
    boundary: str = "absorb"

    @property
    def p(self) -> float:
        return self.rates.p

    @property
    def log_K(self) -> float:
        return self.grid.log_K

    @property
    def mu(self) -> float:
        return self.dkernel.total_rate

    @property
    def hamiltonian(self) -> Hamiltonian:
        return Hamiltonian(self.birth, self.death, self.p, self.kernel)

    def restrict(self, a: float, b: float) -> "Model":
        """Localized model on the sites with trait in ``[a, b]``."""
        pos = self.grid.sites_in(a, b)
        if pos.size == 0:
            raise ConfigError(f"restriction window [{a}, {b}] contains no site")
        g = TraitGrid(self.grid.log_K, self.grid.delta,
                      int(self.grid.i_min + pos[0]), int(self.grid.i_min + pos[-1]))
        rates = RateTables(self.rates.b[pos[0]:pos[-1] + 1], self.rates.d[pos[0]:pos[-1] + 1],
                           self.rates.p, self.rates.bbar, self.rates.dbar)
        return Model(g, self.birth, self.death, self.kernel, rates, self.dkernel, self.boundary)


def make_model(grid: TraitGrid, birth: Callable, death: Callable, p: float, kernel: Kernel,
               *, tail_tol: float = 1e-12, boundary: str = "absorb",
               bbar: float | None = None, dbar: float | None = None) -> Model:
    if boundary not in ("absorb", "strict"):
        raise ConfigError(f"boundary policy must be 'absorb' or 'strict', got {boundary!r}")
    rates = tabulate_rates(grid, birth, death, p, bbar, dbar)
    dk = discretize_kernel(kernel, grid.h, p, tail_tol)
    return Model(grid, birth, death, kernel, rates, dk, boundary)


def hamiltonian(model: Model, x, q):
    return model.hamiltonian(x, q)


# --------------------------------------------------------------------------
# Regime and assumption checks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Regime:
    tag: str  # "subcritical" | "supercritical" | "mixed"
    alpha: float


def growth_dominates(rates: RateTables) -> bool:
    """``b_i >= d_i`` at every site (holds for critical models too)."""
    return bool(np.all(rates.b >= rates.d))


def classify_regime(rates: RateTables) -> Regime:
    alpha = float(np.max(rates.net)) + rates.p
    if alpha <= 0:
        tag = "subcritical"
    elif growth_dominates(rates):
        tag = "supercritical"
    else:
        tag = "mixed"
    return Regime(tag, alpha)


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    values: dict = field(default_factory=dict)
    detail: str = ""


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple[AssumptionCheck, ...]
    regime: Regime

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def constants(self) -> dict:
        out = {}
        for c in self.checks:
            out.update(c.values)
        return out

    def passed(self, names: Sequence[str] | None = None) -> bool:
        return all(c.passed for c in self.checks if names is None or c.name in names)

    def to_jsonl(self) -> str:
        rows = [{"check": c.name, "passed": c.passed, **c.values, "detail": c.detail} for c in self.checks]
        rows.append({"check": "regime", "tag": self.regime.tag, "alpha": self.regime.alpha})
        return "\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n"


REQUIRED = {
    "subcritical": ("A1-rates", "A2-kernel", "A3-lipschitz", "A5-mesh", "B1-affine-decay", "B4-subcritical"),
    "supercritical": ("A1-rates", "A2-kernel", "A3-lipschitz", "A5-mesh", "C1-linear-growth",
                      "C2-large-initial", "C3-supercritical"),
}


def verify_assumptions(model: Model, u0_samples: np.ndarray, *, K_exponent: float | None = None) -> AssumptionReport:
    """Measure the constants of the standing assumptions on the window.

    ``u0_samples`` are the initial exponents at every lattice site.
    """
    g = model.grid
    u0 = np.asarray(u0_samples, float)
    if u0.shape != (g.size,):
        raise ConfigError(f"u0_samples must have one value per site ({g.size}), got {u0.shape}")
    x = g.x
    r = model.rates
    checks = []

    ok_rates = bool(np.all((r.b >= 0) & (r.b <= r.bbar) & (r.d >= 0) & (r.d <= r.dbar)) and r.p > 0)
    checks.append(AssumptionCheck("A1-rates", ok_rates, {"bbar": r.bbar, "dbar": r.dbar, "p": r.p}))

    dk = model.dkernel
    checks.append(AssumptionCheck(
        "A2-kernel", dk.tail_mass <= 1.0, {"L_max": dk.L_max, "tail_mass": dk.tail_mass,
                                           "riemann_defect": dk.riemann_defect, "riemann_tol": dk.riemann_tol},
        "analytic tail bound declared"))

    L = float(np.max(np.abs(np.diff(u0))) / g.delta) if g.size > 1 else 0.0
    checks.append(AssumptionCheck("A3-lipschitz", math.isfinite(L), {"L": L}))

    checks.append(AssumptionCheck(
        "A5-mesh", g.delta < 1.0 / g.log_K, {"delta_K": g.delta, "h_K": g.h, "inv_log_K": 1.0 / g.log_K},
        "default rule (ln K)^-2" if math.isclose(g.delta, default_mesh(g.log_K)) else "user mesh"))

    # B-1: cone through the global maximum at x = 0
    ax = np.abs(x)
    off = ax > 0
    top = float(u0.max())
    A1 = float(np.min((top - u0[off]) / ax[off])) if off.any() else 0.0
    A2 = float(np.max(u0 + A1 * ax))
    checks.append(AssumptionCheck("B1-affine-decay", A1 > 0, {"A_1": A1, "A_2": A2}))

    regime = classify_regime(r)
    checks.append(AssumptionCheck("B4-subcritical", regime.alpha <= 0, {"alpha": regime.alpha}))

    # C-1: smallest growth slope above the value at the site nearest 0
    u_center = float(u0[np.argmin(ax)])
    A = float(max(0.0, np.max((u0[off] - u_center) / ax[off]))) if off.any() else 0.0
    B = float(np.max(u0 - A * ax))
    checks.append(AssumptionCheck("C1-linear-growth", True, {"A": A, "B": B, "C_A": 2 * A + 1}))

    a = float(u0.min())
    if K_exponent is not None:
        a_ok = a >= K_exponent
        detail = f"required a >= {K_exponent}"
    else:
        a_ok = a > 0
        detail = ""
    checks.append(AssumptionCheck("C2-large-initial", a_ok, {"a": a}, detail))
    checks.append(AssumptionCheck("C3-supercritical", growth_dominates(r), {}))
    return AssumptionReport(tuple(checks), regime)
