"""Formation-size sweeps, closed-form predictions, fits and Monte-Carlo checks."""

from __future__ import annotations

import enum
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import ClosedFormUnavailable, DegenerateData, PlatoonError, SpecError, UnstableDiscretization
from .homotopy import HomotopySettings, optimal_nonsymmetric_gain
from .lyapunov import PerformanceReport, performance
from .model import ClosedLoopSystem, FormationSpec, StateWeight, StructuredGain, assemble
from .symmetric import optimal_symmetric_gain

log = logging.getLogger(__name__)

THREADS_ENV = "PLATOON_H2_THREADS"


class PenaltyKind(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    SQRT = "sqrt"


@dataclass(frozen=True)
class PenaltyRule:
    """Control penalty as a function of formation size: ``c``, ``cN`` or ``c sqrt(N)``."""

    kind: PenaltyKind = PenaltyKind.CONSTANT
    value: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PenaltyKind(self.kind))
        if not self.value > 0:
            raise SpecError("penalty coefficient must be positive")

    def r(self, n: int) -> float:
        if self.kind is PenaltyKind.CONSTANT:
            return float(self.value)
        if self.kind is PenaltyKind.LINEAR:
            return float(self.value * n)
        return float(self.value * math.sqrt(n))

    def __str__(self):
        return f"{self.kind.value}:{self.value!r}"

    @classmethod
    def parse(cls, text: str) -> "PenaltyRule":
        try:
            kind, value = text.split(":")
            return cls(PenaltyKind(kind.strip().lower()), float(value))
        except ValueError as exc:
            raise SpecError(f"bad penalty rule {text!r}; expected constant:v, linear:c or sqrt:c") from exc


class FamilyKind(str, enum.Enum):
    UNIFORM_SYMMETRIC = "uniform-symmetric"
    LOOK_AHEAD = "look-ahead"
    OPTIMAL_SYMMETRIC = "optimal-symmetric"
    OPTIMAL_NONSYMMETRIC = "optimal-nonsymmetric"


@dataclass(frozen=True)
class ControllerFamily:
    kind: FamilyKind
    alpha: float = 1.0
    beta: Optional[float] = None
    penalty: PenaltyRule = PenaltyRule()

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind(self.kind))
        if not self.alpha > 0:
            raise SpecError("alpha must be positive")
        if self.beta is not None and not self.beta > 0:
            raise SpecError("beta must be positive")

    @property
    def name(self) -> str:
        return self.kind.value

    def velocity_gain(self, spec: FormationSpec) -> float:
        if self.beta is not None:
            return self.beta
        if spec.is_double and self.kind is FamilyKind.LOOK_AHEAD:
            raise SpecError("double-integrator look-ahead requires beta")
        return 3.0

    def spec_for(self, template: FormationSpec, n: int) -> FormationSpec:
        return template.with_(n_vehicles=n, control_penalty_r=self.penalty.r(n))

    def design(self, spec: FormationSpec, settings: Optional[HomotopySettings] = None) -> StructuredGain:
        kind = self.kind
        if kind is FamilyKind.UNIFORM_SYMMETRIC:
            return StructuredGain.uniform(spec, self.alpha, self.velocity_gain(spec))
        if kind is FamilyKind.LOOK_AHEAD:
            return StructuredGain.look_ahead(spec, self.alpha, self.velocity_gain(spec))
        if kind is FamilyKind.OPTIMAL_SYMMETRIC:
            if spec.is_double:
                raise SpecError("optimal symmetric design is available for the single integrator only")
            return optimal_symmetric_gain(spec)
        if settings is None:
            settings = HomotopySettings(alpha=self.alpha, beta=self.velocity_gain(spec))
        return optimal_nonsymmetric_gain(spec, None, settings)


# ---------------------------------------------------------------------------
# closed forms


def _report(spec, pi_g, pi_l, pi_ctr) -> PerformanceReport:
    # J for Q = Q_g: trace(L (Q_g + r (FC)^T FC)) = N (pi_g + r pi_ctr)
    n = spec.n
    return PerformanceReport(pi_g, pi_l, pi_ctr, n * (pi_g + spec.r * pi_ctr), n)


def look_ahead_lnn(n, alpha: float = 1.0):
    """Diagonal of the controllability Gramian for ``-alpha C_f``, ``n = 1..N``."""
    n = np.asarray(n, dtype=float)
    return np.exp(gammaln(n + 0.5) - gammaln(n)) / (alpha * math.sqrt(math.pi))


def _critically_damped_moments(n_max: int, alpha: float, beta: float):
    """Cross moments of the impulse responses of a critically damped chain.

    With ``beta^2 = 4 alpha`` the transfer from ``d_m`` to ``p_n`` is
    ``alpha^(k-1) / (s + c)^(2k)``, ``k = n - m + 1``, ``c = beta/2``.
    Returns functions giving ``int h_k h_j``, ``int h_k' h_j'`` and
    ``int h_k h_j'`` for arrays of ``k`` and ``j``.
    """
    c = beta / 2.0
    lc2 = math.log(2.0 * c)
    la = math.log(alpha)

    def lf(x):  # log factorial
        return gammaln(np.asarray(x, dtype=float) + 1.0)

    def pp(k, j):
        e = 2 * k + 2 * j - 2
        return np.exp((k + j - 2) * la + lf(e) - lf(2 * k - 1) - lf(2 * j - 1) - (e + 1) * lc2)

    def vv(k, j):
        base = (k + j - 2) * la
        e0 = 2 * k + 2 * j - 4
        t0 = np.exp(base + lf(e0) - lf(2 * k - 2) - lf(2 * j - 2) - (e0 + 1) * lc2)
        e1 = e0 + 1
        t1 = c * np.exp(base + lf(e1) - lf(2 * k - 2) - lf(2 * j - 1) - (e1 + 1) * lc2)
        t2 = c * np.exp(base + lf(e1) - lf(2 * k - 1) - lf(2 * j - 2) - (e1 + 1) * lc2)
        e2 = e0 + 2
        t3 = c * c * np.exp(base + lf(e2) - lf(2 * k - 1) - lf(2 * j - 1) - (e2 + 1) * lc2)
        return t0 - t1 - t2 + t3

    def pv(k, j):
        base = (k + j - 2) * la - lf(2 * k - 1)
        e1 = 2 * k + 2 * j - 3
        t0 = np.exp(base + lf(e1) - lf(2 * j - 2) - (e1 + 1) * lc2)
        t1 = c * np.exp(base + lf(e1 + 1) - lf(2 * j - 1) - (e1 + 2) * lc2)
        return t0 - t1

    return pp, vv, pv


def look_ahead_double_performance(spec: FormationSpec, alpha: float, beta: float) -> PerformanceReport:
    """Closed forms for ``K = [alpha C_f, beta I]`` with ``beta^2 = 4 alpha``.

    At ``alpha = 1/4, beta = 1`` the global measure reduces to the Gamma sum
    ``(1/sqrt(pi)) sum_n (N-n+1)/(2N Gamma(2n)) (8 Gamma(2n-1/2) + Gamma(2n-3/2))``.
    """
    if not math.isclose(beta * beta, 4.0 * alpha, rel_tol=1e-12):
        raise ClosedFormUnavailable("double look-ahead closed form needs beta^2 = 4 alpha")
    n = spec.n
    pp, vv, pv = _critically_damped_moments(n, alpha, beta)
    k = np.arange(1, n + 1, dtype=float)
    w = n - k + 1  # number of vehicles whose response includes lag k
    hpp, hvv = pp(k, k), vv(k, k)
    trace_pp = float(np.sum(w * hpp))
    trace_vv = float(np.sum(w * hvv))
    # sum_n L_pp[n, n+1] and sum_n L_pv[n, n+1]
    k1 = k[:-1]
    w1 = n - k1
    off_pp = float(np.sum(w1 * pp(k1, k1 + 1)))
    off_pv = float(np.sum(w1 * pv(k1, k1 + 1)))
    # L_pp[N, N] enters the control term through the missing follower edge
    diag_pp = np.cumsum(hpp)
    pi_g = (trace_pp + trace_vv) / n
    pi_l = (2.0 * trace_pp - 2.0 * off_pp + trace_vv) / n
    # u_n = -alpha (p_n - p_{n-1}) - beta v_n, with E[p_n v_n] = 0
    rel = 2.0 * trace_pp - diag_pp[-1] - 2.0 * off_pp
    pi_ctr = (alpha**2 * rel - 2.0 * alpha * beta * off_pv + beta**2 * trace_vv) / n
    return _report(spec, pi_g, pi_l, pi_ctr)


def look_ahead_double_pi_g_gamma_sum(n: int) -> float:
    """Global measure of the ``alpha = 1/4, beta = 1`` look-ahead as a Gamma sum."""
    k = np.arange(1, n + 1, dtype=float)
    terms = (n - k + 1) / (2.0 * n) * (
        8.0 * np.exp(gammaln(2 * k - 0.5) - gammaln(2 * k)) + np.exp(gammaln(2 * k - 1.5) - gammaln(2 * k))
    )
    return float(terms.sum() / math.sqrt(math.pi))


def closed_form_performance(family: ControllerFamily, spec: FormationSpec) -> PerformanceReport:
    n = spec.n
    a = family.alpha
    kind = family.kind
    if kind is FamilyKind.UNIFORM_SYMMETRIC:
        if not spec.is_double:
            if spec.has_follower:
                return _report(spec, (n + 2) / (12 * a), 1 / (2 * a), a)
            return _report(spec, (n + 1) / (4 * a), 1 / a, a * (2 * n - 1) / (2 * n))
        b = family.velocity_gain(spec)
        if spec.has_follower:
            return _report(spec, (n + 2) / (12 * a * b) + 1 / (2 * b), 1 / (2 * a * b) + 1 / (2 * b), a / b + b / 2)
        return _report(
            spec,
            (n + 1) / (4 * a * b) + 1 / (2 * b),
            1 / (a * b) + 1 / (2 * b),
            a * (2 * n - 1) / (2 * b * n) + b / 2,
        )
    if kind is FamilyKind.LOOK_AHEAD:
        if spec.is_double:
            return look_ahead_double_performance(spec, a, family.velocity_gain(spec))
        # L scales as 1/alpha
        pi_g = 2.0 * math.exp(gammaln(n + 1.5) - gammaln(n + 1)) / (3.0 * math.sqrt(math.pi) * a)
        l_nn = float(look_ahead_lnn(n, a))
        return _report(spec, pi_g, 1.0 / a, a - a * a * l_nn / n)
    if kind is FamilyKind.OPTIMAL_SYMMETRIC and not spec.is_double and not spec.has_follower:
        r = spec.r
        m = np.arange(1, n, dtype=float)
        pi_g = math.sqrt(r) / (2 * n) * (math.sqrt(n) + float(np.sum(np.sqrt(2 * m))))
        # trace(T K^-1) = 2 gamma_N = 2 sum_n 1/k_n
        pi_l = math.sqrt(r) / n * (1 / math.sqrt(n) + float(np.sum(np.sqrt(2 / m))))
        return _report(spec, pi_g, pi_l, pi_g / r)
    raise ClosedFormUnavailable(f"no closed form for {family.name} ({spec.model.value}, follower={spec.has_follower})")


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRow:
    n: int
    r: float
    pi_g: float
    pi_l: float
    pi_ctr: float
    objective_j: float
    wall_time: float
    closed_form: Optional[PerformanceReport] = None
    error: Optional[str] = None


@dataclass
class SweepResult:
    family: ControllerFamily
    rows: List[SweepRow] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows if r.error is None], dtype=float)

    @property
    def n_values(self) -> np.ndarray:
        return self.column("n")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _sweep_row(family, n, template, settings) -> SweepRow:
    t0 = time.perf_counter()
    spec = family.spec_for(template, n)
    try:
        gain = family.design(spec, settings)
        rep = performance(assemble(spec, gain), spec)
    except PlatoonError as exc:
        log.warning("sweep %s N=%d failed: %s", family.name, n, exc)
        nan = float("nan")
        return SweepRow(n, spec.r, nan, nan, nan, nan, time.perf_counter() - t0, None, f"{type(exc).__name__}: {exc}")
    try:
        closed = closed_form_performance(family, spec)
    except ClosedFormUnavailable:
        closed = None
    return SweepRow(n, spec.r, rep.pi_g, rep.pi_l, rep.pi_ctr, rep.objective_j, time.perf_counter() - t0, closed)


def sweep(
    family: ControllerFamily,
    n_values: Sequence[int],
    spec_template: Optional[FormationSpec] = None,
    settings: Optional[HomotopySettings] = None,
    max_workers: Optional[int] = None,
) -> SweepResult:
    """Design and evaluate ``family`` for every formation size in ``n_values``."""
    ns = sorted({int(n) for n in n_values})
    if not ns or ns[0] < 1:
        raise SpecError("n_values must be nonempty with every entry >= 1")
    template = FormationSpec(ns[0]) if spec_template is None else spec_template
    workers = min(max_workers or _threads(), len(ns))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda n: _sweep_row(family, n, template, settings), ns))
    else:
        rows = [_sweep_row(family, n, template, settings) for n in ns]
    return SweepResult(family, sorted(rows, key=lambda r: r.n))


# ---------------------------------------------------------------------------
# fits


class FitModel(str, enum.Enum):
    POWER_PLUS_CONST = "power-plus-const"
    FREE_EXPONENT = "free-exponent"


@dataclass(frozen=True)
class FitResult:
    """``a N^p + b`` (fixed ``p``) or ``a N^p`` (fitted ``p``)."""

    model: FitModel
    a: float
    b: float
    exponent: float
    rms_residual: float

    def predict(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        return self.a * n**self.exponent + self.b


_MEASURES = {"g": "pi_g", "l": "pi_l", "ctr": "pi_ctr"}


def fit_power_law(n, y, model: FitModel, exponent: Optional[float] = None) -> FitResult:
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    model = FitModel(model)
    if n.size < 3:
        raise DegenerateData("need at least three points to fit")
    if np.all(n == n[0]):
        raise DegenerateData("all formation sizes are equal")
    if model is FitModel.POWER_PLUS_CONST:
        if exponent is None:
            raise SpecError("power-plus-const fit needs a fixed exponent")
        x = np.column_stack([n**exponent, np.ones_like(n)])
        (a, b), *_ = np.linalg.lstsq(x, y, rcond=None)
        p = float(exponent)
    else:
        if np.any(y <= 0):
            raise DegenerateData("free-exponent fit needs positive values")
        p, log_a = np.polyfit(np.log(n), np.log(y), 1)
        a, b = math.exp(log_a), 0.0
    fit = FitResult(model, float(a), float(b), float(p), 0.0)
    rms = float(np.sqrt(np.mean((fit.predict(n) - y) ** 2)))
    return FitResult(model, float(a), float(b), float(p), rms)


def fit_scaling(result: SweepResult, measure: str, model: FitModel, exponent: Optional[float] = None) -> FitResult:
    if measure not in _MEASURES:
        raise SpecError(f"measure must be one of {sorted(_MEASURES)}")
    return fit_power_law(result.column("n"), result.column(_MEASURES[measure]), model, exponent)


# ---------------------------------------------------------------------------
# Monte-Carlo cross-check


@dataclass(frozen=True)
class SimulationEstimate:
    pi_g: float
    pi_l: float
    pi_ctr: float
    se_g: float
    se_l: float
    se_ctr: float
    dt: float
    steps: int
    n_paths: int

    def as_report(self, spec: FormationSpec) -> PerformanceReport:
        return _report(spec, self.pi_g, self.pi_l, self.pi_ctr)


def default_dt(sys: ClosedLoopSystem) -> float:
    rate = float(np.abs(np.linalg.eigvals(sys.a_cl)).max())
    return min(1e-2, 1e-3 / rate) if rate > 0 else 1e-2


def simulate_variance(
    sys: ClosedLoopSystem,
    spec: FormationSpec,
    horizon: float = 200.0,
    dt: Optional[float] = None,
    seed: int = 0,
    n_paths: int = 32,
) -> SimulationEstimate:
    """Euler-Maruyama estimate of the steady-state variances behind pi_g, pi_l, pi_ctr.

    Averages run over the second half of the horizon; standard errors come
    from the spread of per-path averages, which are independent.
    """
    eig = np.linalg.eigvals(sys.a_cl)
    if eig.real.max() >= 0:
        raise UnstableDiscretization("closed loop is not asymptotically stable")
    dt = default_dt(sys) if dt is None else float(dt)
    if not dt > 0 or dt * np.abs(eig).max() >= 1.0:
        raise UnstableDiscretization(f"dt={dt:.3g} too large for spectral radius {np.abs(eig).max():.3g}")
    if n_paths < 2:
        raise SpecError("need at least two paths for standard errors")
    steps = int(math.ceil(horizon / dt))
    burn = steps // 2
    rng = np.random.default_rng(seed)
    n = spec.n
    step_map = np.eye(sys.a_cl.shape[0]) + dt * sys.a_cl.T  # row-vector convention
    noise_map = math.sqrt(dt) * sys.b1.T
    fc = sys.control_map.T
    qg = StateWeight.global_(spec).matrix
    ql = StateWeight.local(spec).matrix
    dim = sys.a_cl.shape[0]
    x = np.zeros((n_paths, dim))
    acc = np.zeros((3, n_paths))
    chunk = 1024
    buf = np.empty((chunk, n_paths, dim))
    done = 0
    while done < steps:
        m = min(chunk, steps - done)
        noise = rng.standard_normal((m, n_paths, sys.b1.shape[1])) @ noise_map
        for i in range(m):
            x = x @ step_map + noise[i]
            buf[i] = x
        keep = buf[max(0, burn - done) : m]
        if keep.shape[0]:
            acc[0] += ((keep @ qg) * keep).sum(axis=(0, 2))
            acc[1] += ((keep @ ql) * keep).sum(axis=(0, 2))
            acc[2] += np.square(keep @ fc).sum(axis=(0, 2))
        done += m
    per_path = acc / ((steps - burn) * n)
    est = per_path.mean(axis=1)
    se = per_path.std(axis=1, ddof=1) / math.sqrt(n_paths)
    return SimulationEstimate(*est, *se, dt, steps, n_paths)
