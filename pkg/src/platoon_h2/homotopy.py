"""Optimal non-symmetric structured gains by homotopy continuation.

The state weight is deformed along ``Q(eps) = Q0 + eps (Qd - Q0)``.  At
``eps = 0`` a spatially uniform gain is inversely optimal for ``Q0``; the
first-order correction ``F1`` comes from the perturbation cascade; and
Newton iterations track the optimum as ``eps`` increases to 1.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import (
    HomotopyError,
    LostStability,
    MaxItersExceeded,
    NonHurwitzError,
    SingularRestriction,
    SpecError,
    StabilityMarginViolated,
)
from .lyapunov import LyapunovSolver
from .model import (
    STABILITY_TOL,
    FormationSpec,
    StateWeight,
    StructuredGain,
    free_mask,
    open_loop,
    position_gain_matrix,
)

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4


class DirectionMode(str, enum.Enum):
    FULL_NEWTON = "full_newton"
    QUASI_NEWTON = "quasi_newton"


def default_schedule() -> np.ndarray:
    return np.logspace(-4, 0, 20)


@dataclass(frozen=True)
class HomotopySettings:
    epsilon_schedule: np.ndarray = field(default_factory=default_schedule)
    # None: 1e-6 * max(1, J) at each Newton solve
    grad_tol: Optional[float] = None
    max_newton_iters: int = 200
    direction_mode: DirectionMode = DirectionMode.FULL_NEWTON
    alpha: float = 1.0
    beta: float = 3.0

    def __post_init__(self):
        sched = np.array(self.epsilon_schedule, dtype=float).reshape(-1)
        if sched.size == 0 or sched[0] <= 0 or np.any(np.diff(sched) <= 0) or sched[-1] != 1.0:
            raise SpecError("epsilon schedule must increase strictly within (0, 1] and end at 1")
        sched.setflags(write=False)
        object.__setattr__(self, "epsilon_schedule", sched)
        object.__setattr__(self, "direction_mode", DirectionMode(self.direction_mode))
        if self.grad_tol is not None and not self.grad_tol > 0:
            raise SpecError("grad_tol must be positive")
        if self.max_newton_iters < 1:
            raise SpecError("max_newton_iters must be positive")


@dataclass(frozen=True)
class HomotopyRecord:
    epsilon: float
    gain: StructuredGain
    objective_j: float
    grad_norm: float
    newton_iters: int


@dataclass
class HomotopyTrace:
    records: List[HomotopyRecord]
    perturbation: Optional["PerturbationResult"] = None

    @property
    def final(self) -> HomotopyRecord:
        return self.records[-1]


@dataclass(frozen=True)
class PerturbationResult:
    f0: StructuredGain
    f1: StructuredGain
    q0: StateWeight
    p0: np.ndarray
    l0: np.ndarray
    p1: np.ndarray
    l1: np.ndarray
    residuals: dict


@dataclass(frozen=True)
class NewtonResult:
    gain: StructuredGain
    objective_j: float
    grad_norm: float
    iterations: int


def _weight(q) -> np.ndarray:
    return q.matrix if isinstance(q, StateWeight) else np.asarray(q, dtype=float)


def _blocks(spec: FormationSpec) -> int:
    return 3 if spec.is_double else 2


def _diag_blocks(g: np.ndarray, spec: FormationSpec) -> np.ndarray:
    """Diagonals of the N x N blocks of an N x pN matrix, as a (p, N) array."""
    n = spec.n
    return np.vstack([np.diag(g[:, i * n : (i + 1) * n]) for i in range(_blocks(spec))])


def _flat_from_stacked(stacked: np.ndarray) -> np.ndarray:
    return np.hstack([np.diag(row) for row in stacked])


def _restricted_blocks(m: np.ndarray, spec: FormationSpec) -> np.ndarray:
    """Per-vehicle p x p slices ``M[(i, n), (j, n)]`` of a pN x pN matrix."""
    n, p = spec.n, _blocks(spec)
    idx = np.arange(n)[:, None] + n * np.arange(p)[None, :]  # (N, p)
    return m[idx[:, :, None], idx[:, None, :]]


def _restricted_solve(blocks: np.ndarray, rhs: np.ndarray, spec: FormationSpec, cond_max=1e12) -> np.ndarray:
    """Solve ``sum_i x[i, n] blocks[n, i, j] = rhs[j, n]`` on the free entries.

    Returns the (p, N) solution with fixed entries (``b_N`` without a
    follower) set to zero.
    """
    n, p = spec.n, _blocks(spec)
    mask = free_mask(spec).reshape(p, n)
    out = np.zeros((p, n))
    for v in range(n):
        free = mask[:, v]
        a = blocks[v][np.ix_(free, free)].T
        if np.linalg.cond(a) > cond_max:
            raise SingularRestriction(f"restricted operator singular at vehicle {v + 1}")
        out[free, v] = np.linalg.solve(a, rhs[free, v])
    return out


# ---------------------------------------------------------------------------
# structured H2 objective, gradient and Hessian-vector products


class _Point:
    """Everything computed at one stabilizing gain."""

    __slots__ = ("x", "gain", "flat", "a_cl", "solver", "p", "l", "j", "grad_stacked", "grad")


class StructuredH2:
    """The structured H2 problem for one formation and state weight."""

    def __init__(self, spec: FormationSpec, q):
        self.spec = spec
        self.q = _weight(q)
        self.r = spec.r
        self.a, self.b1, self.b2, self.c = open_loop(spec)
        self.w = self.b1 @ self.b1.T
        self.mask = free_mask(spec)

    def point(self, x) -> Optional[_Point]:
        """Evaluate at free parameters ``x``; ``None`` if not stabilizing."""
        pt = _Point()
        pt.x = np.asarray(x, dtype=float)
        pt.gain = StructuredGain.from_params(self.spec, pt.x)
        pt.flat = pt.gain.flat()
        pt.a_cl = self.a - self.b2 @ pt.flat @ self.c
        try:
            pt.solver = LyapunovSolver(pt.a_cl)
        except NonHurwitzError:
            return None
        if pt.solver.eigenvalues.real.max() >= -STABILITY_TOL:
            return None
        fc = pt.flat @ self.c
        pt.l = pt.solver.solve(self.w)
        pt.p = pt.solver.solve_adjoint(self.q + self.r * fc.T @ fc)
        pt.j = float(np.sum(pt.p * self.w))
        lct = pt.l @ self.c.T
        g = 2.0 * (self.r * pt.flat @ self.c @ lct - self.b2.T @ pt.p @ lct)
        pt.grad_stacked = _diag_blocks(g, self.spec)
        pt.grad = pt.grad_stacked.reshape(-1)[self.mask]
        return pt

    def delta_j(self, old: _Point, new: _Point) -> float:
        """``J(new) - J(old)`` via the Gramian of ``new`` and ``P`` of ``old``.

        Both sides are small when the step is small, so the Armijo test is
        not swamped by round-off in ``J`` itself.
        """
        d_flat = new.flat - old.flat
        d_a = -self.b2 @ d_flat @ self.c
        fc_new = new.flat @ self.c
        d_fc = d_flat @ self.c
        rhs = d_a.T @ old.p + old.p @ d_a + self.r * (d_fc.T @ fc_new + (old.flat @ self.c).T @ d_fc)
        return float(np.sum(new.l * rhs))

    def hessp(self, pt: _Point, v) -> np.ndarray:
        """Hessian of J along the free-parameter direction ``v``."""
        full = np.zeros(self.mask.size)
        full[self.mask] = v
        d = _flat_from_stacked(full.reshape(-1, self.spec.n))
        d_a = -self.b2 @ d @ self.c
        fc = pt.flat @ self.c
        dc = d @ self.c
        l_dot = pt.solver.solve(d_a @ pt.l + pt.l @ d_a.T)
        p_dot = pt.solver.solve_adjoint(d_a.T @ pt.p + pt.p @ d_a + self.r * (dc.T @ fc + fc.T @ dc))
        ct = self.c.T
        h = 2.0 * (
            self.r * dc @ pt.l @ ct
            + self.r * fc @ l_dot @ ct
            - self.b2.T @ p_dot @ pt.l @ ct
            - self.b2.T @ pt.p @ l_dot @ ct
        )
        return _diag_blocks(h, self.spec).reshape(-1)[self.mask]

    def preconditioner(self, pt: _Point):
        """Inverse of ``X -> 2 r (X C L C^T) o I_S``, the Gauss-Newton-like part."""
        blocks = 2.0 * self.r * _restricted_blocks(self.c @ pt.l @ self.c.T, self.spec)
        spec = self.spec

        def apply(v):
            full = np.zeros(self.mask.size)
            full[self.mask] = v
            sol = _restricted_solve(blocks, full.reshape(-1, spec.n), spec, cond_max=np.inf)
            return sol.reshape(-1)[self.mask]

        return apply


def structured_gradient(spec: FormationSpec, gain: StructuredGain, q) -> StructuredGain:
    """``2 (r F C L C^T - B2^T P L C^T) o I_S`` at a stabilizing gain."""
    gain.validate(spec)
    prob = StructuredH2(spec, q)
    pt = prob.point(gain.to_params(spec))
    if pt is None:
        raise NonHurwitzError("gain is not stabilizing")
    stacked = pt.grad_stacked.copy()
    stacked.reshape(-1)[~prob.mask] = 0.0
    return StructuredGain.from_stacked(stacked)


# ---------------------------------------------------------------------------
# Newton iterations


def _cg_direction(prob: StructuredH2, pt: _Point, radius: float, max_iter: int) -> np.ndarray:
    """Preconditioned truncated CG on ``H d = -g`` inside a trust region."""
    g = pt.grad
    gnorm = np.linalg.norm(g)
    tol = min(0.5, np.sqrt(gnorm)) * gnorm
    precond = prob.preconditioner(pt)
    d = np.zeros_like(g)
    res = -g
    z = precond(res)
    if not np.all(np.isfinite(z)) or res @ z <= 0:
        precond = lambda v: v  # noqa: E731
        z = res.copy()
    s = z.copy()
    rz = res @ z
    for it in range(max_iter):
        hs = prob.hessp(pt, s)
        curv = s @ hs
        if curv <= 0:
            if it == 0:
                d = -g * radius / gnorm
            else:
                d = _to_boundary(d, s, radius)
            break
        step = rz / curv
        d_next = d + step * s
        if np.linalg.norm(d_next) >= radius:
            d = _to_boundary(d, s, radius)
            break
        d = d_next
        res = res - step * hs
        if np.linalg.norm(res) <= tol:
            break
        z = precond(res)
        rz_next = res @ z
        s = z + (rz_next / rz) * s
        rz = rz_next
    return d


def _to_boundary(d, s, radius):
    # largest tau >= 0 with |d + tau s| = radius
    a, b, c = s @ s, 2 * d @ s, d @ d - radius**2
    tau = (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return d + tau * s


def _line_search(prob: StructuredH2, pt: _Point, d: np.ndarray, max_halvings=60):
    slope = float(pt.grad @ d)
    if slope >= 0:
        return None, 0.0
    s = 1.0
    for _ in range(max_halvings):
        trial = prob.point(pt.x + s * d)
        if trial is not None and prob.delta_j(pt, trial) <= ARMIJO_C * s * slope:
            return trial, s
        s *= 0.5
    return None, 0.0


def newton_solve(
    spec: FormationSpec,
    q,
    f_init: StructuredGain,
    settings: HomotopySettings = HomotopySettings(),
    full_output: bool = False,
):
    """Descent to a stationary structured gain from a stabilizing start."""
    f_init.validate(spec)
    prob = StructuredH2(spec, q)
    pt = prob.point(f_init.to_params(spec))
    if pt is None:
        raise LostStability("initial gain is not stabilizing")
    tol = settings.grad_tol
    radius = max(1.0, np.linalg.norm(pt.x))
    dim = pt.x.size
    h_inv = None
    for it in range(settings.max_newton_iters + 1):
        gnorm = float(np.linalg.norm(pt.grad))
        target = tol if tol is not None else 1e-6 * max(1.0, pt.j)
        if gnorm <= target:
            res = NewtonResult(pt.gain, pt.j, gnorm, it)
            return res if full_output else pt.gain
        if it == settings.max_newton_iters:
            break
        if settings.direction_mode is DirectionMode.FULL_NEWTON:
            d = _cg_direction(prob, pt, radius, max_iter=max(2 * dim, 50))
        else:
            if h_inv is None:
                h_inv = np.eye(dim) / max(1.0, gnorm)
            d = -h_inv @ pt.grad
        trial, s = _line_search(prob, pt, d)
        if trial is None and settings.direction_mode is DirectionMode.QUASI_NEWTON:
            h_inv = np.eye(dim) / max(1.0, gnorm)
            trial, s = _line_search(prob, pt, -pt.grad / max(1.0, gnorm))
        if trial is None:
            # steepest descent as a last resort
            trial, s = _line_search(prob, pt, -pt.grad * radius / gnorm)
            if trial is None:
                raise LostStability(
                    f"no stabilizing descent step at iteration {it} (|grad|={gnorm:.3e})"
                )
        step = trial.x - pt.x
        if settings.direction_mode is DirectionMode.FULL_NEWTON:
            if s == 1.0 and np.linalg.norm(step) >= 0.99 * radius:
                radius *= 2.0
            elif s < 1.0:
                radius = max(np.linalg.norm(step), 1e-8)
        else:
            y = trial.grad - pt.grad
            sy = float(step @ y)
            if sy > 1e-12 * np.linalg.norm(step) * np.linalg.norm(y):
                rho = 1.0 / sy
                v = np.eye(dim) - rho * np.outer(step, y)
                h_inv = v @ h_inv @ v.T + rho * np.outer(step, step)
        pt = trial
    raise MaxItersExceeded(
        f"Newton iterations did not converge in {settings.max_newton_iters} steps",
        best=pt.gain,
        grad_norm=float(np.linalg.norm(pt.grad)),
    )


# ---------------------------------------------------------------------------
# homotopy pieces


def inverse_optimal_q0(spec: FormationSpec, alpha: float = 1.0, beta: float = 3.0):
    """Uniform gain ``F0`` and the weight ``Q0`` for which it is LQR-optimal.

    Single integrator: ``K0 = alpha T`` (``T`` with last diagonal entry 1
    without a follower) and ``Q0 = r K0^2``.  Double integrator:
    ``K0 = [alpha T, beta I]`` and ``Q0 = r blockdiag(Kp^2, beta^2 I - 2 Kp)``,
    which needs ``beta^2 > 8 alpha``.
    """
    if not alpha > 0:
        raise SpecError("alpha must be positive")
    r = spec.r
    if spec.is_double:
        if not beta > 0 or beta**2 <= 8 * alpha:
            raise StabilityMarginViolated(f"need beta^2 > 8 alpha, got alpha={alpha}, beta={beta}")
        f0 = StructuredGain.uniform(spec, alpha, beta)
        kp = position_gain_matrix(f0)
        n = spec.n
        q0 = np.zeros((2 * n, 2 * n))
        q0[:n, :n] = r * kp @ kp
        q0[n:, n:] = r * (beta**2 * np.eye(n) - 2.0 * kp)
    else:
        f0 = StructuredGain.uniform(spec, alpha)
        k0 = position_gain_matrix(f0)
        q0 = r * k0 @ k0
    return f0, StateWeight.custom(q0)


def perturbation_first_order(
    spec: FormationSpec, q_d=None, alpha: float = 1.0, beta: float = 3.0
) -> PerturbationResult:
    """First-order term ``F1`` of the optimal gain along the homotopy path."""
    qd = StateWeight.global_(spec).matrix if q_d is None else _weight(q_d)
    f0, q0w = inverse_optimal_q0(spec, alpha, beta)
    q0 = q0w.matrix
    r = spec.r
    a, b1, b2, c = open_loop(spec)
    flat0 = f0.flat()
    fc0 = flat0 @ c
    a0 = a - b2 @ fc0
    solver = LyapunovSolver(a0)
    p0 = solver.solve_adjoint(q0 + r * fc0.T @ fc0)
    l0 = solver.solve(b1 @ b1.T)
    p1 = solver.solve_adjoint(qd - q0)

    lct = l0 @ c.T
    blocks = r * _restricted_blocks(c @ lct, spec)
    rhs = _diag_blocks(b2.T @ p1 @ lct, spec)
    f1_stacked = _restricted_solve(blocks, rhs, spec)
    f1 = StructuredGain.from_stacked(f1_stacked)

    b2f1c = b2 @ f1.flat() @ c
    l1 = solver.solve(-(b2f1c @ l0 + l0 @ b2f1c.T))

    mask = free_mask(spec)

    def _restricted_norm(m):
        return float(np.linalg.norm(_diag_blocks(m, spec).reshape(-1)[mask]))

    residuals = {
        "o1_stationarity": _restricted_norm(r * flat0 @ c @ lct - b2.T @ p0 @ lct),
        "o1_inverse_optimality": float(np.linalg.norm(fc0 - b2.T @ p0 / r)),
        "oeps_stationarity": _restricted_norm(r * f1.flat() @ c @ lct - b2.T @ p1 @ lct),
    }
    return PerturbationResult(f0, f1, q0w, p0, l0, p1, l1, residuals)


def f1_closed_form(n: int, has_follower: bool = True) -> StructuredGain:
    """First-order gains for ``r = 1``, ``Q0 = T^2``, ``Qd = I`` (single integrator)."""
    idx = np.arange(1, n + 1, dtype=float)
    if has_follower:
        if n < 2:
            raise SpecError("closed-form F1 with follower needs N >= 2")
        den = 12.0 * (n**2 - 1)
        f = idx * (idx - n - 1) * (4 * idx * (n + 1) - n * (2 * n + 7) + 1) / den - 0.5
        b = idx * (n + 1 - idx) * (4 * idx * (n + 1) - n * (2 * n + 1) - 5) / den - 0.5
        return StructuredGain(f, b)
    f = (-(idx**2) + (n + 1) * idx - 1) / 2.0
    b = (idx**2 - n * idx - 1) / 2.0
    f[-1] = (n - 1) / 2.0
    b[-1] = 0.0
    return StructuredGain(f, b)


def q_of_epsilon(q0, q_d, eps: float) -> np.ndarray:
    q0m, qdm = _weight(q0), _weight(q_d)
    return q0m + eps * (qdm - q0m)


def homotopy_continue(
    spec: FormationSpec, q_d=None, settings: HomotopySettings = HomotopySettings()
) -> HomotopyTrace:
    """Track the optimal structured gain from ``Q0`` to ``Qd`` over the schedule."""
    qd = StateWeight.global_(spec) if q_d is None else q_d
    pert = perturbation_first_order(spec, qd, settings.alpha, settings.beta)
    q0 = pert.q0
    records = []
    eps0 = float(settings.epsilon_schedule[0])
    gain = pert.f0 + eps0 * pert.f1
    prob_check = StructuredH2(spec, q_of_epsilon(q0, qd, eps0))
    if prob_check.point(gain.to_params(spec)) is None:
        gain = pert.f0
    prev = None
    for eps in settings.epsilon_schedule:
        eps = float(eps)
        q = q_of_epsilon(q0, qd, eps)
        try:
            res = newton_solve(spec, q, gain, settings, full_output=True)
        except (MaxItersExceeded, LostStability, SingularRestriction, NonHurwitzError) as exc:
            raise HomotopyError(eps, exc) from exc
        records.append(HomotopyRecord(eps, res.gain, res.objective_j, res.grad_norm, res.iterations))
        if prev is not None:
            log.debug(
                "eps=%.3e J=%.8g |dJ/deps|~%.4g newton_iters=%d",
                eps,
                res.objective_j,
                abs(res.objective_j - prev.objective_j) / (eps - prev.epsilon),
                res.iterations,
            )
        prev = records[-1]
        gain = res.gain
    return HomotopyTrace(records, pert)


def optimal_nonsymmetric_gain(
    spec: FormationSpec, q_d=None, settings: HomotopySettings = HomotopySettings()
) -> StructuredGain:
    return homotopy_continue(spec, q_d, settings).final.gain


__all__ = [
    "DirectionMode",
    "HomotopySettings",
    "HomotopyRecord",
    "HomotopyTrace",
    "PerturbationResult",
    "NewtonResult",
    "StructuredH2",
    "structured_gradient",
    "newton_solve",
    "inverse_optimal_q0",
    "perturbation_first_order",
    "f1_closed_form",
    "q_of_epsilon",
    "homotopy_continue",
    "optimal_nonsymmetric_gain",
    "default_schedule",
]
