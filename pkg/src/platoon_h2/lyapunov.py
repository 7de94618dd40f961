"""Dense Lyapunov solves, closed-loop Gramians and H2 performance measures."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import schur
from scipy.linalg.lapack import dtrsyl

from .errors import LyapunovAccuracyError, NonHurwitzError
from .model import ClosedLoopSystem, FormationSpec, StateWeight

log = logging.getLogger(__name__)

LYAP_TOL = 1e-10


class LyapunovSolver:
    """Bartels-Stewart solver with the real Schur form of ``a`` cached.

    ``solve(R)`` returns X with ``a X + X a^T + R = 0`` and
    ``solve_adjoint(R)`` returns X with ``a^T X + X a + R = 0``.  Both reuse
    the same factorization, which is what makes repeated solves along a
    Newton-CG iteration affordable.
    """

    def __init__(self, a, tol: float = LYAP_TOL, check: bool = True):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("Lyapunov matrix must be square")
        self.a = a
        self.tol = tol
        self.check = check
        self.s, self.z = schur(a, output="real")
        eig = _quasi_triangular_eigs(self.s)
        scale = max(1.0, np.abs(a).max(initial=0.0))
        # lambda_i + lambda_j == 0 makes the Sylvester operator singular
        if eig.size and eig.real.max() >= -1e-13 * scale:
            raise NonHurwitzError(
                f"matrix is not Hurwitz (max real eigenvalue {eig.real.max():.3e})"
            )
        self.eigenvalues = eig

    def _solve(self, rhs, adjoint):
        rhs = np.asarray(rhs, dtype=float)
        c = -(self.z.T @ rhs @ self.z)
        trana, tranb = ("T", "N") if adjoint else ("N", "T")
        y, scale, info = dtrsyl(self.s, self.s, c, trana=trana, tranb=tranb)
        if info < 0:
            raise ValueError(f"dtrsyl argument {-info} invalid")
        x = self.z @ (y / scale) @ self.z.T
        x = 0.5 * (x + x.T) if _is_symmetric(rhs) else x
        if self.check:
            a = self.a.T if adjoint else self.a
            res = np.linalg.norm(a @ x + x @ a.T + rhs)
            bound = self.tol * max(1.0, np.linalg.norm(rhs))
            if res > bound:
                raise LyapunovAccuracyError(res / max(1.0, np.linalg.norm(rhs)), self.tol)
        return x

    def solve(self, rhs) -> np.ndarray:
        return self._solve(rhs, adjoint=False)

    def solve_adjoint(self, rhs) -> np.ndarray:
        return self._solve(rhs, adjoint=True)


def _is_symmetric(m) -> bool:
    return m.shape[0] == m.shape[1] and np.array_equal(m, m.T)


def _quasi_triangular_eigs(s) -> np.ndarray:
    n = s.shape[0]
    eig = np.empty(n, dtype=complex)
    i = 0
    while i < n:
        if i + 1 < n and s[i + 1, i] != 0.0:
            block = s[i : i + 2, i : i + 2]
            tr = block[0, 0] + block[1, 1]
            det = block[0, 0] * block[1, 1] - block[0, 1] * block[1, 0]
            disc = np.sqrt(complex(tr * tr / 4 - det))
            eig[i], eig[i + 1] = tr / 2 + disc, tr / 2 - disc
            i += 2
        else:
            eig[i] = s[i, i]
            i += 1
    return eig


def solve_lyapunov(a, rhs, tol: float = LYAP_TOL) -> np.ndarray:
    """Solve ``a X + X a^T + rhs = 0`` for Hurwitz ``a``."""
    return LyapunovSolver(a, tol=tol).solve(rhs)


@dataclass(frozen=True)
class GramianPair:
    observability_p: np.ndarray
    controllability_l: np.ndarray


@dataclass(frozen=True)
class PerformanceReport:
    pi_g: float
    pi_l: float
    pi_ctr: float
    objective_j: float
    n_vehicles: int

    def as_dict(self):
        return {
            "pi_g": self.pi_g,
            "pi_l": self.pi_l,
            "pi_ctr": self.pi_ctr,
            "objective_j": self.objective_j,
            "n_vehicles": self.n_vehicles,
        }


def _weight_matrix(q) -> np.ndarray:
    return q.matrix if isinstance(q, StateWeight) else np.asarray(q, dtype=float)


def gramians(sys: ClosedLoopSystem, q, r: float) -> GramianPair:
    solver = LyapunovSolver(sys.a_cl)
    fc = sys.control_map
    p = solver.solve_adjoint(_weight_matrix(q) + r * fc.T @ fc)
    l = solver.solve(sys.b1 @ sys.b1.T)
    return GramianPair(p, l)


def objective_j(sys: ClosedLoopSystem, q, r: float) -> float:
    """H2 objective ``trace(P B1 B1^T)``."""
    p = LyapunovSolver(sys.a_cl).solve_adjoint(
        _weight_matrix(q) + r * sys.control_map.T @ sys.control_map
    )
    return float(np.trace(p @ sys.b1 @ sys.b1.T))


def performance(sys: ClosedLoopSystem, spec: FormationSpec, q=None) -> PerformanceReport:
    """Formation-size-normalized global, local and control variances.

    ``objective_j`` is reported for the weight ``q`` (global weight by
    default) and the control penalty ``spec.r``, evaluated from the same
    controllability Gramian.
    """
    l = LyapunovSolver(sys.a_cl).solve(sys.b1 @ sys.b1.T)
    n = spec.n
    fc = sys.control_map
    ctr = fc.T @ fc
    qg = StateWeight.global_(spec).matrix
    ql = StateWeight.local(spec).matrix
    pi_g = float(np.sum(l * qg)) / n
    pi_l = float(np.sum(l * ql)) / n
    pi_ctr = float(np.sum(l * ctr)) / n
    qj = qg if q is None else _weight_matrix(q)
    j = float(np.sum(l * (qj + spec.r * ctr)))
    if spec.is_double and log.isEnabledFor(logging.DEBUG):
        log.debug(
            "N=%d position/velocity split of pi_g: %.6g / %.6g",
            n,
            np.trace(l[:n, :n]) / n,
            np.trace(l[n:, n:]) / n,
        )
    return PerformanceReport(pi_g, pi_l, pi_ctr, j, n)
