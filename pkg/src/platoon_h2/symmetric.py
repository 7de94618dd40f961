"""Convex design of symmetric single-integrator gains.

With ``k_1 = f_1``, ``k_n = f_n = b_{n-1}`` and ``k_{N+1} = b_N`` the
closed loop is ``-K`` for the tridiagonal

    K = [[k1+k2, -k2,   ...           ],
         [-k2,   k2+k3, ...           ],
         [               ...  kN+kN1  ]]

and the H2 objective reduces to ``(1/2) trace(Q K^-1 + r K)``, which is
convex over the positive definite cone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky_banded

from .errors import MaxItersExceeded, NonPositiveDefiniteError, SpecError
from .model import FormationSpec, StructuredGain

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SymmetricGainVector:
    """Edge gains ``k``: length N+1 with a follower, N without."""

    k: np.ndarray
    has_follower: bool = True

    def __post_init__(self):
        k = np.array(self.k, dtype=float).reshape(-1)
        k.setflags(write=False)
        object.__setattr__(self, "k", k)
        if k.size < (2 if self.has_follower else 1):
            raise SpecError("symmetric gain vector too short")

    @property
    def n(self) -> int:
        return self.k.size - 1 if self.has_follower else self.k.size

    def padded(self) -> np.ndarray:
        """Always length N+1, with ``k_{N+1} = 0`` when there is no follower."""
        return self.k if self.has_follower else np.append(self.k, 0.0)

    def matrix(self) -> np.ndarray:
        kp = self.padded()
        return np.diag(kp[:-1] + kp[1:]) - np.diag(kp[1:-1], 1) - np.diag(kp[1:-1], -1)

    def to_structured_gain(self, spec: Optional[FormationSpec] = None) -> StructuredGain:
        kp = self.padded()
        gain = StructuredGain(kp[:-1], kp[1:])
        if spec is not None:
            gain.validate(spec)
        return gain

    def is_positive_definite(self) -> bool:
        kp = self.padded()
        n = self.n
        band = np.zeros((2, n))
        band[1] = kp[:-1] + kp[1:]
        band[0, 1:] = -kp[1:-1]
        try:
            cholesky_banded(band, lower=False, check_finite=True)
        except (LinAlgError, ValueError):
            return False
        return True

    @classmethod
    def ones(cls, spec: FormationSpec) -> "SymmetricGainVector":
        return cls(np.ones(spec.n + 1 if spec.has_follower else spec.n), spec.has_follower)


@dataclass(frozen=True)
class GradientSettings:
    alpha_armijo: float = 0.3
    beta_backtrack: float = 0.5
    grad_tol: float = 1e-8
    max_iters: int = 50000

    def __post_init__(self):
        if not 0 < self.alpha_armijo < 0.5:
            raise SpecError("alpha_armijo must lie in (0, 0.5)")
        if not 0 < self.beta_backtrack < 1:
            raise SpecError("beta_backtrack must lie in (0, 1)")
        if not self.grad_tol > 0 or self.max_iters < 1:
            raise SpecError("grad_tol and max_iters must be positive")


def _check_spec(k: SymmetricGainVector, spec: FormationSpec):
    if spec.is_double:
        raise SpecError("symmetric design applies to the single-integrator model")
    if k.has_follower != spec.has_follower or k.n != spec.n:
        raise SpecError("symmetric gain vector does not match the formation")


def _gammas(k: SymmetricGainVector):
    # gamma_i = sum_{n<=i} 1/k_n, i = 1..N+1 (gamma_{N+1} = inf without follower)
    return np.cumsum(1.0 / k.k)


def tridiag_inverse_entries(k: SymmetricGainVector) -> np.ndarray:
    """Dense ``K^{-1}`` from the closed-form entries of a tridiagonal inverse."""
    if not k.is_positive_definite():
        raise NonPositiveDefiniteError("K is not positive definite")
    g = _gammas(k)
    n = k.n
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    if k.has_follower:
        gn1 = g[n]
        return g[lo] * (gn1 - g[hi]) / gn1
    return g[lo]


def objective_sg(k: SymmetricGainVector, spec: FormationSpec, q=None) -> float:
    """``(1/2) trace(Q K^-1 + r K)``; ``+inf`` outside the PD cone.

    ``q=None`` means ``Q = I`` and uses the gamma form.  Any other ``Q``
    takes the dense path.
    """
    _check_spec(k, spec)
    if not k.is_positive_definite():
        return np.inf
    r = spec.r
    kp = k.padded()
    trace_k = kp[0] + kp[-1] + 2.0 * kp[1:-1].sum()
    if q is not None or np.any(k.k == 0.0):
        qm = np.eye(spec.n) if q is None else getattr(q, "matrix", q)
        kinv = np.linalg.inv(k.matrix())
        return 0.5 * float(np.sum(np.asarray(qm) * kinv)) + 0.5 * r * trace_k
    g = _gammas(k)
    n = spec.n
    if k.has_follower:
        diag = g[:n] * (g[n] - g[:n]) / g[n]
    else:
        diag = g
    return 0.5 * float(diag.sum()) + 0.5 * r * trace_k


def gradient_sg(k: SymmetricGainVector, spec: FormationSpec) -> np.ndarray:
    """Closed-form gradient of the ``Q = I`` objective with respect to ``k``."""
    _check_spec(k, spec)
    if not k.is_positive_definite():
        raise NonPositiveDefiniteError("K is not positive definite")
    r = spec.r
    n = spec.n
    kk = k.k
    g = _gammas(k)
    if not k.has_follower:
        # gamma_{N+1} -> inf limit of the follower expressions
        counts = n - np.arange(n)
        grad = r - counts / (2.0 * kk**2)
        grad[0] += -r / 2.0
        return grad
    gn1 = g[n]
    gi = g[:n]
    head = np.concatenate([[0.0], np.cumsum(gi**2)])  # head[m] = sum_{i<m} gamma_i^2
    tail = np.cumsum(((gn1 - gi) ** 2)[::-1])[::-1]  # tail[m] = sum_{i>=m} (.)^2
    grad = np.empty(n + 1)
    idx = np.arange(1, n)
    grad[idx] = r - (head[idx] + tail[idx]) / (2.0 * kk[idx] ** 2 * gn1**2)
    grad[0] = r / 2.0 - tail[0] / (2.0 * kk[0] ** 2 * gn1**2)
    grad[n] = r / 2.0 - head[n] / (2.0 * kk[n] ** 2 * gn1**2)
    return grad


def analytic_symmetric_no_follower(spec: FormationSpec) -> SymmetricGainVector:
    """Global optimum of the ``Q = I`` problem without a fictitious follower."""
    if spec.has_follower:
        raise SpecError("closed-form symmetric optimum requires has_follower=False")
    n, r = spec.n, spec.r
    k = np.sqrt((n + 1 - np.arange(1, n + 1)) / (2.0 * r))
    k[0] = np.sqrt(n / r)
    return SymmetricGainVector(k, has_follower=False)


def _objective_delta(new: SymmetricGainVector, old: SymmetricGainVector, spec: FormationSpec) -> float:
    """``J(new) - J(old)`` for ``Q = I`` without subtracting two large numbers.

    Near the optimum the Armijo decrease is far below ``eps * J``; forming
    the difference from gamma increments keeps it resolvable.
    """
    if not new.is_positive_definite():
        return np.inf
    if np.any(new.k == 0.0) or np.any(old.k == 0.0):
        return objective_sg(new, spec) - objective_sg(old, spec)
    n, r = spec.n, spec.r
    dk = new.k - old.k
    g_old = _gammas(old)
    dg = np.cumsum(-dk / (new.k * old.k))
    dkp = dk if new.has_follower else np.append(dk, 0.0)
    dtrace = dkp[0] + dkp[-1] + 2.0 * dkp[1:-1].sum()
    if not new.has_follower:
        return 0.5 * float(dg.sum()) + 0.5 * r * dtrace
    gi, dgi = g_old[:n], dg[:n]
    big, dbig = g_old[n], dg[n]
    # diag entries gamma - gamma^2 / Gamma
    d_sq_over = ((2.0 * gi + dgi) * dgi * big - gi**2 * dbig) / (big * (big + dbig))
    return 0.5 * float(np.sum(dgi - d_sq_over)) + 0.5 * r * dtrace


@dataclass
class DescentRecord:
    k: SymmetricGainVector
    objective: float
    grad_norm: float
    iterations: int
    history: list


def gradient_descend(
    spec: FormationSpec,
    settings: GradientSettings = GradientSettings(),
    k0: Optional[SymmetricGainVector] = None,
    full_output: bool = False,
):
    """Gradient descent with Armijo backtracking on the ``Q = I`` objective.

    Infeasible trial points have objective ``+inf``, so backtracking keeps
    every accepted iterate inside the positive definite cone.
    """
    k = SymmetricGainVector.ones(spec) if k0 is None else k0
    _check_spec(k, spec)
    j = objective_sg(k, spec)
    if not np.isfinite(j):
        raise NonPositiveDefiniteError("initial gain is not positive definite")
    history = [j]
    a, b = settings.alpha_armijo, settings.beta_backtrack
    for it in range(settings.max_iters):
        grad = gradient_sg(k, spec)
        gn2 = float(grad @ grad)
        if np.sqrt(gn2) < settings.grad_tol:
            record = DescentRecord(k, j, np.sqrt(gn2), it, history)
            return record if full_output else k
        s = 1.0
        while True:
            trial = SymmetricGainVector(k.k - s * grad, k.has_follower)
            dj = _objective_delta(trial, k, spec)
            if dj < -a * s * gn2:
                break
            s *= b
            if s < 1e-30:
                raise MaxItersExceeded("line search stalled", best=k, grad_norm=np.sqrt(gn2))
        k, j = trial, j + dj
        history.append(j)
    grad_norm = float(np.linalg.norm(gradient_sg(k, spec)))
    raise MaxItersExceeded(
        f"gradient descent did not reach |grad| < {settings.grad_tol} in {settings.max_iters} iterations",
        best=k,
        grad_norm=grad_norm,
    )


def double_symmetric_objective(kp, beta: float, q1, q2, r: float = 1.0) -> float:
    """H2 objective of ``K = [K_p, beta I]`` for a double-integrator formation.

    ``trace(K_p^-1 Q1 + r K_p + Q2 + r beta^2 I) / (2 beta)``, convex in
    ``K_p`` over the positive definite cone.
    """
    kp = np.asarray(kp, dtype=float)
    if not beta > 0:
        raise SpecError("beta must be positive")
    try:
        np.linalg.cholesky(kp)
    except np.linalg.LinAlgError:
        raise NonPositiveDefiniteError("K_p is not positive definite") from None
    n = kp.shape[0]
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    val = np.trace(np.linalg.solve(kp, q1)) + r * np.trace(kp) + np.trace(q2) + r * beta**2 * n
    return float(val / (2.0 * beta))


def optimal_symmetric_gain(spec: FormationSpec, settings: GradientSettings = GradientSettings()) -> StructuredGain:
    """Optimal symmetric structured gain for ``Q = I`` (closed form when possible)."""
    if not spec.has_follower:
        return analytic_symmetric_no_follower(spec).to_structured_gain(spec)
    return gradient_descend(spec, settings).to_structured_gain(spec)
