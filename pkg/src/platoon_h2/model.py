"""Formation models: structure matrices, gains and closed-loop assembly.

Vehicles are indexed 1..N in the docs and 0..N-1 in arrays.  Fictitious
leader (index 0) and follower (index N+1) sit on their desired
trajectories, so their deviations are identically zero and only enter
through ``f_1`` and ``b_N``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import SpecError

STABILITY_TOL = 1e-8


class Model(str, enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"


class Stability(str, enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    MARGINAL_AVERAGE_MODE = "marginal_average_mode"


@dataclass(frozen=True)
class FormationSpec:
    """One problem instance.

    ``desired_spacing`` and ``desired_velocity`` never enter a computation
    (everything is in deviation coordinates); they are carried for labeling.
    """

    n_vehicles: int
    model: Model = Model.SINGLE
    has_follower: bool = True
    control_penalty_r: float = 1.0
    desired_spacing: float = 0.0
    desired_velocity: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        if int(self.n_vehicles) != self.n_vehicles or self.n_vehicles < 1:
            raise SpecError(f"n_vehicles must be a positive integer, got {self.n_vehicles!r}")
        object.__setattr__(self, "n_vehicles", int(self.n_vehicles))
        if not self.control_penalty_r > 0:
            raise SpecError(f"control penalty r must be positive, got {self.control_penalty_r!r}")

    @property
    def n(self) -> int:
        return self.n_vehicles

    @property
    def r(self) -> float:
        return self.control_penalty_r

    @property
    def is_double(self) -> bool:
        return self.model is Model.DOUBLE

    @property
    def state_dim(self) -> int:
        return 2 * self.n if self.is_double else self.n

    def with_(self, **changes) -> "FormationSpec":
        data = dict(
            n_vehicles=self.n_vehicles,
            model=self.model,
            has_follower=self.has_follower,
            control_penalty_r=self.control_penalty_r,
            desired_spacing=self.desired_spacing,
            desired_velocity=self.desired_velocity,
        )
        data.update(changes)
        return FormationSpec(**data)


def _as_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StructuredGain:
    """Diagonals of ``F_f``, ``F_b`` and (double integrator only) ``F_v``."""

    forward: np.ndarray
    backward: np.ndarray
    velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "forward", _as_vector(self.forward))
        object.__setattr__(self, "backward", _as_vector(self.backward))
        if self.velocity is not None:
            object.__setattr__(self, "velocity", _as_vector(self.velocity))
        n = self.forward.size
        if self.backward.size != n or (self.velocity is not None and self.velocity.size != n):
            raise SpecError("forward/backward/velocity gain vectors must have equal length")

    @property
    def n(self) -> int:
        return self.forward.size

    def validate(self, spec: FormationSpec) -> None:
        if self.n != spec.n:
            raise SpecError(f"gain has length {self.n}, formation has N={spec.n}")
        if spec.is_double and self.velocity is None:
            raise SpecError("double-integrator formation requires velocity gains")
        if not spec.is_double and self.velocity is not None:
            raise SpecError("velocity gains supplied for a single-integrator formation")
        if not spec.has_follower and self.backward[-1] != 0.0:
            raise SpecError("b_N must be exactly zero without a fictitious follower")

    def flat(self) -> np.ndarray:
        """Block row ``F = [F_f F_b]`` or ``[F_f F_b F_v]``."""
        blocks = [np.diag(self.forward), np.diag(self.backward)]
        if self.velocity is not None:
            blocks.append(np.diag(self.velocity))
        return np.hstack(blocks)

    def stacked(self) -> np.ndarray:
        """Gain diagonals as rows of a (2, N) or (3, N) array."""
        rows = [self.forward, self.backward]
        if self.velocity is not None:
            rows.append(self.velocity)
        return np.vstack(rows)

    @classmethod
    def from_stacked(cls, arr) -> "StructuredGain":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[0], arr[1], arr[2] if arr.shape[0] == 3 else None)

    # free-parameter view: b_N is dropped without a follower

    def to_params(self, spec: FormationSpec) -> np.ndarray:
        return self.stacked().reshape(-1)[free_mask(spec)]

    @classmethod
    def from_params(cls, spec: FormationSpec, x) -> "StructuredGain":
        full = np.zeros(len(free_mask(spec)))
        full[free_mask(spec)] = x
        return cls.from_stacked(full.reshape(-1, spec.n))

    def __add__(self, other: "StructuredGain") -> "StructuredGain":
        return StructuredGain.from_stacked(self.stacked() + other.stacked())

    def __sub__(self, other: "StructuredGain") -> "StructuredGain":
        return StructuredGain.from_stacked(self.stacked() - other.stacked())

    def __mul__(self, scale: float) -> "StructuredGain":
        return StructuredGain.from_stacked(scale * self.stacked())

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, StructuredGain):
            return NotImplemented
        return self.stacked().shape == other.stacked().shape and np.array_equal(
            self.stacked(), other.stacked()
        )

    __hash__ = None

    # common families

    @classmethod
    def uniform(cls, spec: FormationSpec, alpha: float = 1.0, beta: float = 3.0) -> "StructuredGain":
        """Spatially uniform symmetric gain ``f_n = b_n = alpha`` (``b_N = 0`` without follower)."""
        b = np.full(spec.n, float(alpha))
        if not spec.has_follower:
            b[-1] = 0.0
        v = np.full(spec.n, float(beta)) if spec.is_double else None
        return cls(np.full(spec.n, float(alpha)), b, v)

    @classmethod
    def look_ahead(cls, spec: FormationSpec, alpha: float = 1.0, beta: float = 1.0) -> "StructuredGain":
        v = np.full(spec.n, float(beta)) if spec.is_double else None
        return cls(np.full(spec.n, float(alpha)), np.zeros(spec.n), v)

    @classmethod
    def zeros(cls, spec: FormationSpec) -> "StructuredGain":
        v = np.zeros(spec.n) if spec.is_double else None
        return cls(np.zeros(spec.n), np.zeros(spec.n), v)


def free_mask(spec: FormationSpec) -> np.ndarray:
    """Boolean mask over the stacked gain entries that are design variables."""
    blocks = 3 if spec.is_double else 2
    mask = np.ones((blocks, spec.n), dtype=bool)
    if not spec.has_follower:
        mask[1, -1] = False
    return mask.reshape(-1)


class StateWeightKind(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"
    CUSTOM = "custom"


@dataclass(frozen=True)
class StateWeight:
    kind: StateWeightKind
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        q = np.array(self.matrix, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise SpecError("state weight must be a square matrix")
        if not np.allclose(q, q.T, atol=1e-12 * max(1.0, np.abs(q).max(initial=0.0))):
            raise SpecError("state weight must be symmetric")
        q = 0.5 * (q + q.T)
        scale = max(1.0, np.abs(q).max(initial=0.0))
        if q.size and np.linalg.eigvalsh(q).min() < -1e-10 * scale:
            raise SpecError("state weight must be positive semidefinite")
        q.setflags(write=False)
        object.__setattr__(self, "kind", StateWeightKind(self.kind))
        object.__setattr__(self, "matrix", q)

    @classmethod
    def global_(cls, spec: FormationSpec) -> "StateWeight":
        """Macroscopic weight: identity on positions (and velocities)."""
        return cls(StateWeightKind.GLOBAL, np.eye(spec.state_dim))

    @classmethod
    def local(cls, spec: FormationSpec) -> "StateWeight":
        """Microscopic weight: ``T`` on positions, identity on velocities."""
        t = build_t(spec.n)
        if spec.is_double:
            t = _blockdiag(t, np.eye(spec.n))
        return cls(StateWeightKind.LOCAL, t)

    @classmethod
    def custom(cls, matrix) -> "StateWeight":
        return cls(StateWeightKind.CUSTOM, matrix)


@dataclass(frozen=True)
class ClosedLoopSystem:
    """``x' = a_cl x + b1 d`` with ``u = -gain_flat @ output_c @ x``."""

    a_cl: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    output_c: np.ndarray
    gain_flat: np.ndarray

    @property
    def control_map(self) -> np.ndarray:
        """``F C``: maps state to (minus) the control input."""
        return self.gain_flat @ self.output_c


def build_cf(n: int) -> np.ndarray:
    """Lower bidiagonal ``C_f``: 1 on the diagonal, -1 on the first subdiagonal."""
    if int(n) != n or n < 1:
        raise SpecError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    return np.eye(n) - np.eye(n, k=-1)


def build_t(n: int) -> np.ndarray:
    """Tridiagonal ``T = C_f + C_f^T`` (2 on the diagonal, -1 off it)."""
    cf = build_cf(n)
    return cf + cf.T


def _blockdiag(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n + m, n + m))
    out[:n, :n] = a
    out[n:, n:] = b
    return out


def open_loop(spec: FormationSpec):
    """Return ``(A, B1, B2, C)`` for the formation model."""
    n = spec.n
    cf = build_cf(n)
    if not spec.is_double:
        eye = np.eye(n)
        return np.zeros((n, n)), eye, eye, np.vstack([cf, cf.T])
    z = np.zeros((n, n))
    eye = np.eye(n)
    a = np.block([[z, eye], [z, z]])
    b = np.vstack([z, eye])
    c = np.block([[cf, z], [cf.T, z], [z, eye]])
    return a, b, b.copy(), c


def assemble(spec: FormationSpec, gain: StructuredGain) -> ClosedLoopSystem:
    gain.validate(spec)
    a, b1, b2, c = open_loop(spec)
    f = gain.flat()
    return ClosedLoopSystem(a_cl=a - b2 @ f @ c, b1=b1, b2=b2, output_c=c, gain_flat=f)


def position_gain_matrix(gain: StructuredGain) -> np.ndarray:
    """``K_p = F_f C_f + F_b C_f^T``."""
    cf = build_cf(gain.n)
    return gain.forward[:, None] * cf + gain.backward[:, None] * cf.T


def check_structural_stability(
    spec: FormationSpec, gain: StructuredGain, tol: float = STABILITY_TOL
) -> Stability:
    # the zero mode is structural; decide it before any eigen-solve
    if gain.forward[0] == 0.0 and gain.backward[-1] == 0.0:
        return Stability.MARGINAL_AVERAGE_MODE
    sys = assemble(spec, gain)
    if np.linalg.eigvals(sys.a_cl).real.max() < -tol:
        return Stability.STABLE
    return Stability.UNSTABLE


def is_stabilizing(spec: FormationSpec, gain: StructuredGain) -> bool:
    return check_structural_stability(spec, gain) is Stability.STABLE
