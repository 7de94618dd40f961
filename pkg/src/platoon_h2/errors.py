"""Exception hierarchy shared by the design and analysis modules."""


class PlatoonError(Exception):
    """Base class for all errors raised by :mod:`platoon_h2`."""


class SpecError(PlatoonError, ValueError):
    """Invalid formation description or gain/spec mismatch."""


class NonHurwitzError(PlatoonError):
    """A Lyapunov solve was requested for a matrix that is not Hurwitz."""


class LyapunovAccuracyError(PlatoonError):
    """A Lyapunov solution failed the relative residual check."""

    def __init__(self, residual, tolerance):
        super().__init__(f"Lyapunov residual {residual:.3e} exceeds tolerance {tolerance:.1e}")
        self.residual = residual
        self.tolerance = tolerance


class NonPositiveDefiniteError(PlatoonError):
    """A symmetric gain matrix K is not positive definite."""


class MaxItersExceeded(PlatoonError):
    """An iterative method ran out of iterations.

    ``best`` holds the best iterate found so far so callers can still
    inspect or reuse it.
    """

    def __init__(self, message, best=None, grad_norm=None):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


class LostStability(PlatoonError):
    """A Newton step could not be backtracked into the stabilizing set."""


class StabilityMarginViolated(PlatoonError):
    """Uniform double-integrator gains need beta**2 > 8 * alpha."""


class SingularRestriction(PlatoonError):
    """The structure-restricted linear operator is rank deficient."""


class HomotopyError(PlatoonError):
    """A continuation stage failed; ``epsilon`` records where."""

    def __init__(self, epsilon, cause):
        super().__init__(f"homotopy failed at epsilon={epsilon:.6g}: {cause}")
        self.epsilon = epsilon
        self.cause = cause


class ClosedFormUnavailable(PlatoonError):
    """No closed-form performance expression exists for the family."""


class DegenerateData(PlatoonError, ValueError):
    """Fitting data cannot determine the requested model."""


class UnstableDiscretization(PlatoonError):
    """The explicit integrator step is too large for the closed loop."""
