"""Exception types raised across the package."""


class BeachbotError(Exception):
    """Base class for all package errors."""


class JointLimitError(BeachbotError, ValueError):
    pass


class SingularityError(BeachbotError):
    def __init__(self, q, cond):
        self.q = q
        self.cond = cond
        super().__init__(
            f"Jacobian singular at q=({q.gamma0:.6f}, {q.gamma1:.6f}, {q.gamma2:.6f}) "
            f"(cond={cond:.3g}) and damping is disabled"
        )


class BehindCameraError(BeachbotError, ValueError):
    pass


class InvalidMeasurementError(BeachbotError):
    """Too many spectral points fail the absorbance domain check."""

    def __init__(self, masked_fraction, threshold):
        self.masked_fraction = masked_fraction
        self.threshold = threshold
        super().__init__(
            f"{masked_fraction:.1%} of points masked (limit {threshold:.0%})"
        )


class GridMismatchError(BeachbotError, ValueError):
    pass


class TrainingError(BeachbotError):
    def __init__(self, subproblem, iterations):
        self.subproblem = subproblem
        self.iterations = iterations
        super().__init__(
            f"SMO did not converge on sub-problem {subproblem} after {iterations} iterations"
        )


class LampOffError(BeachbotError):
    pass


class ReferenceContaminatedError(BeachbotError):
    pass


class TargetLostError(BeachbotError):
    """Raised by the servo loop when the tracked candidate disappears; the mission re-scans."""


class CollisionRiskError(BeachbotError):
    pass


class TargetUnreachableError(BeachbotError):
    def __init__(self, probes):
        self.probes = probes
        super().__init__(f"terminal search exhausted after {probes} probes")


class ProtocolError(BeachbotError):
    def __init__(self, state, event):
        self.state = state
        self.event = event
        super().__init__(f"event {event!r} is not legal in state {state!r}")


class ConfigError(BeachbotError, ValueError):
    pass
