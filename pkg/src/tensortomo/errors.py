"""Exception types shared across the package."""


class TensorTomoError(Exception):
    """Base class for all package errors."""


# geodesic flow

class NonUnitDirection(TensorTomoError):
    """Initial direction is not a unit vector in the metric."""


class EscapeFailure(TensorTomoError):
    """A geodesic exceeded the arclength cap without reaching the boundary.

    Usually means a non-simple metric slipped past certification.
    """


class NoConvergence(TensorTomoError):
    """Two-point shooting did not converge within the iteration cap."""


class CoincidentPoints(TensorTomoError):
    """Two-point problem called with identical endpoints."""


# tensor calculus / elliptic solver

class NonConvergence(TensorTomoError):
    """Linear solve failed to reach the required residual."""


class ZeroField(TensorTomoError):
    """Operation requires a nonzero field."""


# ray transform

class FanMismatch(TensorTomoError):
    """Ray data defined over different boundary fans."""


# normal operator / symbol

class ZeroCovector(TensorTomoError):
    """Principal symbol requires a nonzero frequency covector."""


class UnresolvedFrequency(TensorTomoError):
    """Requested oscillation is too fast for the grid (k*h > 1/4)."""


# constructive pipeline / experiments

class GeodesicEntersM(TensorTomoError):
    """No admissible boundary-to-boundary direction avoided the inner disc."""


class IllConditionedPair(TensorTomoError):
    """Direction pair too close to collinear for the 2x2 trace solve."""


class Stagnation(TensorTomoError):
    """CGLS residual plateaued above the requested tolerance."""


class EnsembleDegenerate(TensorTomoError):
    """Every ensemble sample was filtered out as nearly potential."""


class CertificationFailure(TensorTomoError):
    """A metric required to be simple failed certification."""


# config parsing

class ConfigError(TensorTomoError):
    """Base class for experiment-config errors."""


class ParseError(ConfigError):
    """Malformed config line (carries the line number)."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class UnknownKey(ConfigError):
    """Config key is not recognized (typos are never silently defaulted)."""


class RangeError(ConfigError):
    """Config value outside its admissible range."""
