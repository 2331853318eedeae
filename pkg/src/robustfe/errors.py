"""Exception types raised across the package."""


class AbsoluteContinuityViolation(ValueError):
    """p puts mass on a cell where the reference q has none."""


class DegenerateNormalizer(ArithmeticError):
    """An exponential-tilt normalizer underflowed to zero.

    Signals that the loss/score scale is too large for double precision;
    the caller must rescale (e.g. shift scores by their minimum).
    """


class BoundsViolation(ValueError):
    """A likelihood ratio left its box [delta0, delta1]."""


class InfeasibleSet(ValueError):
    """The ratio constraint set is empty for the given (delta0, delta1, eta)."""


class OracleNoConvergence(RuntimeError):
    """The linear-oracle dual bisection failed to bracket a root."""


class NonDescentAnomaly(RuntimeError):
    """An accepted Frank-Wolfe step increased the objective.

    Never expected; indicates a solver bug rather than a bad instance.
    """


class UnsupportedSize(ValueError):
    """Brute-force reference requested on a support it cannot enumerate."""


class UncoveredState(RuntimeError):
    """A simulated trajectory reached a cell with no policy row."""


class ConfigError(ValueError):
    """A run configuration field failed validation."""
