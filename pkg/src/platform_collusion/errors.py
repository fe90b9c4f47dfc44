"""Exception types raised across the package.

Every error carries a short machine-readable ``reason`` so the sweep runner
can record why a run or sweep point was rejected.
"""


class CollusionLabError(Exception):
    reason = "error"


class NonConvergence(CollusionLabError):
    """The share fixed-point iteration did not reach its tolerance."""

    reason = "non_convergence"

    def __init__(self, max_iter, residual):
        self.max_iter = max_iter
        self.residual = residual
        super().__init__(
            f"share fixed point did not converge in {max_iter} iterations "
            f"(residual {residual:.3e})"
        )


class NoEquilibriumFound(CollusionLabError):
    reason = "no_equilibrium"


class DegenerateGrid(CollusionLabError):
    reason = "degenerate_grid"


class DegenerateDenominator(CollusionLabError):
    reason = "degenerate_denominator"


class EmptySample(CollusionLabError, ValueError):
    reason = "empty_sample"


class TooFewSamples(CollusionLabError, ValueError):
    reason = "too_few_samples"


class TailTooShort(CollusionLabError, ValueError):
    reason = "tail_too_short"


class ShapeMismatch(CollusionLabError, ValueError):
    reason = "shape_mismatch"


class ConfigError(CollusionLabError, ValueError):
    reason = "config_error"
