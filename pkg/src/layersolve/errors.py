"""Exception types shared across the package."""


class LayerSolveError(Exception):
    pass


class DimensionError(LayerSolveError):
    """Raised when array shapes do not line up for a compositing operation."""


class ConfigError(LayerSolveError):
    """Raised for invalid configuration (resolutions, checkpoint metadata, ...)."""


class NonFiniteLossError(LayerSolveError):
    """Raised when an optimization objective turns NaN/Inf.

    Carries the partial trace collected up to the failing step so batch
    drivers can persist diagnostics before aborting.
    """

    def __init__(self, message, trace_steps=None):
        super().__init__(message)
        self.trace_steps = list(trace_steps) if trace_steps is not None else []


class UnsupportedVariantError(LayerSolveError):
    """Raised when a run variant cannot be applied to the given prior."""


class ParseMapError(LayerSolveError):
    """Raised when a parse-map file contains labels outside the documented palette."""
