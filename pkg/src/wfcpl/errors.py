"""Exception types shared across the coupling kernel."""


class WfcplError(Exception):
    """Base class for all library errors."""


class DegreeTooHigh(WfcplError):
    """Interpolation degree exceeds the number of substep samples."""


class NonMonotoneTimes(WfcplError):
    """Sample times are not strictly increasing."""


class OutOfWindow(WfcplError):
    """Evaluation time lies outside the coupling window."""


class LayoutMismatch(WfcplError):
    """Vector lengths are inconsistent with the substep block layout."""


class LengthMismatch(WfcplError):
    """Operands have different lengths."""


class DimensionChange(WfcplError):
    """Residual or update dimension changed within one window."""


class EmptyHistory(WfcplError):
    """No secant columns available; caller should fall back to relaxation."""


class RankDeficient(WfcplError):
    """Filtering removed every secant column."""


class MaxIterationsExceeded(WfcplError):
    """A coupling window did not converge within the iteration cap."""

    def __init__(self, window_index: int, iterations: int):
        super().__init__(
            f"window {window_index} did not converge within {iterations} iterations"
        )
        self.window_index = window_index
        self.iterations = iterations


class WrongSide(WfcplError):
    """Interface extraction requested from the wrong subdomain."""


class LinearSolveFailure(WfcplError):
    """The implicit step's linear solve failed."""


class VersionMismatch(WfcplError):
    """Handshake protocol versions differ."""


class ConfigMismatch(WfcplError):
    """Handshake configurations differ."""


class ChannelClosed(WfcplError):
    """The transport channel was closed or timed out."""


class MalformedFrame(WfcplError):
    """A frame failed to parse."""


class ConfigError(WfcplError):
    """Invalid experiment configuration."""


class NonPositive(WfcplError):
    """Order computation needs positive errors and window sizes."""
