"""Time-continuous interface data over one coupling window.

Interface data lives on a window [t_ini, t_ini + dt] and is carried either
as discrete substep samples (:class:`SampleSet`) or as an interpolating
piecewise polynomial (:class:`Waveform`).  Waveforms are B-splines fitted
per interface degree of freedom over a shared knot vector; degree 0 is
reserved for the constant extrapolation used as the initial guess of a
window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import DegreeTooHigh, NonMonotoneTimes, OutOfWindow

#: Relative slack (in units of the window length) tolerated when evaluating
#: at the window boundaries before clamping.
EDGE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class TimeWindow:
    """One coupling window [t_ini, t_ini + dt_window]."""

    t_ini: float
    dt_window: float
    _end: float = field(init=False, repr=False)

    def __post_init__(self):
        if not self.dt_window > 0.0:
            raise ValueError(f"window length must be positive, got {self.dt_window}")
        object.__setattr__(self, "_end", self.t_ini + self.dt_window)

    def end(self) -> float:
        return self._end

    def substep_times(self, n: int) -> np.ndarray:
        """Times t_ini + i*dt/n for i = 0..n, last snapped to end()."""
        dt = self.dt_window / n
        times = self.t_ini + dt * np.arange(n + 1, dtype=float)
        times[-1] = self._end
        return times


@dataclass(frozen=True)
class SampleSet:
    """Interface vectors at the n+1 substep times of one window.

    ``values[0]`` is the fixed initial value at t_ini; ``values[1:]`` are the
    n substep results that act as unknowns of the window fixed-point problem.
    """

    window: TimeWindow
    times: np.ndarray  # shape (n+1,), strictly increasing
    values: np.ndarray  # shape (n+1, m)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or len(times) < 2:
            raise ValueError("need at least an initial value and one substep")
        if values.shape[0] != len(times):
            raise ValueError(
                f"{values.shape[0]} value rows for {len(times)} sample times"
            )
        if values.shape[1] < 1:
            raise ValueError("interface dimension must be >= 1")
        if np.any(np.diff(times) <= 0.0):
            raise NonMonotoneTimes(f"sample times not strictly increasing: {times}")

    @property
    def n_substeps(self) -> int:
        return len(self.times) - 1

    @property
    def m(self) -> int:
        return self.values.shape[1]


def flatten_samples(samples: SampleSet) -> np.ndarray:
    """Concatenate the substep vectors 1..n (excluding the fixed initial value)."""
    return samples.values[1:].ravel().copy()


def unflatten_samples(flat: np.ndarray, template: SampleSet) -> SampleSet:
    """Rebuild a SampleSet from a flat substep vector, keeping the template's
    window, times, and initial value."""
    flat = np.asarray(flat, dtype=float)
    n, m = template.n_substeps, template.m
    if flat.size != n * m:
        raise ValueError(f"expected {n * m} entries, got {flat.size}")
    values = np.vstack([template.values[:1], flat.reshape(n, m)])
    return SampleSet(template.window, template.times.copy(), values)


class Waveform:
    """Piecewise-polynomial interface data over one window.

    Degrees 1-3 interpolate substep samples; degree 0 is the constant
    extrapolation of a single vector.  Evaluation outside the window is
    clamped within ``EDGE_TOLERANCE * dt`` of either end and rejected beyond.
    """

    def __init__(self, window: TimeWindow, degree: int, knots: np.ndarray,
                 coeffs: np.ndarray, spline=None):
        self.window = window
        self.degree = degree
        self.knots = knots
        self.coeffs = coeffs
        self._spline = spline

    def eval(self, t: float) -> np.ndarray:
        w = self.window
        slack = EDGE_TOLERANCE * w.dt_window
        if t < w.t_ini - slack or t > w.end() + slack:
            raise OutOfWindow(
                f"t={t!r} outside window [{w.t_ini!r}, {w.end()!r}]"
            )
        t = min(max(t, w.t_ini), w.end())
        if self.degree == 0:
            return self.coeffs[0].copy()
        return np.asarray(self._spline(t), dtype=float)

    def __call__(self, t: float) -> np.ndarray:
        return self.eval(t)


def build_waveform(samples: SampleSet, p: int) -> Waveform:
    """Interpolate the n+1 samples of a window with a degree-p B-spline.

    The spline has n + p + 2 knots with p+1-fold knots at the window ends;
    on data from a polynomial of degree <= p it reproduces the polynomial
    over the whole window.  Requires 1 <= p <= n.
    """
    n = samples.n_substeps
    if p not in (1, 2, 3):
        raise DegreeTooHigh(f"interpolation degree must be 1, 2, or 3, got {p}")
    if p > n:
        raise DegreeTooHigh(f"degree {p} needs at least {p} substeps, got {n}")
    spline = make_interp_spline(samples.times, samples.values, k=p, axis=0)
    return Waveform(samples.window, p, spline.t.copy(), spline.c.copy(), spline)


def constant_extrapolation(c0: np.ndarray, window: TimeWindow) -> Waveform:
    """Degree-0 waveform that is c0 everywhere in the window."""
    c0 = np.atleast_1d(np.asarray(c0, dtype=float)).copy()
    knots = np.array([window.t_ini, window.end()])
    return Waveform(window, 0, knots, c0.reshape(1, -1))


def constant_samples(c0: np.ndarray, window: TimeWindow, n: int) -> SampleSet:
    """SampleSet holding c0 at every substep time (constant extrapolation)."""
    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    values = np.tile(c0, (n + 1, 1))
    return SampleSet(window, window.substep_times(n), values)
