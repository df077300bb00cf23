"""Partitioned coupling kernel with waveform iteration and quasi-Newton
acceleration, plus built-in partitioned heat-equation participants."""

from .accel import AccelConfig, SecantHistory, qn_solve, qr2_filter, relax, view_residual
from .heat import HeatParticipant, ManufacturedSolution, combined_l2_error, source_f, u_exact
from .orchestrator import (
    CouplingConfig,
    Participant,
    WindowReport,
    average_iterations,
    convergence_measure,
    run_simulation,
    run_window,
)
from .waveform import (
    SampleSet,
    TimeWindow,
    Waveform,
    build_waveform,
    constant_extrapolation,
    flatten_samples,
    unflatten_samples,
)

__all__ = [
    "AccelConfig",
    "CouplingConfig",
    "HeatParticipant",
    "ManufacturedSolution",
    "Participant",
    "SampleSet",
    "SecantHistory",
    "TimeWindow",
    "Waveform",
    "WindowReport",
    "average_iterations",
    "build_waveform",
    "combined_l2_error",
    "constant_extrapolation",
    "convergence_measure",
    "flatten_samples",
    "qn_solve",
    "qr2_filter",
    "relax",
    "run_simulation",
    "run_window",
    "source_f",
    "u_exact",
    "unflatten_samples",
    "view_residual",
]

__version__ = "0.1.0"
