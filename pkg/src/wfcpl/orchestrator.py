"""Per-window implicit coupling loop between two time-stepping participants.

Each window runs a serial Gauss-Seidel sweep: the temperature-receiving
(Dirichlet) participant solves first against the current interface iterate,
its output feeds the flux-receiving (Neumann) participant, and the new
interface data is accelerated and tested for convergence.  Non-converged
iterations roll both participants back to their window-start checkpoints.

The loop is driven entirely through participant sessions speaking the framed
transport protocol; in-process runs use the loopback channel so distributed
and local runs follow the identical code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .accel import AccelConfig, SecantHistory, relax, qn_solve, view_residual
from .errors import EmptyHistory, LayoutMismatch, MaxIterationsExceeded, RankDeficient
from .transport import (
    CTRL_ITERATE,
    CTRL_WINDOW_CONVERGED,
    LoopbackChannel,
    ParticipantEndpoint,
    ParticipantSession,
    ROLE_DIRICHLET,
    ROLE_NEUMANN,
)
from .waveform import SampleSet, TimeWindow, Waveform, flatten_samples

SCHEME_SC = "sc"
SCHEME_WI = "wi"


class Participant(Protocol):
    """Contract a coupled solver fulfills."""

    def checkpoint(self) -> None: ...

    def restore(self) -> None: ...

    def solve_window(self, window: TimeWindow, boundary: Waveform) -> SampleSet: ...

    def interface_size(self) -> int: ...

    def initial_output(self) -> np.ndarray: ...


@dataclass(frozen=True)
class CouplingConfig:
    """Settings of one coupled run."""

    scheme: str = SCHEME_WI
    n_dirichlet: int = 1
    n_neumann: int = 1
    degree: int = 1
    dt_window: float = 1.0
    t_end: float = 1.0
    tol_rel: float = 1e-5
    max_iterations: int = 100
    accel: AccelConfig = field(default_factory=AccelConfig)
    on_max_iterations: str = "abort"  # or "continue"
    refresh_on_convergence: bool = True
    t0: float = 0.0

    def __post_init__(self):
        if self.scheme not in (SCHEME_SC, SCHEME_WI):
            raise ValueError(f"unknown coupling scheme {self.scheme!r}")
        if self.n_dirichlet < 1 or self.n_neumann < 1:
            raise ValueError("substep counts must be positive")
        if self.scheme == SCHEME_WI and not 1 <= self.degree <= min(self.n_dirichlet, self.n_neumann):
            raise ValueError(
                f"interpolation degree {self.degree} needs "
                f"min(n_D, n_N) = {min(self.n_dirichlet, self.n_neumann)} substeps"
            )
        if not self.dt_window > 0.0:
            raise ValueError("window length must be positive")
        if not self.tol_rel > 0.0:
            raise ValueError("convergence tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration per window")
        if self.on_max_iterations not in ("abort", "continue"):
            raise ValueError(f"unknown max-iteration policy {self.on_max_iterations!r}")
        ratio = (self.t_end - self.t0) / self.dt_window
        if abs(ratio - round(ratio)) > 1e-12 * max(1.0, abs(ratio)):
            raise ValueError(
                f"t_end - t0 = {self.t_end - self.t0} is not an integer "
                f"multiple of dt_window = {self.dt_window}"
            )

    @property
    def n_windows(self) -> int:
        return round((self.t_end - self.t0) / self.dt_window)

    @property
    def n_exchanged(self) -> int:
        """Substep count of the exchanged fixed-point vector (per side of c_D)."""
        return self.n_neumann if self.scheme == SCHEME_WI else 1

    @property
    def n_flux(self) -> int:
        return self.n_dirichlet if self.scheme == SCHEME_WI else 1

    def window_of(self, idx: int) -> TimeWindow:
        return TimeWindow(self.t0 + idx * self.dt_window, self.dt_window)

    def handshake_entries(self, m: int) -> dict[str, object]:
        return {
            "scheme": self.scheme,
            "n_dirichlet": self.n_dirichlet,
            "n_neumann": self.n_neumann,
            "degree": self.degree,
            "dt_window": self.dt_window,
            "t_end": self.t_end,
            "m": m,
        }


@dataclass
class WindowReport:
    """Outcome of one coupling window."""

    window_index: int
    iterations: int
    residual_norms: list[float]
    converged: bool
    final_cd: SampleSet
    final_cn: SampleSet


def convergence_measure(new, old_flat: np.ndarray, tol_rel: float):
    """Relative measure ||new - old|| <= tol * ||new|| on flattened substeps.

    Returns (converged, residual_norm)."""
    new_flat = flatten_samples(new) if isinstance(new, SampleSet) else np.asarray(new, dtype=float)
    old_flat = np.asarray(old_flat, dtype=float)
    if new_flat.shape != old_flat.shape:
        raise LayoutMismatch(f"shapes differ: {new_flat.shape} vs {old_flat.shape}")
    norm = float(np.linalg.norm(new_flat - old_flat))
    return norm <= tol_rel * float(np.linalg.norm(new_flat)), norm


def average_iterations(reports: list[WindowReport]) -> float:
    if not reports:
        raise ValueError("no window reports")
    return float(np.mean([r.iterations for r in reports]))


def _accelerate(cfg: CouplingConfig, hist: SecantHistory, m: int,
                x_flat: np.ndarray, xt_flat: np.ndarray) -> np.ndarray:
    accel = cfg.accel
    if accel.scheme == "full":
        return xt_flat.copy()
    if accel.scheme == "relaxation":
        return relax(x_flat, xt_flat, accel.omega)
    residual = view_residual(xt_flat, x_flat, accel.residual_view, m)
    hist.append(xt_flat, residual)
    try:
        return xt_flat + qn_solve(hist, residual, accel)
    except (EmptyHistory, RankDeficient):
        return relax(x_flat, xt_flat, accel.omega)


def _new_history(cfg: CouplingConfig, m: int) -> SecantHistory:
    if cfg.accel.residual_view == "all-substeps":
        layout = [m] * cfg.n_exchanged
    else:
        layout = [m]
    return SecantHistory(block_layout=layout)


def run_window_over_sessions(dirichlet: ParticipantSession,
                             neumann: ParticipantSession,
                             cfg: CouplingConfig, window_idx: int,
                             prev_end: np.ndarray,
                             prev_flux_end: np.ndarray | None = None) -> WindowReport:
    """One window of the coupled fixed-point iteration over open sessions."""
    window = cfg.window_of(window_idx)
    m = prev_end.size
    if prev_flux_end is None:
        prev_flux_end = dirichlet.initial_data
    n_exch = cfg.n_exchanged
    times_cd = window.substep_times(n_exch)
    times_cn = window.substep_times(cfg.n_flux)

    x = np.tile(prev_end, (n_exch, 1))
    hist = _new_history(cfg, m)
    residual_norms: list[float] = []
    converged = False
    y = None

    iterations = 0
    while iterations < cfg.max_iterations:
        y = dirichlet.solve(window_idx, iterations, x)
        x_tilde = neumann.solve(window_idx, iterations, y)
        x_new_flat = _accelerate(cfg, hist, m, x.ravel(), x_tilde.ravel())
        converged, norm = convergence_measure(x_new_flat, x.ravel(), cfg.tol_rel)
        residual_norms.append(norm)
        x = x_new_flat.reshape(n_exch, m)
        iterations += 1
        if converged:
            break
        if iterations < cfg.max_iterations:
            dirichlet.control(CTRL_ITERATE)
            neumann.control(CTRL_ITERATE)

    if converged and cfg.refresh_on_convergence:
        # commit states consistent with the converged interface data: one
        # rollback + re-solve with the accepted iterate (not a coupling
        # iteration; the exchanged data is already converged)
        dirichlet.control(CTRL_ITERATE)
        neumann.control(CTRL_ITERATE)
        y = dirichlet.solve(window_idx, iterations, x)
        neumann.solve(window_idx, iterations, y)
    if converged or cfg.on_max_iterations == "continue":
        dirichlet.control(CTRL_WINDOW_CONVERGED)
        neumann.control(CTRL_WINDOW_CONVERGED)

    final_cd = SampleSet(window, times_cd, np.vstack([prev_end[None, :], x]))
    final_cn = SampleSet(window, times_cn, np.vstack([prev_flux_end[None, :], y]))
    report = WindowReport(window_idx, iterations, residual_norms, converged,
                          final_cd, final_cn)
    if not converged and cfg.on_max_iterations == "abort":
        exc = MaxIterationsExceeded(window_idx, iterations)
        exc.report = report
        raise exc
    return report


def run_all_windows(dirichlet: ParticipantSession, neumann: ParticipantSession,
                    cfg: CouplingConfig) -> list[WindowReport]:
    """All windows in order over handshaken sessions; terminates them at the end."""
    dirichlet.send_peer_initial(neumann.initial_data)
    neumann.send_peer_initial(dirichlet.initial_data)

    reports: list[WindowReport] = []
    prev_end = neumann.initial_data.copy()
    prev_flux = dirichlet.initial_data.copy()
    try:
        for w in range(cfg.n_windows):
            try:
                report = run_window_over_sessions(dirichlet, neumann, cfg, w,
                                                  prev_end, prev_flux)
            except MaxIterationsExceeded as exc:
                reports.append(exc.report)
                exc.reports = reports
                raise
            reports.append(report)
            prev_end = report.final_cd.values[-1].copy()
            prev_flux = report.final_cn.values[-1].copy()
    finally:
        dirichlet.terminate()
        neumann.terminate()
    return reports


def run_simulation_over_sessions(dirichlet: ParticipantSession,
                                 neumann: ParticipantSession,
                                 cfg: CouplingConfig) -> list[WindowReport]:
    """All windows in order; sessions must be fresh (not yet handshaken)."""
    dirichlet.handshake()
    neumann.handshake()
    return run_all_windows(dirichlet, neumann, cfg)


def make_loopback_session(participant, role: int, cfg: CouplingConfig,
                          m: int) -> ParticipantSession:
    entries = cfg.handshake_entries(m)
    endpoint = ParticipantEndpoint(participant, role, entries, cfg.scheme,
                                   cfg.degree, cfg.window_of)
    return ParticipantSession(LoopbackChannel(endpoint), entries)


def run_simulation(dirichlet: Participant, neumann: Participant,
                   cfg: CouplingConfig) -> list[WindowReport]:
    """Run all coupling windows in-process (loopback transport).

    Participants are mutated in place; their states after the call are the
    final converged window-end states."""
    m = neumann.interface_size()
    d_session = make_loopback_session(dirichlet, ROLE_DIRICHLET, cfg, m)
    n_session = make_loopback_session(neumann, ROLE_NEUMANN, cfg, m)
    return run_simulation_over_sessions(d_session, n_session, cfg)


def run_window(dirichlet: Participant, neumann: Participant,
               cfg: CouplingConfig, c_d_init: Waveform,
               window_idx: int = 0) -> WindowReport:
    """Run a single window in-process, starting from the given initial guess."""
    m = neumann.interface_size()
    d_session = make_loopback_session(dirichlet, ROLE_DIRICHLET, cfg, m)
    n_session = make_loopback_session(neumann, ROLE_NEUMANN, cfg, m)
    d_session.handshake()
    n_session.handshake()
    d_session.send_peer_initial(n_session.initial_data)
    n_session.send_peer_initial(d_session.initial_data)
    window = cfg.window_of(window_idx)
    prev_end = np.asarray(c_d_init.eval(window.end()), dtype=float)
    try:
        return run_window_over_sessions(d_session, n_session, cfg, window_idx, prev_end)
    finally:
        d_session.terminate()
        n_session.terminate()
