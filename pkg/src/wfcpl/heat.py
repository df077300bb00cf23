"""Finite-difference participants for the partitioned 2D heat equation.

The unit square [0,1]x[0,1] (temperature-receiving side) and [1,2]x[0,1]
(flux-receiving side) are discretized with the 5-point Laplacian on a
uniform node grid.  The manufactured solution

    u(x, y, t) = 1 + g(t) x^2 + 3 y^2 + 1.2 t

is quadratic in space, so the stencil, the one-sided flux extraction, and
the ghost-node flux closure are all spatially exact; time-integration error
is the only error mechanism.  Implicit Euler, the trapezoidal rule, and an
implicit-Euler-preconditioned spectral deferred correction scheme on the
three Gauss-Lobatto nodes {t, t+dt/2, t+dt} are available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import LinearSolveFailure, WrongSide
from .waveform import SampleSet, TimeWindow, Waveform

SIDE_DIRICHLET = "dirichlet"
SIDE_NEUMANN = "neumann"
SIDE_MONOLITHIC = "monolithic"

#: Quadrature of the interpolating quadratic over the two half-intervals of
#: the Gauss-Lobatto node set {t, t+dt/2, t+dt}, in units of dt/24.
SDC_W_FIRST = np.array([5.0, 8.0, -1.0]) / 24.0
SDC_W_SECOND = np.array([-1.0, 8.0, 5.0]) / 24.0


@dataclass(frozen=True)
class ManufacturedSolution:
    """Time profile g(t) of the manufactured solution; polynomial or sine."""

    kind: str = "tri"  # "pol" or "tri"
    alpha: int = 1

    def __post_init__(self):
        if self.kind not in ("pol", "tri"):
            raise ValueError(f"unknown manufactured solution kind {self.kind!r}")
        if self.kind == "pol" and self.alpha < 1:
            raise ValueError(f"alpha must be a positive integer, got {self.alpha}")

    def g(self, t: float) -> float:
        if self.kind == "pol":
            return (1.0 + t) ** self.alpha
        return math.sin(t)

    def dg(self, t: float) -> float:
        if self.kind == "pol":
            return self.alpha * (1.0 + t) ** (self.alpha - 1)
        return math.cos(t)


def u_exact(x, y, t: float, msol: ManufacturedSolution):
    """Manufactured temperature field 1 + g(t) x^2 + 3 y^2 + 1.2 t."""
    return 1.0 + msol.g(t) * np.asarray(x) ** 2 + 3.0 * np.asarray(y) ** 2 + 1.2 * t


def source_f(x, y, t: float, msol: ManufacturedSolution):
    """Heat source making u_exact solve du/dt = lap(u) + f."""
    del y
    return msol.dg(t) * np.asarray(x) ** 2 + 1.2 - 2.0 * msol.g(t) - 6.0


class HeatParticipant:
    """One subdomain solver fulfilling the coupling participant contract.

    The temperature-receiving side ("dirichlet", x in [0,1]) consumes a
    temperature waveform on the interface x=1 and produces heat-flux samples;
    the flux-receiving side ("neumann", x in [1,2]) consumes a flux waveform
    and produces temperature samples.  The "monolithic" side covers [0,2]
    with pure Dirichlet data everywhere (reference use only).
    """

    def __init__(self, side: str, n_substeps: int, integrator: str = "ie",
                 msol: ManufacturedSolution | None = None, h: float = 0.05,
                 sdc_sweeps: int = 48, t0: float = 0.0):
        if side not in (SIDE_DIRICHLET, SIDE_NEUMANN, SIDE_MONOLITHIC):
            raise ValueError(f"unknown side {side!r}")
        if integrator not in ("ie", "tr", "sdc"):
            raise ValueError(f"unknown integrator {integrator!r}")
        if n_substeps < 1:
            raise ValueError("need at least one substep per window")
        self.side = side
        self.integrator = integrator
        self.n_substeps = n_substeps
        self.sdc_sweeps = sdc_sweeps
        self.msol = msol if msol is not None else ManufacturedSolution()

        ny = round(1.0 / h) + 1
        nx = 2 * ny - 1 if side == SIDE_MONOLITHIC else ny
        self.h = h
        self.nx, self.ny = nx, ny
        x0 = 1.0 if side == SIDE_NEUMANN else 0.0
        self.xs = x0 + h * np.arange(nx)
        self.ys = h * np.arange(ny)

        self._build_index_maps()
        self._build_operator()
        self._factor_cache: dict[float, object] = {}

        self.t = t0
        self.u = u_exact(self.xs[:, None], self.ys[None, :], t0, self.msol)
        self._checkpoint: tuple[np.ndarray, float] | None = None
        # per-substep (time, subdomain L2 error) of the most recent solve,
        # and the log of converged windows (committed by the caller)
        self.last_solve_errors: list[tuple[float, float]] = []
        self.error_log: list[list[tuple[float, float]]] = []

    # -- grid/operator setup --------------------------------------------

    def _build_index_maps(self):
        nx, ny = self.nx, self.ny
        unknown = np.zeros((nx, ny), dtype=bool)
        unknown[1:-1, 1:-1] = True
        if self.side == SIDE_NEUMANN:
            unknown[0, 1:-1] = True  # interface column carries flux closure
        self.unknown_mask = unknown
        self.index = -np.ones((nx, ny), dtype=int)
        self.index[unknown] = np.arange(unknown.sum())
        self.n_unknowns = int(unknown.sum())
        ux, uy = np.nonzero(unknown)
        self.unknown_x = self.xs[ux]
        self.unknown_y = self.ys[uy]
        self._ux, self._uy = ux, uy

    def _build_operator(self):
        """5-point Laplacian over unknowns plus boundary contribution lists."""
        h2 = self.h * self.h
        rows, cols, vals = [], [], []
        exact_rows, exact_x, exact_y, exact_coef = [], [], [], []
        temp_rows, temp_iy = [], []
        flux_rows, flux_iy = [], []

        interface_col = self.nx - 1 if self.side == SIDE_DIRICHLET else None
        for ix, iy in zip(self._ux, self._uy):
            row = self.index[ix, iy]
            diag = 0.0
            if self.side == SIDE_NEUMANN and ix == 0:
                # ghost closure: lap_x = 2(u_east - u_c)/h^2 - 2 q / h
                rows.append(row)
                cols.append(self.index[1, iy])
                vals.append(2.0 / h2)
                diag -= 2.0 / h2
                flux_rows.append(row)
                flux_iy.append(iy)
            else:
                for jx in (ix - 1, ix + 1):
                    diag -= 1.0 / h2
                    if self.index[jx, iy] >= 0:
                        rows.append(row)
                        cols.append(self.index[jx, iy])
                        vals.append(1.0 / h2)
                    elif jx == interface_col and 0 < iy < self.ny - 1:
                        temp_rows.append(row)
                        temp_iy.append(iy)
                    else:
                        exact_rows.append(row)
                        exact_x.append(self.xs[jx])
                        exact_y.append(self.ys[iy])
                        exact_coef.append(1.0 / h2)
            for jy in (iy - 1, iy + 1):
                diag -= 1.0 / h2
                if self.index[ix, jy] >= 0:
                    rows.append(row)
                    cols.append(self.index[ix, jy])
                    vals.append(1.0 / h2)
                else:
                    exact_rows.append(row)
                    exact_x.append(self.xs[ix])
                    exact_y.append(self.ys[jy])
                    exact_coef.append(1.0 / h2)
            rows.append(row)
            cols.append(row)
            vals.append(diag)

        n = self.n_unknowns
        self.L = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self._exact_rows = np.asarray(exact_rows, dtype=int)
        self._exact_x = np.asarray(exact_x)
        self._exact_y = np.asarray(exact_y)
        self._exact_coef = np.asarray(exact_coef)
        self._temp_rows = np.asarray(temp_rows, dtype=int)
        self._temp_iy = np.asarray(temp_iy, dtype=int)
        self._flux_rows = np.asarray(flux_rows, dtype=int)
        self._flux_iy = np.asarray(flux_iy, dtype=int)

        bx = ~self.unknown_mask
        self._bnd_ix, self._bnd_iy = np.nonzero(bx)
        if self.side == SIDE_DIRICHLET:
            on_interface = (self._bnd_ix == self.nx - 1) & \
                (self._bnd_iy > 0) & (self._bnd_iy < self.ny - 1)
            self._bnd_interface = on_interface
        else:
            self._bnd_interface = np.zeros(len(self._bnd_ix), dtype=bool)

    def _boundary_term(self, t: float, wave: Waveform | None) -> np.ndarray:
        """Boundary contributions b(t) of the semi-discrete system du/dt = L u + b + f."""
        b = np.zeros(self.n_unknowns)
        if len(self._exact_rows):
            vals = u_exact(self._exact_x, self._exact_y, t, self.msol)
            np.add.at(b, self._exact_rows, self._exact_coef * vals)
        if wave is None:
            if len(self._temp_rows) or len(self._flux_rows):
                raise LinearSolveFailure("coupled side stepped without boundary data")
            return b
        w = wave.eval(t)
        if len(self._temp_rows):
            np.add.at(b, self._temp_rows, w[self._temp_iy] / (self.h * self.h))
        if len(self._flux_rows):
            np.add.at(b, self._flux_rows, -2.0 * w[self._flux_iy] / self.h)
        return b

    def _source_term(self, t: float) -> np.ndarray:
        return source_f(self.unknown_x, self.unknown_y, t, self.msol)

    def _rhs_of_t(self, t: float, wave: Waveform | None) -> np.ndarray:
        return self._boundary_term(t, wave) + self._source_term(t)

    def _solver_for(self, coeff: float):
        lu = self._factor_cache.get(coeff)
        if lu is None:
            A = (sp.identity(self.n_unknowns, format="csr") - coeff * self.L).tocsc()
            try:
                lu = splu(A)
            except RuntimeError as exc:  # pragma: no cover - singular system
                raise LinearSolveFailure(str(exc)) from exc
            self._factor_cache[coeff] = lu
        return lu

    def _write_state(self, v: np.ndarray, t: float, wave: Waveform | None):
        self.u[self.unknown_mask] = v
        bx, by = self._bnd_ix, self._bnd_iy
        vals = u_exact(self.xs[bx], self.ys[by], t, self.msol)
        if wave is not None and self._bnd_interface.any():
            w = wave.eval(t)
            vals = vals.copy()
            vals[self._bnd_interface] = w[by[self._bnd_interface]]
        self.u[bx, by] = vals
        self.t = t

    # -- time integrators ------------------------------------------------

    def step_ie(self, dt: float, wave: Waveform | None, t_new: float | None = None):
        """One implicit Euler step; exact for solutions linear in time."""
        t_new = self.t + dt if t_new is None else t_new
        v = self.u[self.unknown_mask]
        rhs = v + dt * self._rhs_of_t(t_new, wave)
        v_new = self._solver_for(dt).solve(rhs)
        self._write_state(v_new, t_new, wave)

    def step_tr(self, dt: float, wave: Waveform | None, t_new: float | None = None):
        """One trapezoidal step; exact for solutions quadratic in time."""
        t_old = self.t
        t_new = self.t + dt if t_new is None else t_new
        v = self.u[self.unknown_mask]
        rhs = v + 0.5 * dt * (self.L @ v + self._rhs_of_t(t_old, wave)) \
            + 0.5 * dt * self._rhs_of_t(t_new, wave)
        v_new = self._solver_for(0.5 * dt).solve(rhs)
        self._write_state(v_new, t_new, wave)

    def step_sdc(self, dt: float, wave: Waveform | None, sweeps: int | None = None,
                 t_new: float | None = None):
        """One SDC step on the Gauss-Lobatto nodes {t, t+dt/2, t+dt}.

        The provisional solution is two implicit Euler substeps; each sweep
        applies the IE-preconditioned correction with the spectral quadrature
        of the quadratic collocation polynomial.  Exact for solutions cubic
        in time once the sweeps have converged.
        """
        K = self.sdc_sweeps if sweeps is None else sweeps
        t0 = self.t
        t_new = t0 + dt if t_new is None else t_new
        tau = (t0, t0 + 0.5 * dt, t_new)
        dtau = 0.5 * dt
        lu = self._solver_for(dtau)
        rhs_t = [self._rhs_of_t(ti, wave) for ti in tau]

        v0 = self.u[self.unknown_mask]
        f0 = self.L @ v0 + rhs_t[0]
        v1 = lu.solve(v0 + dtau * rhs_t[1])
        f1 = self.L @ v1 + rhs_t[1]
        v2 = lu.solve(v1 + dtau * rhs_t[2])
        f2 = self.L @ v2 + rhs_t[2]

        for _ in range(K):
            i01 = dt * (SDC_W_FIRST[0] * f0 + SDC_W_FIRST[1] * f1 + SDC_W_FIRST[2] * f2)
            i12 = dt * (SDC_W_SECOND[0] * f0 + SDC_W_SECOND[1] * f1 + SDC_W_SECOND[2] * f2)
            v1_new = lu.solve(v0 + i01 - dtau * f1 + dtau * rhs_t[1])
            f1 = self.L @ v1_new + rhs_t[1]
            v2_new = lu.solve(v1_new + i12 - dtau * f2 + dtau * rhs_t[2])
            f2 = self.L @ v2_new + rhs_t[2]
            # stop once the sweep fixed point is reached to machine precision
            delta = max(np.max(np.abs(v1_new - v1)), np.max(np.abs(v2_new - v2)))
            scale = 1.0 + max(np.max(np.abs(v1_new)), np.max(np.abs(v2_new)))
            v1, v2 = v1_new, v2_new
            if delta <= 1e-15 * scale:
                break

        self._write_state(v2, tau[2], wave)

    def _step(self, dt: float, wave: Waveform | None, t_new: float):
        if self.integrator == "ie":
            self.step_ie(dt, wave, t_new)
        elif self.integrator == "tr":
            self.step_tr(dt, wave, t_new)
        else:
            self.step_sdc(dt, wave, t_new=t_new)

    # -- participant contract --------------------------------------------

    def interface_size(self) -> int:
        return self.ny

    def checkpoint(self):
        self._checkpoint = (self.u.copy(), self.t)

    def restore(self):
        if self._checkpoint is None:
            raise LinearSolveFailure("restore() without a prior checkpoint()")
        u, t = self._checkpoint
        self.u = u.copy()
        self.t = t

    def solve_window(self, window: TimeWindow, boundary: Waveform | None) -> SampleSet:
        """Integrate the window against the boundary waveform.

        Returns this side's output samples (flux for the temperature-receiving
        side, temperature for the flux-receiving side) at the n+1 substep
        times, the first being the current state's output at t_ini.
        """
        times = window.substep_times(self.n_substeps)
        dt = window.dt_window / self.n_substeps
        outputs = [self.output_values()]
        self.last_solve_errors = []
        for i in range(1, len(times)):
            self._step(dt, boundary, times[i])
            outputs.append(self.output_values())
            self.last_solve_errors.append((self.t, self.l2_error(self.t)))
        return SampleSet(window, times, np.asarray(outputs))

    def output_values(self) -> np.ndarray:
        if self.side == SIDE_DIRICHLET:
            return self.extract_interface_flux()
        if self.side == SIDE_NEUMANN:
            return self.extract_interface_temperature()
        # monolithic reference: temperature along x=1 for comparisons
        return self.u[self.ny - 1, :].copy()

    def initial_output(self) -> np.ndarray:
        return self.output_values()

    def on_window_converged(self):
        """Commit the most recent solve's error samples as a converged window."""
        self.error_log.append(list(self.last_solve_errors))

    # -- interface extraction and diagnostics -----------------------------

    def extract_interface_temperature(self) -> np.ndarray:
        """Nodal temperature on x=1, ordered by increasing y."""
        if self.side != SIDE_NEUMANN:
            raise WrongSide("temperature is extracted from the flux-receiving side")
        return self.u[0, :].copy()

    def extract_interface_flux(self) -> np.ndarray:
        """du/dx at x=1 by the one-sided stencil (3u_i - 4u_{i-1} + u_{i-2}) / 2h."""
        if self.side != SIDE_DIRICHLET:
            raise WrongSide("flux is extracted from the temperature-receiving side")
        return (3.0 * self.u[-1, :] - 4.0 * self.u[-2, :] + self.u[-3, :]) / (2.0 * self.h)

    def l2_error(self, t: float | None = None) -> float:
        """Discrete L2 error against u_exact on this subdomain (trapezoidal weights)."""
        t = self.t if t is None else t
        diff = self.u - u_exact(self.xs[:, None], self.ys[None, :], t, self.msol)
        wx = np.ones(self.nx)
        wx[0] = wx[-1] = 0.5
        wy = np.ones(self.ny)
        wy[0] = wy[-1] = 0.5
        return math.sqrt(self.h * self.h * np.sum(wx[:, None] * wy[None, :] * diff * diff))


def combined_l2_error(dirichlet: HeatParticipant, neumann: HeatParticipant,
                      t: float | None = None) -> float:
    """Total-domain error: sqrt of the summed squared subdomain errors."""
    ed = dirichlet.l2_error(t)
    en = neumann.l2_error(t)
    return math.sqrt(ed * ed + en * en)
