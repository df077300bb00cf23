import numpy as np
import pytest

from wfcpl.accel import AccelConfig
from wfcpl.errors import MaxIterationsExceeded
from wfcpl.heat import HeatParticipant, ManufacturedSolution
from wfcpl.orchestrator import (
    CouplingConfig,
    average_iterations,
    convergence_measure,
    run_simulation,
    run_window,
)
from wfcpl.waveform import TimeWindow, constant_extrapolation


class AffineParticipant:
    """Instrumented black box: output(t) = gain * boundary(t) + offset.

    Records call order and the boundary values it consumed, which makes the
    Gauss-Seidel ordering and the checkpoint/rollback protocol observable.
    """

    def __init__(self, name, gain, offset, n_substeps, m=1, log=None):
        self.name = name
        self.gain = gain
        self.offset = offset
        self.n_substeps = n_substeps
        self.m = m
        self.log = log if log is not None else []
        self.checkpoints = 0
        self.restores = 0
        self.solves_since_checkpoint = 0

    def interface_size(self):
        return self.m

    def initial_output(self):
        return np.full(self.m, self.offset)

    def checkpoint(self):
        self.checkpoints += 1
        self.solves_since_checkpoint = 0

    def restore(self):
        self.restores += 1
        self.solves_since_checkpoint = 0

    def solve_window(self, window, boundary):
        from wfcpl.waveform import SampleSet

        self.solves_since_checkpoint += 1
        times = window.substep_times(self.n_substeps)
        consumed = np.array([boundary.eval(t) for t in times])
        values = self.gain * consumed + self.offset
        self.log.append((self.name, window.t_ini, consumed[1:].copy()))
        return SampleSet(window, times, values)


def coupled_pair(gain_d=0.4, gain_n=0.5, n_d=2, n_n=2):
    log = []
    d = AffineParticipant("D", gain_d, 1.0, n_d, log=log)
    n = AffineParticipant("N", gain_n, 1.0, n_n, log=log)
    return d, n, log


def wi_config(**kw):
    base = dict(scheme="wi", n_dirichlet=2, n_neumann=2, degree=1, dt_window=1.0,
                t_end=1.0, tol_rel=1e-10, max_iterations=100,
                accel=AccelConfig("full"))
    base.update(kw)
    return CouplingConfig(**base)


class TestConvergenceMeasure:
    def test_identical_vectors_converge_at_any_tolerance(self):
        ok, norm = convergence_measure(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 1e-300)
        assert ok and norm == 0.0

    def test_boundary_case(self):
        ok, norm = convergence_measure(np.array([2.0]), np.array([1.0]), 0.5)
        assert ok and norm == 1.0

    def test_scale_invariance(self):
        a_new, a_old = np.array([2.0, 1.0]), np.array([1.9, 1.1])
        for tol in (1e-3, 0.05, 0.2):
            ok1, _ = convergence_measure(a_new, a_old, tol)
            ok2, _ = convergence_measure(10 * a_new, 10 * a_old, tol)
            assert ok1 == ok2


class TestAverageIterations:
    def test_mean(self):
        reports = run_simulation(*coupled_pair()[:2], wi_config(t_end=2.0))
        assert average_iterations(reports) == pytest.approx(
            np.mean([r.iterations for r in reports]))

    def test_values(self):
        class R:
            def __init__(self, its):
                self.iterations = its

        assert average_iterations([R(4), R(6)]) == 5.0
        assert average_iterations([R(7)]) == 7.0
        with pytest.raises(ValueError):
            average_iterations([])


class TestRunWindowLoop:
    def test_contraction_converges_with_decreasing_residuals(self):
        d, n, _ = coupled_pair()
        reports = run_simulation(d, n, wi_config())
        r = reports[0]
        assert r.converged
        assert all(b < a for a, b in zip(r.residual_norms, r.residual_norms[1:]))

    def test_huge_tolerance_stops_after_one_iteration(self):
        d, n, _ = coupled_pair()
        reports = run_simulation(d, n, wi_config(tol_rel=1e9))
        assert reports[0].iterations == 1
        assert reports[0].converged

    def test_gauss_seidel_ordering(self):
        d, n, log = coupled_pair()
        cfg = wi_config(refresh_on_convergence=False)
        run_simulation(d, n, cfg)
        names = [entry[0] for entry in log]
        assert names == ["D", "N"] * (len(names) // 2)
        # the flux side consumes the waveform built from this iteration's
        # Dirichlet output: gain_d * (boundary consumed by D) + offset_d
        for (dn, _, d_in), (nn, _, n_in) in zip(log[::2], log[1::2]):
            expected = d.gain * d_in + d.offset
            assert n_in == pytest.approx(expected, abs=1e-12)

    def test_rollback_between_iterations(self):
        d, n, _ = coupled_pair()
        cfg = wi_config(refresh_on_convergence=False)
        reports = run_simulation(d, n, cfg)
        iterations = reports[0].iterations
        assert d.checkpoints == 1
        assert d.restores == iterations - 1
        assert d.solves_since_checkpoint == 1

    def test_window_chaining_uses_constant_extrapolation(self):
        d, n, log = coupled_pair()
        cfg = wi_config(t_end=3.0, refresh_on_convergence=False)
        reports = run_simulation(d, n, cfg)
        for w in (1, 2):
            prev_end = reports[w - 1].final_cd.values[-1]
            first_d_entry = next(e for e in log if e[0] == "D" and e[1] == float(w))
            assert first_d_entry[2] == pytest.approx(
                np.tile(prev_end, (d.n_substeps, 1)), abs=1e-13)

    def test_window_count(self):
        d, n, _ = coupled_pair()
        reports = run_simulation(d, n, wi_config(dt_window=0.5, t_end=10.0))
        assert len(reports) == 20
        d, n, _ = coupled_pair()
        reports = run_simulation(d, n, wi_config(dt_window=1.0, t_end=1.0))
        assert len(reports) == 1

    def test_run_window_with_initial_waveform(self):
        d, n, _ = coupled_pair()
        init = constant_extrapolation(np.array([2.0]), TimeWindow(0.0, 1.0))
        report = run_window(d, n, wi_config(), init)
        assert report.converged
        # fixed point of x = g_n (g_d x + b_d) + b_n = 0.2 x + 1.5 -> 1.875
        assert report.final_cd.values[-1] == pytest.approx([1.875], abs=1e-8)

    def test_divergent_fullfp_aborts_by_default(self):
        d, n, _ = coupled_pair(gain_d=1.5, gain_n=-1.0)
        with pytest.raises(MaxIterationsExceeded) as err:
            run_simulation(d, n, wi_config(max_iterations=20))
        assert err.value.reports[0].iterations == 20
        assert not err.value.reports[0].converged

    def test_divergent_fullfp_continues_when_configured(self):
        d, n, _ = coupled_pair(gain_d=1.5, gain_n=-1.0)
        cfg = wi_config(max_iterations=15, on_max_iterations="continue", t_end=2.0)
        reports = run_simulation(d, n, cfg)
        assert [r.iterations for r in reports] == [15, 15]
        assert not any(r.converged for r in reports)


class TestConfigValidation:
    def test_degree_needs_substeps(self):
        with pytest.raises(ValueError):
            wi_config(n_dirichlet=1, n_neumann=3, degree=2)

    def test_t_end_must_be_window_multiple(self):
        with pytest.raises(ValueError):
            wi_config(dt_window=0.3, t_end=1.0)

    def test_positive_parameters(self):
        with pytest.raises(ValueError):
            wi_config(tol_rel=0.0)
        with pytest.raises(ValueError):
            wi_config(max_iterations=0)
        with pytest.raises(ValueError):
            wi_config(dt_window=-1.0)


class TestSchemeEquivalences:
    def test_sc_equals_wi_for_single_substep_ie(self):
        # with one substep per side and degree 1, interpolation is irrelevant
        # to the solvers' end-of-window inputs
        msol = ManufacturedSolution("tri")
        ends = {}
        for scheme, view in (("sc", "end-value"), ("wi", "all-substeps")):
            d = HeatParticipant("dirichlet", 1, "ie", msol)
            n = HeatParticipant("neumann", 1, "ie", msol)
            cfg = CouplingConfig(scheme, 1, 1, 1, 0.5, 1.0, 1e-12, 100,
                                 AccelConfig("qn", 0.5, 1e-3, "residual-sum", view))
            reports = run_simulation(d, n, cfg)
            ends[scheme] = np.array([r.final_cd.values[-1] for r in reports])
        assert ends["sc"] == pytest.approx(ends["wi"], rel=1e-12, abs=1e-12)

    def test_repeat_run_is_bit_identical(self):
        msol = ManufacturedSolution("tri")
        outs = []
        for _ in range(2):
            d = HeatParticipant("dirichlet", 3, "ie", msol)
            n = HeatParticipant("neumann", 2, "ie", msol)
            cfg = CouplingConfig("wi", 3, 2, 1, 0.5, 1.0, 1e-8, 100,
                                 AccelConfig("qn"))
            reports = run_simulation(d, n, cfg)
            outs.append((tuple(tuple(r.residual_norms) for r in reports),
                         b"".join(r.final_cd.values.tobytes() for r in reports)))
        assert outs[0] == outs[1]
