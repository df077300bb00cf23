import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wfcpl.accel import (
    AccelConfig,
    SecantHistory,
    WEIGHT_FLOOR,
    qn_solve,
    qr2_filter,
    relax,
    residual_sum_weights,
    view_residual,
)
from wfcpl.errors import (
    DimensionChange,
    EmptyHistory,
    LayoutMismatch,
    LengthMismatch,
    RankDeficient,
)


def qn_cfg(**kw):
    base = dict(scheme="qn", omega=0.5, qr2_epsilon=1e-3, weighting="none",
                residual_view="all-substeps")
    base.update(kw)
    return AccelConfig(**base)


class TestViewResidual:
    def test_all_substeps(self):
        r = view_residual([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], "all-substeps", 1)
        assert r.tolist() == [1.0, 2.0, 3.0]

    def test_last_substep(self):
        r = view_residual([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], "last-substep", 1)
        assert r.tolist() == [3.0]

    def test_views_coincide_for_single_substep(self):
        new = np.array([1.5, -2.0])
        old = np.array([0.5, 1.0])
        full = view_residual(new, old, "all-substeps", 2)
        last = view_residual(new, old, "last-substep", 2)
        end = view_residual(new, old, "end-value", 2)
        assert np.array_equal(full, last)
        assert np.array_equal(full, end)

    def test_layout_mismatch(self):
        with pytest.raises(LayoutMismatch):
            view_residual([1.0, 2.0, 3.0], [0.0, 0.0, 0.0], "all-substeps", 2)
        with pytest.raises(LayoutMismatch):
            view_residual([1.0, 2.0], [0.0], "all-substeps", 1)


class TestRelax:
    def test_omega_one_returns_operator_output(self):
        x = np.array([1.0, 2.0])
        h = np.array([-3.0, 4.0])
        assert np.array_equal(relax(x, h, 1.0), h)

    def test_midpoint(self):
        assert relax(np.array([0.0]), np.array([2.0]), 0.5).tolist() == [1.0]

    def test_scalar_contraction_rate(self):
        # H(x) = 0.5 x + 1 with omega = 0.5: x_{k+1} = 0.75 x_k + 0.5 -> x* = 2
        x = np.array([0.0])
        errors = []
        for _ in range(30):
            x = relax(x, 0.5 * x + 1.0, 0.5)
            errors.append(abs(x[0] - 2.0))
        assert errors[-1] < 1e-3
        ratios = [errors[i + 1] / errors[i] for i in range(10)]
        assert ratios == pytest.approx([0.75] * 10, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            relax(np.zeros(2), np.zeros(3), 0.5)


class TestSecantHistory:
    def test_first_append_stores_only_previous(self):
        hist = SecantHistory()
        hist.append(np.array([2.0]), np.array([1.0]))
        assert hist.k == 0

    def test_difference_columns(self):
        hist = SecantHistory()
        hist.append(np.array([2.0]), np.array([1.0]))
        hist.append(np.array([3.0]), np.array([0.5]))
        assert hist.k == 1
        assert hist.V[0].tolist() == [-0.5]
        assert hist.W[0].tolist() == [1.0]

    def test_three_appends_two_columns_most_recent_last(self):
        hist = SecantHistory()
        for xt, r in [(1.0, 4.0), (2.0, 2.0), (4.0, 1.0)]:
            hist.append(np.array([xt]), np.array([r]))
        assert hist.k == 2
        assert hist.V[-1].tolist() == [-1.0]
        assert hist.W[-1].tolist() == [2.0]

    def test_dimension_change_rejected(self):
        hist = SecantHistory()
        hist.append(np.zeros(2), np.zeros(2))
        with pytest.raises(DimensionChange):
            hist.append(np.zeros(3), np.zeros(2))


class TestQr2Filter:
    def test_duplicate_column_dropped(self):
        cols = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
        kept, _, _ = qr2_filter(cols, 1e-3)
        assert len(kept) == 1

    def test_orthogonal_columns_kept(self):
        cols = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        kept, Q, R = qr2_filter(cols, 0.99)
        assert kept == [0, 1]
        assert np.allclose(Q.T @ Q, np.eye(2), atol=1e-14)

    def test_near_dependent_column_dropped(self):
        # oracle: explicit Gram-Schmidt remainder of the older column against
        # the newer one has norm ~1e-4 < 1e-3 * ||v||; newest-to-oldest
        # processing keeps the most recent information
        v_old = np.array([1.0, 0.0])
        v_new = np.array([1.0, 1e-4])
        q = v_new / np.linalg.norm(v_new)
        remainder = v_old - np.dot(q, v_old) * q
        assert np.linalg.norm(remainder) < 1e-3 * np.linalg.norm(v_old)
        kept, _, _ = qr2_filter([v_old, v_new], 1e-3)
        assert kept == [1]

    def test_tiny_epsilon_is_noop(self):
        rng = np.random.default_rng(7)
        cols = [rng.standard_normal(6) for _ in range(4)]
        kept, _, _ = qr2_filter(cols, 1e-14)
        assert kept == [0, 1, 2, 3]


class TestQnSolve:
    def test_single_column_normal_equations(self):
        # alpha = -(v' R) / (v' v); v = [1, 0], R = [2, 2] -> alpha = -2
        hist = SecantHistory()
        hist.append(np.array([0.0, 0.0]), np.array([0.0, 0.0]))
        hist.append(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        dx = qn_solve(hist, np.array([2.0, 2.0]), qn_cfg())
        assert dx == pytest.approx([-2.0, -2.0], abs=1e-14)

    def test_orthonormal_columns(self):
        # with orthonormal V, alpha = -V' R
        hist = SecantHistory()
        hist.append(np.zeros(3), np.zeros(3))
        hist.append(np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
        hist.append(np.array([1.0, 1.0, 0.0]), np.array([1.0, 1.0, 0.0]))
        R = np.array([0.3, -0.7, 0.4])
        dx = qn_solve(hist, R, qn_cfg())
        expected_alpha = -np.array([R[0], R[1]])
        W = np.column_stack(hist.W)
        assert dx == pytest.approx(W @ expected_alpha, abs=1e-14)

    def test_empty_history(self):
        hist = SecantHistory()
        with pytest.raises(EmptyHistory):
            qn_solve(hist, np.zeros(2), qn_cfg())
        hist.append(np.zeros(2), np.zeros(2))
        with pytest.raises(EmptyHistory):
            qn_solve(hist, np.zeros(2), qn_cfg())

    def test_rank_deficient_after_filtering(self):
        hist = SecantHistory()
        hist.append(np.array([0.0, 0.0]), np.array([0.0, 0.0]))
        hist.append(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
        with pytest.raises(RankDeficient):
            qn_solve(hist, np.array([1.0, 1.0]), qn_cfg())

    def test_normal_equations_residual_invariant(self):
        rng = np.random.default_rng(3)
        hist = SecantHistory(block_layout=[4, 4])
        for _ in range(5):
            hist.append(rng.standard_normal(8), rng.standard_normal(8))
        R = rng.standard_normal(8)
        cfg = qn_cfg(weighting="residual-sum")
        dx = qn_solve(hist, R, cfg)
        del dx
        # check || Vf' (Vf a + Rf) || <= 1e-10 ||Rf|| on the weighted system
        w = np.repeat(residual_sum_weights(hist), [4, 4])
        Vf = np.column_stack(hist.V) * w[:, None]
        Rf = R * w
        alpha, *_ = np.linalg.lstsq(Vf, -Rf, rcond=None)
        assert np.linalg.norm(Vf.T @ (Vf @ alpha + Rf)) <= 1e-10 * np.linalg.norm(Rf)
        # and the produced update equals W alpha for that least-squares alpha
        assert qn_solve(hist, R, cfg) == pytest.approx(
            np.column_stack(hist.W) @ alpha, rel=1e-9)

    def test_filtering_with_tiny_epsilon_bit_identical(self):
        rng = np.random.default_rng(11)
        hist = SecantHistory()
        for _ in range(4):
            hist.append(rng.standard_normal(6), rng.standard_normal(6))
        R = rng.standard_normal(6)
        a = qn_solve(hist, R, qn_cfg(qr2_epsilon=1e-3))
        b = qn_solve(hist, R, qn_cfg(qr2_epsilon=1e-15))
        assert a.tobytes() == b.tobytes()


class TestResidualSumWeights:
    def test_two_blocks(self):
        hist = SecantHistory(block_layout=[1, 1])
        hist.append(np.zeros(2), np.array([2.0, 4.0]))
        assert residual_sum_weights(hist).tolist() == [0.5, 0.25]

    def test_accumulates_over_iterations(self):
        hist = SecantHistory(block_layout=[1, 1])
        hist.append(np.zeros(2), np.array([2.0, 4.0]))
        hist.append(np.zeros(2), np.array([1.0, 2.0]))
        assert residual_sum_weights(hist).tolist() == [1.0 / 3.0, 1.0 / 6.0]

    def test_floor_guards_converged_blocks(self):
        hist = SecantHistory(block_layout=[1, 1])
        hist.append(np.zeros(2), np.array([0.0, 1.0]))
        weights = residual_sum_weights(hist)
        assert weights[0] == 1.0 / WEIGHT_FLOOR

    def test_uniform_scaling_leaves_update_invariant(self):
        # all blocks with equal accumulated norms: weighting is a uniform row
        # scaling, so the least-squares solution is unchanged
        rng = np.random.default_rng(5)
        hist_w = SecantHistory(block_layout=[2, 2])
        hist_u = SecantHistory(block_layout=[2, 2])
        for _ in range(4):
            xt = rng.standard_normal(4)
            r = rng.standard_normal(4)
            r = r / np.linalg.norm(r[:2]) * np.array([1, 1, 0, 0]) + \
                np.concatenate([np.zeros(2), r[2:] / np.linalg.norm(r[2:])])
            hist_w.append(xt, r)
            hist_u.append(xt, r)
        R = rng.standard_normal(4)
        dx_w = qn_solve(hist_w, R, qn_cfg(weighting="residual-sum"))
        dx_u = qn_solve(hist_u, R, qn_cfg(weighting="none"))
        assert dx_w == pytest.approx(dx_u, rel=1e-9)

    def test_single_block_uniform(self):
        hist = SecantHistory(block_layout=[3])
        rng = np.random.default_rng(9)
        for _ in range(3):
            hist.append(rng.standard_normal(3), rng.standard_normal(3))
        R = rng.standard_normal(3)
        a = qn_solve(hist, R, qn_cfg(weighting="residual-sum"))
        b = qn_solve(hist, R, qn_cfg(weighting="none"))
        assert a == pytest.approx(b, rel=1e-10)


def run_qn_updates(A, b, tol=1e-12, max_updates=60):
    """Drive x_{k+1} = H(x_k) + QN update on linear H; count update steps
    until the observed fixed-point residual falls below tol."""
    cfg = qn_cfg(qr2_epsilon=1e-12)
    hist = SecantHistory()
    x = np.zeros(len(b))
    updates = 0
    while True:
        h = A @ x + b
        r = h - x
        if np.linalg.norm(r) < tol:
            return updates
        if updates >= max_updates:
            return None
        hist.append(h, r)
        try:
            x = h + qn_solve(hist, r, cfg)
        except (EmptyHistory, RankDeficient):
            x = relax(x, h, 0.5)
        updates += 1


class TestLinearFiniteTermination:
    def test_three_dimensional_example(self):
        A = np.diag([0.9, 0.5, 0.1])
        updates = run_qn_updates(A, np.ones(3))
        assert updates is not None and updates <= 4

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 5, 6])
    def test_dimension_bound(self, d):
        rng = np.random.default_rng(d)
        # random contraction with spectral radius below one
        M = rng.standard_normal((d, d))
        A = 0.9 * M / max(1e-9, np.max(np.abs(np.linalg.eigvals(M))))
        updates = run_qn_updates(A, rng.standard_normal(d))
        assert updates is not None and updates <= d + 1

    def test_oracle_direct_solve(self):
        A = np.diag([0.9, 0.5, 0.1])
        b = np.ones(3)
        x_star = np.linalg.solve(np.eye(3) - A, b)
        cfg = qn_cfg(qr2_epsilon=1e-12)
        hist = SecantHistory()
        x = np.zeros(3)
        for _ in range(5):
            h = A @ x + b
            r = h - x
            hist.append(h, r)
            try:
                x = h + qn_solve(hist, r, cfg)
            except EmptyHistory:
                x = relax(x, h, 0.5)
        assert x == pytest.approx(x_star, abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_column_counts_stay_equal(k, seed):
    rng = np.random.default_rng(seed)
    hist = SecantHistory()
    for _ in range(k + 1):
        hist.append(rng.standard_normal(4), rng.standard_normal(4))
    assert len(hist.V) == len(hist.W) == k
    kept, _, _ = qr2_filter(hist.V, 1e-3)
    assert all(0 <= i < k for i in kept)
