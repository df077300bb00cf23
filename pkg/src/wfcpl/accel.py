"""Acceleration of the per-window interface fixed-point iteration.

Implements plain fixed-point iteration, constant underrelaxation, and the
quasi-Newton least-squares update built from difference columns of past
iterates.  The quasi-Newton solve is matrix-free: the approximate inverse
Jacobian is never formed; instead a small least-squares problem

    alpha = argmin || V alpha + R ||_2,   dx = W alpha

is solved through an economy QR decomposition of V.  Near-dependent columns
are removed by the QR2 filter, and residual rows may be rescaled per substep
block by accumulated residual magnitudes (residual-sum weighting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DimensionChange,
    EmptyHistory,
    LayoutMismatch,
    LengthMismatch,
    RankDeficient,
)

#: Guards the residual-sum weights against division by zero for blocks that
#: are already converged.
WEIGHT_FLOOR = 1e-14

SCHEMES = ("full", "relaxation", "qn")
WEIGHTINGS = ("none", "residual-sum")
RESIDUAL_VIEWS = ("all-substeps", "last-substep", "end-value")


@dataclass(frozen=True)
class AccelConfig:
    """Acceleration settings for one coupled run.

    ``omega`` is the relaxation factor, also used as the quasi-Newton
    first-iteration fallback; ``qr2_epsilon`` is the column filter limit.
    """

    scheme: str = "qn"
    omega: float = 0.5
    qr2_epsilon: float = 1e-3
    weighting: str = "residual-sum"
    residual_view: str = "all-substeps"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown acceleration scheme {self.scheme!r}")
        if not 0.0 < self.omega <= 1.0:
            raise ValueError(f"omega must be in (0, 1], got {self.omega}")
        if not self.qr2_epsilon > 0.0:
            raise ValueError(f"qr2_epsilon must be positive, got {self.qr2_epsilon}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.residual_view not in RESIDUAL_VIEWS:
            raise ValueError(f"unknown residual view {self.residual_view!r}")


def view_residual(full_new: np.ndarray, full_old: np.ndarray, view: str,
                  block_size: int) -> np.ndarray:
    """Residual of the viewed components of the substep vector.

    ``all-substeps`` differences the full vectors; ``last-substep`` and
    ``end-value`` keep only the final block of ``block_size`` entries.
    """
    full_new = np.asarray(full_new, dtype=float)
    full_old = np.asarray(full_old, dtype=float)
    if full_new.shape != full_old.shape:
        raise LayoutMismatch(
            f"shapes differ: {full_new.shape} vs {full_old.shape}"
        )
    if full_new.size % block_size != 0:
        raise LayoutMismatch(
            f"vector length {full_new.size} not divisible by block size {block_size}"
        )
    if view == "all-substeps":
        return full_new - full_old
    if view in ("last-substep", "end-value"):
        return full_new[-block_size:] - full_old[-block_size:]
    raise ValueError(f"unknown residual view {view!r}")


def relax(x_old: np.ndarray, h_x: np.ndarray, omega: float) -> np.ndarray:
    """Convex combination omega * H(x) + (1 - omega) * x."""
    x_old = np.asarray(x_old, dtype=float)
    h_x = np.asarray(h_x, dtype=float)
    if x_old.shape != h_x.shape:
        raise LengthMismatch(f"shapes differ: {x_old.shape} vs {h_x.shape}")
    if not 0.0 < omega <= 1.0:
        raise ValueError(f"omega must be in (0, 1], got {omega}")
    return omega * h_x + (1.0 - omega) * x_old


class SecantHistory:
    """Difference columns of past iterates within one coupling window.

    Each appended pair (x_tilde, residual) forms one new column of W and V
    relative to the previously stored pair.  The per-block residual norms
    accumulated across iterations feed the residual-sum weighting.  History
    is cleared at every new window; iterates are never reused across windows.
    """

    def __init__(self, block_layout: list[int] | None = None):
        self.V: list[np.ndarray] = []
        self.W: list[np.ndarray] = []
        self.prev_x_tilde: np.ndarray | None = None
        self.prev_residual: np.ndarray | None = None
        self.block_layout = list(block_layout) if block_layout else None
        self._block_accum: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.V)

    def append(self, x_tilde: np.ndarray, residual: np.ndarray) -> None:
        x_tilde = np.asarray(x_tilde, dtype=float).copy()
        residual = np.asarray(residual, dtype=float).copy()
        if self.prev_x_tilde is not None:
            if x_tilde.shape != self.prev_x_tilde.shape or \
                    residual.shape != self.prev_residual.shape:
                raise DimensionChange(
                    "iterate dimensions changed within one window"
                )
            self.V.append(residual - self.prev_residual)
            self.W.append(x_tilde - self.prev_x_tilde)
        self.prev_x_tilde = x_tilde
        self.prev_residual = residual
        self._accumulate(residual)

    def _accumulate(self, residual: np.ndarray) -> None:
        if self.block_layout is None:
            return
        if sum(self.block_layout) != residual.size:
            raise LayoutMismatch(
                f"block layout {self.block_layout} does not cover residual of "
                f"length {residual.size}"
            )
        norms = []
        start = 0
        for size in self.block_layout:
            norms.append(np.linalg.norm(residual[start:start + size]))
            start += size
        norms = np.asarray(norms)
        if self._block_accum is None:
            self._block_accum = norms
        else:
            self._block_accum = self._block_accum + norms

    def block_weights(self) -> np.ndarray:
        """Per-block scalars 1 / max(accumulated residual norm, floor)."""
        if self.block_layout is None or self._block_accum is None:
            raise EmptyHistory("no residuals accumulated yet")
        return 1.0 / np.maximum(self._block_accum, WEIGHT_FLOOR)


def residual_sum_weights(hist: SecantHistory) -> np.ndarray:
    return hist.block_weights()


def _row_scaling(hist: SecantHistory, cfg: AccelConfig, r: int) -> np.ndarray:
    if cfg.weighting == "none" or hist.block_layout is None:
        return np.ones(r)
    weights = hist.block_weights()
    return np.repeat(weights, hist.block_layout)


def qr2_filter(columns: list[np.ndarray], epsilon: float):
    """Drop near-dependent columns, newest to oldest, by modified Gram-Schmidt.

    A column whose orthogonal remainder against the already-accepted ones has
    norm below ``epsilon`` times its own norm is deleted.  Returns the indices
    of surviving columns (in original order) together with the economy QR
    factors of the surviving columns in that order.
    """
    kept_reversed: list[int] = []
    q_cols: list[np.ndarray] = []
    for idx in range(len(columns) - 1, -1, -1):
        v = columns[idx]
        norm_v = np.linalg.norm(v)
        u = v.copy()
        for q in q_cols:
            u -= np.dot(q, u) * q
        # one reorthogonalization pass for numerical safety
        for q in q_cols:
            u -= np.dot(q, u) * q
        norm_u = np.linalg.norm(u)
        if norm_u < epsilon * norm_v or norm_u == 0.0:
            continue
        q_cols.append(u / norm_u)
        kept_reversed.append(idx)
    kept = sorted(kept_reversed)
    if not kept:
        return kept, np.empty((0, 0)), np.empty((0, 0))
    Q, R = _mgs_qr([columns[i] for i in kept])
    return kept, Q, R


def _mgs_qr(columns: list[np.ndarray]):
    """Economy QR by modified Gram-Schmidt with one reorthogonalization pass."""
    k = len(columns)
    r_dim = columns[0].size
    Q = np.empty((r_dim, k))
    R = np.zeros((k, k))
    for j, col in enumerate(columns):
        u = col.astype(float).copy()
        for i in range(j):
            rij = np.dot(Q[:, i], u)
            u -= rij * Q[:, i]
            R[i, j] += rij
        for i in range(j):
            rij = np.dot(Q[:, i], u)
            u -= rij * Q[:, i]
            R[i, j] += rij
        R[j, j] = np.linalg.norm(u)
        if R[j, j] == 0.0:
            raise RankDeficient("exactly dependent columns survived filtering")
        Q[:, j] = u / R[j, j]
    return Q, R


def qn_solve(hist: SecantHistory, residual: np.ndarray,
             cfg: AccelConfig) -> np.ndarray:
    """Quasi-Newton update dx = W alpha with alpha = argmin ||V alpha + R||.

    Rows of V and R are rescaled by the residual-sum weights before the QR
    solve; W stays unscaled so the update lives in the original space.
    """
    if hist.k == 0:
        raise EmptyHistory("no secant columns yet; fall back to relaxation")
    residual = np.asarray(residual, dtype=float)
    scale = _row_scaling(hist, cfg, residual.size)
    scaled_v = [scale * v for v in hist.V]
    kept, Q, R = qr2_filter(scaled_v, cfg.qr2_epsilon)
    if not kept:
        raise RankDeficient("QR2 filter removed all secant columns")
    rhs = -(Q.T @ (scale * residual))
    alpha = solve_triangular(R, rhs, lower=False)
    W = np.column_stack([hist.W[i] for i in kept])
    return W @ alpha
