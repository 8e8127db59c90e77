"""
Dense convex quadratic programming.

Problems have the form

    minimize    1/2 x' Q x + c' x
    subject to  A_eq x  = b_eq
                G_in x <= h_in

and are solved with a primal-dual interior point method (Mehrotra
predictor-corrector).  Both portfolio criteria compile down to this form, so
the solver is small, dense and tuned for a few hundred variables.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

PSD_TOL = 1e-8
SYM_TOL = 1e-10


class QpBuildError(ValueError):
    """Raised when a quadratic program has inconsistent dimensions."""


@dataclass
class QuadraticProgram:
    Q: np.ndarray
    c: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    G_in: Optional[np.ndarray] = None
    h_in: Optional[np.ndarray] = None
    variable_names: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        n = self.c.shape[0]
        if self.Q.shape != (n, n):
            raise QpBuildError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if not np.allclose(self.Q, self.Q.T, atol=SYM_TOL, rtol=0.0):
            raise QpBuildError("Q is not symmetric")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "equality")
        self.G_in, self.h_in = _rows(self.G_in, self.h_in, n, "inequality")
        if self.variable_names is not None and len(self.variable_names) != n:
            raise QpBuildError("variable_names length does not match c")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.Q @ x + self.c @ x)


def _rows(M, v, n, what):
    if M is None or v is None:
        if (M is None) != (v is None):
            raise QpBuildError(f"{what} matrix and right-hand side must be given together")
        return np.zeros((0, n)), np.zeros(0)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if M.shape[0] == 0:
        M = M.reshape(0, n)
    if M.shape[1] != n or M.shape[0] != v.shape[0]:
        raise QpBuildError(f"{what} system has shape {M.shape} / {v.shape}, n={n}")
    return M, v


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: str
    kkt_residual: float
    iterations: int = 0
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _psd_clip(Q):
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    if w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise QpBuildError(f"Q is not positive semidefinite (min eigenvalue {w.min():.3e})")
    if w.min() >= 0.0:
        return 0.5 * (Q + Q.T)
    return (V * np.clip(w, 0.0, None)) @ V.T


def _independent_rows(A, b, tol=1e-10):
    """Drop linearly dependent equality rows; returns None if they are inconsistent."""
    if A.shape[0] == 0:
        return A, b
    _, R, piv = sla.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(1.0, diag.max())))
    if rank == A.shape[0]:
        return A, b
    keep = np.sort(piv[:rank])
    A_k, b_k = A[keep], b[keep]
    # the dropped rows must be implied by the kept ones
    coef, *_ = np.linalg.lstsq(A_k.T, A.T, rcond=None)
    if np.max(np.abs(coef.T @ b_k - b)) > 1e-9 * max(1.0, np.abs(b).max()):
        return None
    return A_k, b_k


def solve_qp(
    qp: QuadraticProgram,
    feas_tol: float = 1e-8,
    opt_tol: float = 1e-8,
    max_iter: int = 50000,
) -> QpSolution:
    """
    Solve a convex QP with a Mehrotra predictor-corrector interior point method.

    Parameters
    ----------
    qp : QuadraticProgram
        Problem data. ``Q`` must be positive semidefinite up to ``1e-8``;
        small negative eigenvalues are clipped.
    feas_tol : float
        Absolute tolerance on equality and inequality residuals.
    opt_tol : float
        Absolute tolerance on the stationarity residual and on the mean
        complementarity product.
    max_iter : int
        Iteration cap.

    Returns
    -------
    QpSolution
        ``status`` is ``"optimal"``, ``"infeasible"`` (a Farkas certificate was
        found, or the equality system is inconsistent) or ``"max_iter"``.
    """
    Q = _psd_clip(qp.Q)
    c = qp.c
    n = qp.n
    reduced = _independent_rows(qp.A_eq, qp.b_eq)
    if reduced is None:
        return QpSolution(np.full(n, np.nan), np.nan, INFEASIBLE, np.inf)
    A, b = reduced
    G, h = qp.G_in, qp.h_in
    m = G.shape[0]

    # starting point: least squares fit of the equalities, slacks pushed positive
    K0 = Q + G.T @ G + 1e-8 * np.eye(n)
    x, y = _solve_saddle(K0, A, -c + G.T @ h, b)
    s = h - G @ x
    if m:
        shift = max(0.0, -s.min()) + 1.0
        s = s + shift
    z = np.ones(m)

    best = None
    stall = 0
    it = 0
    for it in range(1, max_iter + 1):
        r_d = Q @ x + c + A.T @ y + G.T @ z
        r_p = A @ x - b
        r_i = G @ x + s - h
        mu = float(s @ z) / m if m else 0.0
        res = max(
            np.abs(r_p).max(initial=0.0),
            np.abs(r_i).max(initial=0.0),
            np.abs(r_d).max(initial=0.0),
            mu,
        )
        if (
            np.abs(r_p).max(initial=0.0) <= feas_tol
            and np.abs(r_i).max(initial=0.0) <= feas_tol
            and np.abs(r_d).max(initial=0.0) <= opt_tol
            and mu <= 1e-2 * opt_tol
        ):
            return _finish(qp, x, y, z, OPTIMAL, res, it)
        if m and _farkas(A, b, G, h, y, z):
            return QpSolution(x, qp.objective(x), INFEASIBLE, res, it, y, z)
        if best is None or res < 0.5 * best:
            best, stall = res, 0
        else:
            stall += 1
            if stall > 60:
                break

        W = z / s if m else np.zeros(0)
        K = Q + (G.T * W) @ G
        try:
            chol = sla.cho_factor(K + 1e-13 * np.eye(n), check_finite=False)
        except (np.linalg.LinAlgError, sla.LinAlgError):
            chol = None

        def newton(r_c):
            rhs_x = -r_d - G.T @ (W * r_i - r_c / s) if m else -r_d
            dx, dy = _solve_saddle(K, A, rhs_x, -r_p, chol)
            dz = W * (G @ dx + r_i) - r_c / s if m else np.zeros(0)
            ds = -r_i - G @ dx
            return dx, dy, dz, ds

        if m == 0:
            dx, dy, _, _ = newton(np.zeros(0))
            x, y = x + dx, y + dy
            continue

        # predictor
        dx, dy, dz, ds = newton(s * z)
        a_aff = min(1.0, _max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dx, dy, dz, ds = newton(s * z + ds * dz - sigma * mu)
        a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x, y, z, s = x + a * dx, y + a * dy, z + a * dz, s + a * ds
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            break

    r_d = Q @ x + c + A.T @ y + G.T @ z
    res = max(np.abs(r_d).max(initial=0.0), np.abs(A @ x - b).max(initial=0.0))
    if m and _farkas(A, b, G, h, y, z, strict=False):
        return QpSolution(x, qp.objective(x), INFEASIBLE, res, it, y, z)
    return QpSolution(x, qp.objective(x), MAX_ITER, res, it, y, z)


def _finish(qp, x, y, z, status, res, it):
    return QpSolution(x, qp.objective(x), status, res, it, y, z)


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _solve_saddle(K, A, rx, ry, chol=None):
    """Solve [[K, A'], [A, 0]] [x; y] = [rx; ry]."""
    p = A.shape[0]
    if chol is None:
        try:
            chol = sla.cho_factor(K, check_finite=False)
        except (np.linalg.LinAlgError, sla.LinAlgError):
            n = K.shape[0]
            M = np.block([[K, A.T], [A, np.zeros((p, p))]])
            sol = np.linalg.lstsq(M, np.concatenate([rx, ry]), rcond=None)[0]
            return sol[:n], sol[n:]
    if p == 0:
        return sla.cho_solve(chol, rx, check_finite=False), np.zeros(0)
    KiA = sla.cho_solve(chol, A.T, check_finite=False)
    Kir = sla.cho_solve(chol, rx, check_finite=False)
    S = A @ KiA
    y = np.linalg.solve(S, A @ Kir - ry)
    x = Kir - KiA @ y
    return x, y


def _farkas(A, b, G, h, y, z, strict=True):
    # infeasibility certificate: A'y + G'z = 0, z >= 0, b'y + h'z < 0
    scale = max(np.abs(y).max(initial=0.0), np.abs(z).max(initial=0.0))
    if scale < (1e6 if strict else 1e3):
        return False
    yy, zz = y / scale, z / scale
    resid = np.abs(A.T @ yy + G.T @ zz).max(initial=0.0)
    gap = float(b @ yy + h @ zz)
    return resid < 1e-6 and gap < -1e-6
