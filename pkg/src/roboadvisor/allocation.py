"""
Horizon allocation problems.

Both criteria are compiled to a single :class:`~roboadvisor.qp.QuadraticProgram`
over the stacked plan ``pi_1 .. pi_H`` (``pi_0`` is the current portfolio).
L1 trading terms are linearised by splitting every step into
``pi_s - pi_{s-1} = z+ - z-`` with ``z+, z- >= 0``.

The mean-risk-budgeting criterion is not convex; it is handled by sequential
convex approximation: linearise the risk-budget deviations around the current
plan, solve the resulting QP, move part of the way towards its solution and
shrink the step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .black_litterman import ForecastSet
from .qp import QuadraticProgram, solve_qp

FEAS_TOL = 1e-8


class InfeasibleProblemError(RuntimeError):
    """The horizon program has no feasible plan (e.g. delta too tight for a target)."""


class DegenerateRiskError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TargetConstraint:
    """Group-level allocation target.

    ``schedule`` pairs plan steps (0-based) with the required total weight of
    the ``bonds`` group at that step; the risky group gets the complement.
    """

    bonds: tuple[int, ...]
    risky: tuple[int, ...]
    schedule: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if set(self.bonds) & set(self.risky):
            raise ValueError("bond and risky groups overlap")


@dataclass(frozen=True)
class TradingConstraints:
    long_only: bool = True
    turnover_delta: float = math.inf
    tc_eta: float | Sequence[float] = 0.0
    freeze_steps: tuple[int, ...] = ()
    target: Optional[TargetConstraint] = None

    def __post_init__(self):
        if not self.turnover_delta > 0:
            raise ValueError("turnover bound delta must be positive")
        if np.any(np.asarray(self.tc_eta) < 0):
            raise ValueError("transaction cost scale eta must be nonnegative")

    @property
    def needs_split(self) -> bool:
        return math.isfinite(self.turnover_delta) or bool(np.any(np.asarray(self.tc_eta) > 0))


@dataclass(frozen=True)
class RiskBudget:
    b: np.ndarray
    gamma_r: float
    bonds: tuple[int, ...]
    risky: tuple[int, ...]


@dataclass(frozen=True)
class ScaState:
    pi_k: np.ndarray
    rho_k: float
    k: int
    objective_k: float


@dataclass
class HorizonPlan:
    weights: np.ndarray                      # (H, N)
    objective: float                         # true criterion value (maximisation sense)
    converged: bool = True
    iterations: int = 1
    history: list = field(default_factory=list)


def budget_weights(gamma_r: float, n_bonds: int, n_total: int,
                   bonds: Optional[Sequence[int]] = None) -> RiskBudget:
    """
    Risk budgets split between a low-risk group and a risky group.

    Each of the ``n_bonds`` low-risk assets gets ``g / (n_bonds (1 + g))`` and
    each risky asset ``1 / ((n_total - n_bonds) (1 + g))``.  ``bonds`` lists
    the low-risk asset indices (default: the first ``n_bonds``).
    """
    if not gamma_r > 0:
        raise ValueError("gamma_R must be strictly positive")
    if not 0 < n_bonds < n_total:
        raise ValueError("need 0 < n_bonds < n_total")
    bonds = tuple(range(n_bonds)) if bonds is None else tuple(int(i) for i in bonds)
    if len(bonds) != n_bonds or len(set(bonds)) != n_bonds:
        raise ValueError("bond index list does not match n_bonds")
    risky = tuple(i for i in range(n_total) if i not in set(bonds))
    b = np.full(n_total, 1.0 / ((n_total - n_bonds) * (1.0 + gamma_r)))
    b[list(bonds)] = gamma_r / (n_bonds * (1.0 + gamma_r))
    return RiskBudget(b, float(gamma_r), bonds, risky)


def target_group_weights(gamma_target: float) -> tuple[float, float]:
    if gamma_target < 0:
        raise ValueError("gamma_target must be nonnegative")
    w_b = gamma_target / (1.0 + gamma_target)
    return w_b, 1.0 - w_b


def _per_step(value, H, name):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (H,)).copy()
    if np.any(~np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _check_inputs(forecasts: ForecastSet, pi_t, H):
    pi_t = np.asarray(pi_t, dtype=float)
    if forecasts.horizon < H:
        raise ValueError(f"forecast horizon {forecasts.horizon} shorter than H={H}")
    if forecasts.r_hat.shape[1] != pi_t.shape[0]:
        raise ValueError("forecast dimension does not match the portfolio")
    if abs(pi_t.sum() - 1.0) > 1e-6 or np.any(pi_t < -1e-9):
        raise ValueError("current portfolio must lie on the simplex")
    return pi_t


def compile_horizon(hess: np.ndarray, lin: np.ndarray, pi_t: np.ndarray,
                    constraints: TradingConstraints) -> QuadraticProgram:
    """
    Assemble the stacked horizon QP.

    Parameters
    ----------
    hess : (H, N, N) array
        Per-step Hessian blocks of the minimisation objective.
    lin : (H, N) array
        Per-step linear terms of the minimisation objective.
    pi_t : (N,) array
        Portfolio before the first rebalance.
    constraints : TradingConstraints
    """
    H, N = lin.shape
    HN = H * N
    split = constraints.needs_split
    n = 3 * HN if split else HN
    eta = _per_step(constraints.tc_eta, H, "eta")

    Q = np.zeros((n, n))
    c = np.zeros(n)
    names = [f"pi[{s}][{i}]" for s in range(H) for i in range(N)]
    for s in range(H):
        blk = slice(s * N, (s + 1) * N)
        Q[blk, blk] = 0.5 * (hess[s] + hess[s].T)
        c[blk] = lin[s]
    if split:
        names += [f"z+[{s}][{i}]" for s in range(H) for i in range(N)]
        names += [f"z-[{s}][{i}]" for s in range(H) for i in range(N)]
        c[HN:2 * HN] = np.repeat(eta, N)
        c[2 * HN:] = np.repeat(eta, N)

    A_rows, b_rows = [], []

    def step_diff_rows(s, extra=None):
        # rows for pi_s - pi_{s-1} (- z+_s + z-_s), rhs carries pi_t when s == 0
        M = np.zeros((N, n))
        M[:, s * N:(s + 1) * N] = np.eye(N)
        if s > 0:
            M[:, (s - 1) * N:s * N] -= np.eye(N)
        if extra is not None:
            M[:, HN + s * N:HN + (s + 1) * N] = -np.eye(N)
            M[:, 2 * HN + s * N:2 * HN + (s + 1) * N] = np.eye(N)
        rhs = pi_t.copy() if s == 0 else np.zeros(N)
        return M, rhs

    for s in range(H):
        row = np.zeros(n)
        row[s * N:(s + 1) * N] = 1.0
        A_rows.append(row[None, :])
        b_rows.append(np.ones(1))
    if split:
        for s in range(H):
            M, rhs = step_diff_rows(s, extra=True)
            A_rows.append(M)
            b_rows.append(rhs)
    for s in sorted(set(constraints.freeze_steps)):
        if not 0 <= s < H:
            continue
        M, rhs = step_diff_rows(s)
        A_rows.append(M)
        b_rows.append(rhs)
    tgt = constraints.target
    if tgt is not None:
        if sorted(tgt.bonds + tgt.risky) != list(range(N)):
            raise ValueError("target groups must partition the assets")
        for s, w_b in tgt.schedule:
            if 0 <= s < H:
                row = np.zeros(n)
                row[[s * N + i for i in tgt.bonds]] = 1.0
                A_rows.append(row[None, :])
                b_rows.append(np.array([w_b]))

    G_rows, h_rows = [], []
    if constraints.long_only:
        G = np.zeros((HN, n))
        G[:, :HN] = -np.eye(HN)
        G_rows.append(G)
        h_rows.append(np.zeros(HN))
    if split:
        G = np.zeros((2 * HN, n))
        G[:, HN:] = -np.eye(2 * HN)
        G_rows.append(G)
        h_rows.append(np.zeros(2 * HN))
        if math.isfinite(constraints.turnover_delta):
            G = np.zeros((H, n))
            for s in range(H):
                G[s, HN + s * N:HN + (s + 1) * N] = 1.0
                G[s, 2 * HN + s * N:2 * HN + (s + 1) * N] = 1.0
            G_rows.append(G)
            h_rows.append(np.full(H, constraints.turnover_delta))

    A = np.vstack(A_rows)
    b = np.concatenate(b_rows)
    G = np.vstack(G_rows) if G_rows else None
    h = np.concatenate(h_rows) if h_rows else None
    return QuadraticProgram(Q, c, A, b, G, h, names)


def build_mv_horizon_program(forecasts: ForecastSet, pi_t, gamma, constraints: TradingConstraints,
                             H: int) -> QuadraticProgram:
    """MV horizon criterion as a minimisation QP: ``sum -r'pi + gamma pi' S pi + eta |dpi|_1``."""
    pi_t = _check_inputs(forecasts, pi_t, H)
    g = _per_step(gamma, H, "gamma")
    if np.any(g <= 0):
        raise ValueError("gamma must be positive")
    hess = 2.0 * g[:, None, None] * forecasts.sigma_hat[:H]
    return compile_horizon(hess, -forecasts.r_hat[:H], pi_t, constraints)


def _solve_plan(qp: QuadraticProgram, H: int, N: int, pi_t, constraints) -> np.ndarray:
    sol = solve_qp(qp)
    if not sol.ok:
        raise InfeasibleProblemError(f"horizon program not solved: status={sol.status}")
    return _polish(sol.x[:H * N].reshape(H, N), pi_t, constraints)


NO_TRADE_TOL = 1e-7
DUST = 1e-7


def _polish(W, pi_t, constraints):
    # interior point iterates sit a hair inside the bounds; snap to the simplex
    raw = np.clip(W, 0.0, None) if constraints.long_only else W
    raw = raw / raw.sum(axis=1, keepdims=True)
    snapped = np.where(raw < DUST, 0.0, raw) if constraints.long_only else raw.copy()
    snapped = snapped / snapped.sum(axis=1, keepdims=True)
    frozen = set(constraints.freeze_steps)
    target_steps = set() if constraints.target is None else {s for s, _ in constraints.target.schedule}
    for s in range(snapped.shape[0]):
        prev = pi_t if s == 0 else snapped[s - 1]
        # solver noise inside the no-trade region becomes an exact hold
        if s in frozen or (s not in target_steps and np.abs(snapped[s] - prev).sum() <= NO_TRADE_TOL):
            snapped[s] = prev
    if _is_feasible(snapped, pi_t, constraints):
        return snapped
    # snapping pushed a bound past its tolerance; keep the solver point, exact holds only
    for s in frozen:
        if 0 <= s < raw.shape[0]:
            raw[s] = pi_t if s == 0 else raw[s - 1]
    return raw


def mv_objective(weights, forecasts: ForecastSet, pi_t, gamma, eta) -> float:
    H = weights.shape[0]
    g = _per_step(gamma, H, "gamma")
    e = _per_step(eta, H, "eta")
    prev = np.vstack([pi_t, weights[:-1]])
    total = 0.0
    for s in range(H):
        p = weights[s]
        total += (forecasts.r_hat[s] @ p - g[s] * p @ forecasts.sigma_hat[s] @ p
                  - e[s] * np.abs(p - prev[s]).sum())
    return float(total)


def solve_mv_horizon(forecasts: ForecastSet, pi_t, gamma, constraints: TradingConstraints,
                     H: int) -> HorizonPlan:
    """Optimal MV plan for steps ``t+1 .. t+H``; raises InfeasibleProblemError."""
    qp = build_mv_horizon_program(forecasts, pi_t, gamma, constraints, H)
    pi_t = np.asarray(pi_t, dtype=float)
    W = _solve_plan(qp, H, pi_t.shape[0], pi_t, constraints)
    return HorizonPlan(W, mv_objective(W, forecasts, pi_t, gamma, constraints.tc_eta))


def _budget_vector(b) -> np.ndarray:
    return np.asarray(b.b if isinstance(b, RiskBudget) else b, dtype=float)


def risk_budget_deviation(pi, sigma, b) -> tuple[np.ndarray, np.ndarray]:
    """
    Relative risk contributions and their distance to the budget.

    Returns
    -------
    d : (N,) array
        ``MRB - b``.
    mrb : (N,) array
        ``pi_i (Sigma pi)_i / (pi' Sigma pi)``; sums to one.
    """
    pi = np.asarray(pi, dtype=float)
    Sp = np.asarray(sigma) @ pi
    var = float(pi @ Sp)
    if not var > 0:
        raise DegenerateRiskError("portfolio variance is not positive")
    mrb = pi * Sp / var
    return mrb - _budget_vector(b), mrb


def mrb_linearization(pi_k, sigma, b, kappa: float):
    """
    Gauss-Newton model of ``sum_i d_i(pi)^2`` around ``pi_k``.

    Returns ``(A, Q, q)`` where row ``i`` of ``A`` is the gradient of
    ``d_i``, ``Q = 2 A'A + kappa I`` and ``q = 2 A'd(pi_k) - Q pi_k``, so that
    the model equals ``1/2 pi'Q pi + q'pi`` up to a constant.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    pi = np.asarray(pi_k, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d, _ = risk_budget_deviation(pi, sigma, b)
    Sp = sigma @ pi
    V = float(pi @ Sp)
    num = pi * Sp
    # (Sigma^(i) + Sigma^(i)') pi = e_i (Sigma pi)_i + pi_i Sigma[i, :]
    A = (np.diag(Sp) + pi[:, None] * sigma) / V - 2.0 * np.outer(num, Sp) / V ** 2
    Q = 2.0 * A.T @ A + kappa * np.eye(pi.shape[0])
    q = 2.0 * A.T @ d - Q @ pi
    return A, 0.5 * (Q + Q.T), q


def mrb_objective(weights, forecasts: ForecastSet, pi_t, phi, b, eta) -> float:
    """True (non-convex) MRB horizon criterion, maximisation sense."""
    H = weights.shape[0]
    f = _per_step(phi, H, "phi")
    e = _per_step(eta, H, "eta")
    prev = np.vstack([pi_t, weights[:-1]])
    total = 0.0
    for s in range(H):
        p = weights[s]
        d, _ = risk_budget_deviation(p, forecasts.sigma_hat[s], b)
        total += forecasts.r_hat[s] @ p - f[s] * d @ d - e[s] * np.abs(p - prev[s]).sum()
    return float(total)


def risk_budget_portfolio(sigma, b, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """
    Long-only portfolio whose risk contributions equal ``b``.

    Newton's method on the strictly convex ``1/2 y'Sy - b'log(y)``; the
    minimiser normalised to unit sum has ``MRB = b``.
    """
    S = np.asarray(sigma, dtype=float)
    bv = _budget_vector(b)
    y = bv / np.sqrt(np.diag(S))
    y = y / np.sqrt(y @ S @ y)
    for _ in range(max_iter):
        g = S @ y - bv / y
        Hm = S + np.diag(bv / y ** 2)
        step = np.linalg.solve(Hm, g)
        # keep y > 0
        t = 1.0
        neg = step > 0
        if np.any(neg):
            t = min(1.0, 0.95 * float(np.min(y[neg] / step[neg])))
        y = y - t * step
        if float(g @ step) < tol:
            break
    return y / y.sum()


def _is_feasible(W, pi_t, constraints: TradingConstraints, tol=1e-8) -> bool:
    if np.any(np.abs(W.sum(axis=1) - 1.0) > tol):
        return False
    if constraints.long_only and np.any(W < -tol):
        return False
    prev = np.vstack([pi_t, W[:-1]])
    steps = np.abs(W - prev).sum(axis=1)
    if np.any(steps > constraints.turnover_delta + tol):
        return False
    for s in constraints.freeze_steps:
        if 0 <= s < W.shape[0] and steps[s] > tol:
            return False
    tgt = constraints.target
    if tgt is not None:
        for s, w_b in tgt.schedule:
            if 0 <= s < W.shape[0] and abs(W[s, list(tgt.bonds)].sum() - w_b) > tol:
                return False
    return True


def solve_mrb_sca(forecasts: ForecastSet, pi_t, phi, b, constraints: TradingConstraints, H: int,
                  rho_0: float = 0.6, xi: float = 0.5, kappa: float = 0.5, tol: float = 0.01,
                  max_sca_iter: int = 50, pi_init=None, init: str = "best") -> HorizonPlan:
    """
    Sequential convex approximation of the MRB horizon problem.

    At iteration ``k`` every step's risk-budget deviation is linearised at the
    current plan, the convex QP is solved, and the true criterion is compared
    between the QP solution and the current plan.  If the gain is at most
    ``tol`` the better of the two is returned; otherwise the plan moves a
    fraction ``rho`` towards the QP solution and ``rho <- rho (1 - xi rho)``.
    After ``max_sca_iter`` iterations the best plan seen is returned with
    ``converged=False``.

    The starting plan is ``pi_init`` if given, else the risk-budget
    portfolio of each step's covariance (``init="budget"``), the current
    portfolio repeated (``init="current"``), or whichever of the two scores
    higher on the true criterion (``init="best"``).
    """
    pi_t = _check_inputs(forecasts, pi_t, H)
    if not 0 < rho_0 <= 1:
        raise ValueError("rho_0 must lie in (0, 1]")
    if not 0 <= xi <= 1:
        raise ValueError("xi must lie in [0, 1]")
    if not tol > 0:
        raise ValueError("tol must be positive")
    f = _per_step(phi, H, "phi")
    if np.any(f <= 0):
        raise ValueError("phi must be positive")
    N = pi_t.shape[0]
    eta = constraints.tc_eta

    if pi_init is not None:
        plan = np.array(pi_init, dtype=float).reshape(H, N)
    else:
        starts = {
            "budget": lambda: np.vstack([risk_budget_portfolio(forecasts.sigma_hat[s], b)
                                         for s in range(H)]),
            "current": lambda: np.tile(pi_t, (H, 1)),
        }
        if init in starts:
            plan = starts[init]()
        elif init == "best":
            cands = [starts["budget"](), starts["current"]()]
            # feasible starts first, then higher true objective
            scored = [(_is_feasible(c, pi_t, constraints),
                       mrb_objective(c, forecasts, pi_t, f, b, eta)) for c in cands]
            plan = cands[max(range(2), key=lambda i: scored[i])]
        else:
            raise ValueError(f"unknown init {init!r}")
    plan_feasible = _is_feasible(plan, pi_t, constraints)
    J = mrb_objective(plan, forecasts, pi_t, f, b, eta)
    rho = rho_0
    history = [ScaState(plan.copy(), rho, 0, J)]
    best_W, best_J = (plan.copy(), J) if plan_feasible else (None, -math.inf)

    for k in range(max_sca_iter):
        hess = np.empty((H, N, N))
        lin = np.empty((H, N))
        for s in range(H):
            _, Qs, qs = mrb_linearization(plan[s], forecasts.sigma_hat[s], b, kappa)
            hess[s] = f[s] * Qs
            lin[s] = f[s] * qs - forecasts.r_hat[s]
        qp = compile_horizon(hess, lin, pi_t, constraints)
        cand = _solve_plan(qp, H, N, pi_t, constraints)
        J_cand = mrb_objective(cand, forecasts, pi_t, f, b, eta)
        if J_cand > best_J:
            best_W, best_J = cand, J_cand
        if J_cand - J <= tol:
            if J_cand >= J or not plan_feasible:
                return HorizonPlan(cand, J_cand, True, k + 1, history)
            return HorizonPlan(plan.copy(), J, True, k + 1, history)
        plan = plan + rho * (cand - plan)
        rho = rho * (1.0 - xi * rho)
        J = mrb_objective(plan, forecasts, pi_t, f, b, eta)
        history.append(ScaState(plan.copy(), rho, k + 1, J))
        if plan_feasible and J > best_J:
            best_W, best_J = plan.copy(), J

    return HorizonPlan(best_W, best_J, False, max_sca_iter, history)
