"""
Receding-horizon driver.

At each rebalance day ``t`` the forecaster sees only return rows before
``t``, the horizon problem is solved for ``H`` rebalance periods and only
the first planned portfolio is implemented.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .allocation import (HorizonPlan, InfeasibleProblemError, TargetConstraint,
                         TradingConstraints, budget_weights, solve_mrb_sca, solve_mv_horizon,
                         target_group_weights)
from .black_litterman import BlConfig, ForecastSet, build_forecast_set
from .linalg import repair_psd
from .market_data import (EquilibriumWeights, InsufficientDataError, RebalanceCalendar,
                          ReturnPanel)
from .regimes import HmmParams, filter_normal_probability, fit_hmm

DEFAULT_WINDOW = 1260
PROFILE_KINDS = ("static", "lifecycle", "noisy")


class EngineError(RuntimeError):
    """A run aborted at a specific rebalance date."""

    def __init__(self, date: str, index: int, cause: Exception):
        super().__init__(f"rebalance {index} ({date}): {type(cause).__name__}: {cause}")
        self.date = date
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class RiskProfilePath:
    kind: str
    values: tuple[float, ...]
    grid: tuple[float, ...] = ()
    seed: int = 0

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, j: int) -> float:
        return self.values[j]


def risk_profile_path(kind: str, gamma_start: float, gamma_end: Optional[float] = None,
                      grid: Sequence[float] = (), T_rebalances: int = 1,
                      seed: int = 0) -> RiskProfilePath:
    """
    Per-rebalance risk coefficients.

    ``static`` repeats ``gamma_start``; ``lifecycle`` interpolates linearly
    from ``gamma_start`` to ``gamma_end`` (which may not be smaller);
    ``noisy`` draws uniformly from ``grid``, one draw per date in order.
    """
    if T_rebalances < 1:
        raise ValueError("T_rebalances must be >= 1")
    grid = tuple(float(g) for g in grid)
    if kind == "static":
        vals = (float(gamma_start),) * T_rebalances
    elif kind == "lifecycle":
        if gamma_end is None:
            raise ValueError("lifecycle profile needs gamma_end")
        if gamma_end < gamma_start:
            raise ValueError("lifecycle profile must not decrease (gamma_end < gamma_start)")
        vals = tuple(float(v) for v in np.linspace(gamma_start, gamma_end, T_rebalances))
    elif kind == "noisy":
        if not grid:
            raise ValueError("noisy profile needs a non-empty grid")
        rng = np.random.default_rng(seed)
        vals = tuple(float(grid[i]) for i in rng.integers(0, len(grid), T_rebalances))
    else:
        raise ValueError(f"unknown profile kind {kind!r}; expected one of {PROFILE_KINDS}")
    return RiskProfilePath(kind, vals, grid, seed)


def initial_portfolio(gamma_IW: float, n_bonds: int, n_total: int,
                      bonds: Optional[Sequence[int]] = None) -> np.ndarray:
    return budget_weights(gamma_IW, n_bonds, n_total, bonds).b.copy()


def sample_moment_forecasts(window: ReturnPanel, H: int, days_per_period: int = 1,
                            anchored_at: int = 0) -> ForecastSet:
    """Sample mean and unbiased covariance, summed to period scale and repeated ``H`` times."""
    X = np.asarray(window.values, dtype=float)
    if X.shape[0] < 2:
        raise InsufficientDataError("sample moments need at least two rows")
    if H < 1 or days_per_period < 1:
        raise ValueError("H and days_per_period must be >= 1")
    mu = X.mean(axis=0) * days_per_period
    S = np.atleast_2d(np.cov(X, rowvar=False, ddof=1)) * days_per_period
    if np.linalg.eigvalsh(S).min() <= 0.0:
        S = repair_psd(S + 1e-10 * np.eye(S.shape[0]))
    return ForecastSet(np.tile(mu, (H, 1)), np.tile(S, (H, 1, 1)), anchored_at)


class SampleMomentForecaster:
    """Trailing-window sample moments."""

    name = "sample-moments"

    def __init__(self, returns: ReturnPanel, window: int = DEFAULT_WINDOW, days_per_period: int = 1):
        self.returns = returns
        self.window = window
        self.days_per_period = days_per_period

    def forecast(self, t: int, H: int) -> ForecastSet:
        return sample_moment_forecasts(self.returns.window(t, self.window), H,
                                       self.days_per_period, anchored_at=t)


class HmmBlForecaster:
    """
    HMM fitted on the trailing window, blended through regime-wise BL.

    Fits are memoised per rebalance day so that several strategies on the
    same data (a parameter grid) share them.
    """

    name = "HMM-BL"

    def __init__(self, returns: ReturnPanel, aum: Optional[EquilibriumWeights], cfg: BlConfig = BlConfig(),
                 window: int = DEFAULT_WINDOW, days_per_period: int = 1, seed: int = 0):
        self.returns = returns
        self.aum = aum
        self.cfg = cfg
        self.window = window
        self.days_per_period = days_per_period
        self.seed = seed
        self._fits: dict[int, tuple[HmmParams, float]] = {}

    def regime(self, t: int) -> tuple[HmmParams, float]:
        if t not in self._fits:
            win = self.returns.window(t, self.window)
            params = fit_hmm(win, seed=self.seed, fitted_at=t)
            self._fits[t] = (params, filter_normal_probability(params, win))
        return self._fits[t]

    def equilibrium(self, t: int) -> np.ndarray:
        N = self.returns.n_assets
        if self.aum is None:
            return np.full(N, 1.0 / N)
        return np.asarray(self.aum.at(self.returns.decision_date(t)), dtype=float)

    def forecast(self, t: int, H: int) -> ForecastSet:
        params, q_t = self.regime(t)
        return build_forecast_set(params, q_t, self.equilibrium(t), self.cfg, H,
                                  self.days_per_period, anchored_at=t)


@dataclass(frozen=True)
class StrategySpec:
    """
    One strategy definition.

    ``profile`` carries gamma (MV) or gamma_R (MRB) per rebalance.  When
    ``gamma_target`` is set, the bond-group target is imposed on plan steps
    that fall in the last ``target_steps`` rebalances (default ``2 H``),
    with the coefficient moving linearly from the profile value at
    activation to ``gamma_target``.
    """

    criterion: str
    forecaster: str
    horizon_H: int
    profile: RiskProfilePath
    constraints: TradingConstraints = TradingConstraints()
    phi: float = 0.1
    bl: BlConfig = BlConfig()
    seed: int = 0
    n_bonds: int = 4
    bonds: Optional[tuple[int, ...]] = None
    gamma_iw: Optional[float] = None
    gamma_target: Optional[float] = None
    target_steps: Optional[int] = None
    window: int = DEFAULT_WINDOW
    sca: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.criterion not in ("MV", "MRB"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.forecaster not in ("HMM-BL", "sample-moments"):
            raise ValueError(f"unknown forecaster {self.forecaster!r}")
        if self.horizon_H < 1:
            raise ValueError("H must be >= 1")
        if len(self.profile) == 0:
            raise ValueError("empty risk profile")
        if self.criterion == "MRB" and not self.phi > 0:
            raise ValueError("MRB needs phi > 0")


@dataclass(frozen=True)
class WeightTrajectory:
    dates: tuple[int, ...]             # rebalance day indices into the return panel
    labels: tuple[str, ...]            # decision dates as strings
    assets: tuple[str, ...]
    weights: np.ndarray                # (R, N), implemented first-step rows
    planned_only: bool = False
    plans: tuple = ()                  # full horizon plans, one per rebalance
    coefficients: tuple[float, ...] = ()
    regime_q: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.dates)


def _target_for(spec: StrategySpec, g: int, P: int, H: int, N: int) -> Optional[TargetConstraint]:
    if spec.gamma_target is None:
        return None
    A = spec.target_steps if spec.target_steps is not None else 2 * H
    start = max(P - A, 0)
    g0 = spec.profile[min(start, len(spec.profile) - 1)]
    span = P - start
    sched = []
    for s in range(H):
        j = g + s
        if start <= j:
            frac = min((j - start + 1) / span, 1.0)
            gamma_j = g0 + (spec.gamma_target - g0) * frac
            sched.append((s, target_group_weights(gamma_j)[0]))
    if not sched:
        return None
    bonds = spec.bonds if spec.bonds is not None else tuple(range(spec.n_bonds))
    risky = tuple(i for i in range(N) if i not in bonds)
    return TargetConstraint(tuple(bonds), risky, tuple(sched))


def make_forecaster(spec: StrategySpec, returns: ReturnPanel, calendar: RebalanceCalendar,
                    aum: Optional[EquilibriumWeights]):
    if spec.forecaster == "HMM-BL":
        return HmmBlForecaster(returns, aum, spec.bl, spec.window, calendar.step, spec.seed)
    return SampleMomentForecaster(returns, spec.window, calendar.step)


def solve_step(spec: StrategySpec, forecasts: ForecastSet, pi_t: np.ndarray, coef: float,
               constraints: TradingConstraints) -> HorizonPlan:
    H = spec.horizon_H
    if spec.criterion == "MV":
        return solve_mv_horizon(forecasts, pi_t, coef, constraints, H)
    b = budget_weights(coef, spec.n_bonds, pi_t.shape[0], spec.bonds)
    return solve_mrb_sca(forecasts, pi_t, spec.phi, b, constraints, H, **spec.sca)


def run_receding_horizon(spec: StrategySpec, returns: ReturnPanel, calendar: RebalanceCalendar,
                         aum: Optional[EquilibriumWeights] = None, forecaster=None,
                         keep_plans: bool = False) -> WeightTrajectory:
    """
    Run the strategy over every rebalance day of ``calendar``.

    ``forecaster`` may be shared between runs on the same data; it must
    expose ``forecast(t, H)``.  Any forecaster or optimizer failure aborts
    the run with an :class:`EngineError` naming the date.
    """
    P = len(calendar.rebalance_dates)
    if calendar.horizon_T > len(returns):
        raise InsufficientDataError("calendar extends past the return panel")
    if calendar.rebalance_dates[0] < spec.window:
        raise InsufficientDataError(
            f"first rebalance at row {calendar.rebalance_dates[0]} leaves less than "
            f"{spec.window} rows of history")
    if len(spec.profile) < P:
        raise ValueError(f"profile has {len(spec.profile)} values for {P} rebalances")
    if forecaster is None:
        forecaster = make_forecaster(spec, returns, calendar, aum)
    N = returns.n_assets
    H = spec.horizon_H
    gamma_iw = spec.gamma_iw if spec.gamma_iw is not None else spec.profile[0]
    pi = initial_portfolio(gamma_iw, spec.n_bonds, N, spec.bonds)

    rows, plans, coefs, qs, labels = [], [], [], [], []
    for g, t in enumerate(calendar.rebalance_dates):
        label = returns.decision_date(t)
        coef = spec.profile[g]
        cons = replace(spec.constraints, target=_target_for(spec, g, P, H, N))
        try:
            fc = forecaster.forecast(t, H)
            plan = solve_step(spec, fc, pi, coef, cons)
        except (InfeasibleProblemError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            raise EngineError(label, g, exc) from exc
        pi = plan.weights[0].copy()
        rows.append(pi)
        coefs.append(float(coef))
        labels.append(label)
        if fc.q is not None:
            qs.append(float(fc.q[0]))
        if keep_plans:
            plans.append(plan.weights.copy())
    return WeightTrajectory(tuple(calendar.rebalance_dates), tuple(labels), returns.assets,
                            np.vstack(rows), False, tuple(plans), tuple(coefs), tuple(qs))


def run_mv_est_myopic(returns: ReturnPanel, calendar: RebalanceCalendar, gamma: RiskProfilePath,
                      constraints: TradingConstraints = TradingConstraints(), n_bonds: int = 4,
                      window: int = DEFAULT_WINDOW) -> WeightTrajectory:
    """Classical one-period MV with sample moments, re-solved at every rebalance."""
    N = returns.n_assets
    pi = initial_portfolio(gamma[0], n_bonds, N)
    rows, labels = [], []
    for g, t in enumerate(calendar.rebalance_dates):
        fc = sample_moment_forecasts(returns.window(t, window), 1, calendar.step, anchored_at=t)
        try:
            plan = solve_mv_horizon(fc, pi, gamma[g], constraints, 1)
        except InfeasibleProblemError as exc:
            raise EngineError(returns.decision_date(t), g, exc) from exc
        pi = plan.weights[0].copy()
        rows.append(pi)
        labels.append(returns.decision_date(t))
    return WeightTrajectory(tuple(calendar.rebalance_dates), tuple(labels), returns.assets,
                            np.vstack(rows), coefficients=tuple(gamma.values[:len(rows)]))


__all__ = [
    "EngineError", "RiskProfilePath", "risk_profile_path", "initial_portfolio",
    "sample_moment_forecasts", "SampleMomentForecaster", "HmmBlForecaster", "StrategySpec",
    "WeightTrajectory", "run_receding_horizon", "run_mv_est_myopic", "make_forecaster",
    "solve_step",
]
