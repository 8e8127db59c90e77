"""Regime-aware receding-horizon portfolio allocation for robo-advisory backtests."""
from .allocation import (InfeasibleProblemError, RiskBudget, TargetConstraint, TradingConstraints,
                         budget_weights, risk_budget_deviation, solve_mrb_sca, solve_mv_horizon,
                         target_group_weights)
from .backtest import MetricsReport, WealthSeries, compute_metrics, run_benchmarks, simulate_wealth
from .black_litterman import BlConfig, ForecastSet, build_forecast_set
from .engine import (StrategySpec, WeightTrajectory, initial_portfolio, risk_profile_path,
                     run_receding_horizon, sample_moment_forecasts)
from .market_data import build_calendar, load_aum_table, load_price_table, to_returns
from .qp import QuadraticProgram, solve_qp
from .regimes import fit_hmm

__version__ = "0.1.0"

__all__ = [
    "InfeasibleProblemError", "RiskBudget", "TargetConstraint", "TradingConstraints",
    "budget_weights", "risk_budget_deviation", "solve_mrb_sca", "solve_mv_horizon",
    "target_group_weights", "MetricsReport", "WealthSeries", "compute_metrics", "run_benchmarks",
    "simulate_wealth", "BlConfig", "ForecastSet", "build_forecast_set", "StrategySpec",
    "WeightTrajectory", "initial_portfolio", "risk_profile_path", "run_receding_horizon",
    "sample_moment_forecasts", "build_calendar", "load_aum_table", "load_price_table",
    "to_returns", "QuadraticProgram", "solve_qp", "fit_hmm",
]
