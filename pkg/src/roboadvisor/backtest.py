"""
Wealth simulation, performance metrics and experiment grids.

Weights are held fixed between rebalances (no intraperiod drift); wealth
compounds from 100.
"""
from __future__ import annotations

import itertools
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from .allocation import TradingConstraints
from .black_litterman import BlConfig
from .engine import (DEFAULT_WINDOW, EngineError, HmmBlForecaster,
                     StrategySpec, WeightTrajectory, risk_profile_path, run_mv_est_myopic,
                     run_receding_horizon)
from .market_data import (PriceTable, RebalanceCalendar, ReturnPanel, build_calendar,
                          equilibrium_weights, load_aum_table, load_price_table, to_returns,
                          write_table)

log = logging.getLogger(__name__)

TRADING_DAYS = 252
METRIC_NAMES = ("mean", "stdev", "maxdd", "sr", "glr", "calmar", "turnover")
PARAM_COLUMNS = ("gamma", "gamma_r", "phi", "eta", "delta", "H")
METRICS_HEADER = ("run_id", "strategy") + PARAM_COLUMNS + METRIC_NAMES + ("status", "flags")


class ConfigError(ValueError):
    """Experiment configuration problem; fatal before any run starts."""


@dataclass(frozen=True)
class WealthSeries:
    dates: tuple[str, ...]
    wealth: np.ndarray
    daily_returns: np.ndarray

    def __len__(self) -> int:
        return self.wealth.shape[0]


@dataclass(frozen=True)
class MetricsReport:
    mean: float
    stdev: float
    maxdd: float
    sr: float
    glr: float
    calmar: float
    turnover: float
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def wealth_from_returns(dates, daily_returns, start: float = 100.0) -> WealthSeries:
    r = np.asarray(daily_returns, dtype=float)
    w = start * np.concatenate([[1.0], np.cumprod(1.0 + r)])
    return WealthSeries(tuple(dates), w, r)


def simulate_wealth(weights: WeightTrajectory, returns: ReturnPanel,
                    calendar: RebalanceCalendar) -> WealthSeries:
    """Apply each rebalance row to every return row until the next rebalance."""
    if tuple(weights.dates) != tuple(calendar.rebalance_dates):
        raise ValueError("weight trajectory dates do not match the rebalance calendar")
    if calendar.horizon_T > len(returns):
        raise ValueError("calendar runs past the return panel")
    first = calendar.rebalance_dates[0]
    end = calendar.period_end(len(calendar.rebalance_dates) - 1)
    R = returns.values
    daily = np.empty(end - first)
    for k, t in enumerate(calendar.rebalance_dates):
        stop = calendar.period_end(k)
        daily[t - first:stop - first] = R[t:stop] @ weights.weights[k]
    dates = (returns.decision_date(first),) + tuple(returns.dates[first:end])
    return wealth_from_returns(dates, daily)


def max_drawdown(wealth) -> float:
    X = np.asarray(wealth, dtype=float)
    peak = np.maximum.accumulate(X)
    return float(np.max((peak - X) / peak))


def annualized_turnover(W: np.ndarray, trading_days: int = TRADING_DAYS) -> float:
    W = np.asarray(W, dtype=float)
    if W.shape[0] < 2:
        return 0.0
    steps = np.abs(np.diff(W, axis=0)).sum()
    return float(0.5 * trading_days * steps / (W.shape[0] - 1))


def compute_metrics(wealth: WealthSeries, weights: Optional[WeightTrajectory] = None,
                    trading_days: int = TRADING_DAYS) -> MetricsReport:
    """
    Annualised performance statistics of a wealth path.

    Turnover is NaN when no weights are available (index passthrough).
    Undefined ratios are NaN or inf and named in ``flags``.
    """
    if len(wealth) < 2:
        raise ValueError("need at least two wealth points")
    X = np.asarray(wealth.daily_returns, dtype=float)
    flags = []
    mean = trading_days * float(X.mean())
    stdev = math.sqrt(trading_days) * float(X.std(ddof=1)) if X.size > 1 else math.nan
    if not stdev > 0:
        sr = math.nan
        flags.append("sr_undefined")
    else:
        sr = mean / stdev
    losses = float(np.maximum(-X, 0.0).mean())
    if losses > 0:
        glr = float(X.mean()) / losses
    elif X.mean() > 0:
        glr = math.inf
        flags.append("glr_no_losses")
    else:
        glr = 0.0
        flags.append("glr_no_losses")
    maxdd = max_drawdown(wealth.wealth)
    if maxdd > 0:
        calmar = mean / maxdd
    else:
        calmar = math.nan
        flags.append("calmar_undefined")
    turnover = math.nan if weights is None else annualized_turnover(weights.weights, trading_days)
    return MetricsReport(mean, stdev, maxdd, sr, glr, calmar, turnover, tuple(flags))


def equal_weight_trajectory(returns: ReturnPanel, calendar: RebalanceCalendar) -> WeightTrajectory:
    N = returns.n_assets
    P = len(calendar.rebalance_dates)
    labels = tuple(returns.decision_date(t) for t in calendar.rebalance_dates)
    return WeightTrajectory(tuple(calendar.rebalance_dates), labels, returns.assets,
                            np.full((P, N), 1.0 / N))


def index_wealth(index: PriceTable, returns: ReturnPanel, calendar: RebalanceCalendar,
                 column: Optional[str] = None) -> WealthSeries:
    """Index level over the backtest window, rescaled to start at 100."""
    col = column or index.assets[0]
    level = dict(zip(index.dates, index.column(col)))
    first = calendar.rebalance_dates[0]
    end = calendar.period_end(len(calendar.rebalance_dates) - 1)
    dates = (returns.decision_date(first),) + tuple(returns.dates[first:end])
    missing = [d for d in dates if d not in level or not np.isfinite(level[d])]
    if missing:
        raise ValueError(f"index has no value for {len(missing)} dates, first {missing[0]}")
    L = np.array([level[d] for d in dates])
    return WealthSeries(dates, 100.0 * L / L[0], L[1:] / L[:-1] - 1.0)


def run_benchmarks(returns: ReturnPanel, calendar: RebalanceCalendar,
                   index: Optional[PriceTable] = None, include_index: bool = False) -> dict:
    """``{"1/N": (trajectory, wealth), "SP500": wealth}``; the index entry needs ``index``."""
    traj = equal_weight_trajectory(returns, calendar)
    out: dict[str, Any] = {"1/N": (traj, simulate_wealth(traj, returns, calendar))}
    if index is not None:
        out["SP500"] = index_wealth(index, returns, calendar)
    elif include_index:
        raise ValueError("index benchmark requested but no index table supplied")
    return out


# ---------------------------------------------------------------------------
# experiment grids

STRATEGIES = {
    # name: (criterion, forecaster, grid keys)
    "MV-BL": ("MV", "HMM-BL", ("gamma", "eta", "delta", "H")),
    "MRB-BL": ("MRB", "HMM-BL", ("gamma_r", "phi", "eta", "delta", "H")),
    "MV-Est-MPC": ("MV", "sample-moments", ("gamma", "eta", "delta", "H")),
    "MV-Est-myopic": ("MV", "sample-moments", ("gamma", "eta", "delta")),
    "MRB-Est": ("MRB", "sample-moments", ("gamma_r", "phi", "eta", "delta", "H")),
    "1/N": (None, None, ()),
    "SP500": (None, None, ()),
}

GRID_DEFAULTS = {"gamma": [1.0], "gamma_r": [1.0], "phi": [0.1], "eta": [0.0],
                 "delta": [math.inf], "H": [7]}

SCALAR_DEFAULTS = {
    "seed": 0, "step": 22, "periods": 56, "window": DEFAULT_WINDOW, "start": None,
    "n_bonds": 4, "profile": "static", "gamma_end": None, "gamma_r_end": None,
    "profile_grid": None, "gamma_target": None, "target_steps": None,
    "lambda_bar_0": 1.0, "iota_n": 0.03, "iota_c": None, "alpha_n": 1.0, "alpha_c": 1.0,
    "rho_0": 0.6, "xi": 0.5, "kappa": 0.5, "sca_tol": 0.01, "max_sca_iter": 50,
    "workers": 1, "regimes": True, "aum": None, "index": None, "out_dir": "results",
}

KNOWN_KEYS = set(GRID_DEFAULTS) | set(SCALAR_DEFAULTS) | {"prices", "strategies"}


def _as_float(v, key):
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity", ".inf"):
        return math.inf
    try:
        return float(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from exc


@dataclass
class ExperimentConfig:
    prices: Path
    strategies: list[str]
    grid: dict[str, list]
    opts: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw: dict, base_dir: Optional[Path] = None,
                     overrides: Optional[dict] = None) -> "ExperimentConfig":
        raw = dict(raw or {})
        for k, v in (overrides or {}).items():
            if v is not None:
                raw[k] = v
        unknown = set(raw) - KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "prices" not in raw:
            raise ConfigError("config needs a 'prices' path")
        strategies = raw.get("strategies")
        if not strategies:
            raise ConfigError("config needs a non-empty 'strategies' list")
        if isinstance(strategies, str):
            strategies = [strategies]
        bad = [s for s in strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; known: {sorted(STRATEGIES)}")
        grid = {}
        for key, default in GRID_DEFAULTS.items():
            vals = raw.get(key, default)
            vals = vals if isinstance(vals, (list, tuple)) else [vals]
            if not vals:
                raise ConfigError(f"{key}: empty grid")
            conv = [int(_as_float(v, key)) if key == "H" else _as_float(v, key) for v in vals]
            grid[key] = conv
        opts = dict(SCALAR_DEFAULTS)
        opts.update({k: raw[k] for k in SCALAR_DEFAULTS if k in raw})
        base = Path(base_dir) if base_dir is not None else Path.cwd()

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else base / p

        cfg = cls(resolve(raw["prices"]), list(strategies), grid, opts)
        cfg.opts["aum"] = resolve(opts["aum"])
        cfg.opts["index"] = resolve(opts["index"])
        cfg.opts["out_dir"] = resolve(opts["out_dir"])
        if "SP500" in strategies and cfg.opts["index"] is None:
            raise ConfigError("strategy SP500 needs an 'index' file")
        for p in (cfg.prices, cfg.opts["aum"], cfg.opts["index"]):
            if p is not None and not p.exists():
                raise FileNotFoundError(f"input file not found: {p}")
        return cfg

    def runs(self) -> list[dict]:
        """Cartesian grid per strategy over the keys that strategy uses, in config order."""
        out = []
        for name in self.strategies:
            keys = STRATEGIES[name][2]
            for combo in itertools.product(*(self.grid[k] for k in keys)):
                params = dict(zip(keys, combo))
                if name == "MV-Est-myopic":
                    params["H"] = 1
                out.append({"strategy": name, **params})
        for i, run in enumerate(out):
            run["run_id"] = f"{i:03d}_{_slug(run)}"
        return out


def _fmt_num(v, digits: int = 6) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.{digits}g}"


def _slug(run: dict) -> str:
    parts = [run["strategy"].replace("/", "").replace("-", "")]
    for k in PARAM_COLUMNS:
        if k in run:
            parts.append(f"{k}{_fmt_num(run[k])}")
    return re.sub(r"[^A-Za-z0-9_.]", "", "_".join(parts))


@dataclass
class ExperimentData:
    returns: ReturnPanel
    calendar: RebalanceCalendar
    aum: Any
    index: Optional[PriceTable]


def load_experiment_data(cfg: ExperimentConfig) -> ExperimentData:
    prices = load_price_table(cfg.prices)
    returns = to_returns(prices)
    aum = None
    if cfg.opts["aum"] is not None:
        aum = equilibrium_weights(load_aum_table(cfg.opts["aum"]))
    index = load_price_table(cfg.opts["index"]) if cfg.opts["index"] is not None else None
    window = int(cfg.opts["window"])
    start = int(cfg.opts["start"]) if cfg.opts["start"] is not None else window
    calendar = build_calendar(start, int(cfg.opts["step"]), int(cfg.opts["periods"]), len(returns))
    return ExperimentData(returns, calendar, aum, index)


def spec_for_run(run: dict, cfg: ExperimentConfig, periods: int) -> StrategySpec:
    criterion, forecaster, _ = STRATEGIES[run["strategy"]]
    o = cfg.opts
    if criterion == "MV":
        start, end = run["gamma"], o["gamma_end"]
    else:
        start, end = run["gamma_r"], o["gamma_r_end"]
    grid = o["profile_grid"] or ()
    profile = risk_profile_path(o["profile"], start, end, grid, periods, int(o["seed"]))
    constraints = TradingConstraints(turnover_delta=run["delta"], tc_eta=run["eta"])
    bl = BlConfig(lambda_bar_0=float(o["lambda_bar_0"]), iota_n=float(o["iota_n"]),
                  iota_c=None if o["iota_c"] is None else float(o["iota_c"]),
                  alpha_n=_as_float(o["alpha_n"], "alpha_n"), alpha_c=_as_float(o["alpha_c"], "alpha_c"))
    sca = {"rho_0": float(o["rho_0"]), "xi": float(o["xi"]), "kappa": float(o["kappa"]),
           "tol": float(o["sca_tol"]), "max_sca_iter": int(o["max_sca_iter"])}
    return StrategySpec(
        criterion, forecaster, int(run["H"]), profile, constraints,
        phi=run.get("phi", 0.1), bl=bl, seed=int(o["seed"]), n_bonds=int(o["n_bonds"]),
        gamma_target=None if o["gamma_target"] is None else float(o["gamma_target"]),
        target_steps=None if o["target_steps"] is None else int(o["target_steps"]),
        window=int(o["window"]), sca=sca)


@dataclass
class RunResult:
    run: dict
    trajectory: Optional[WeightTrajectory]
    wealth: Optional[WealthSeries]
    metrics: Optional[MetricsReport]
    status: str = "ok"


def execute_run(run: dict, cfg: ExperimentConfig, data: ExperimentData, forecaster=None) -> RunResult:
    name = run["strategy"]
    try:
        if name == "1/N":
            traj, wealth = run_benchmarks(data.returns, data.calendar)["1/N"]
        elif name == "SP500":
            traj, wealth = None, index_wealth(data.index, data.returns, data.calendar)
        else:
            spec = spec_for_run(run, cfg, len(data.calendar.rebalance_dates))
            if name == "MV-Est-myopic":
                traj = run_mv_est_myopic(data.returns, data.calendar, spec.profile, spec.constraints,
                                         spec.n_bonds, spec.window)
            else:
                fc = forecaster if spec.forecaster == "HMM-BL" else None
                traj = run_receding_horizon(spec, data.returns, data.calendar, data.aum, fc)
            wealth = simulate_wealth(traj, data.returns, data.calendar)
        return RunResult(run, traj, wealth, compute_metrics(wealth, traj))
    except (EngineError, ValueError, ArithmeticError) as exc:
        log.warning("run %s failed: %s", run["run_id"], exc)
        return RunResult(run, None, None, None, f"error: {exc}")


def _execute_packed(args):
    return execute_run(*args)


def _metrics_row(res: RunResult) -> list:
    run = res.run
    row = [run["run_id"], run["strategy"]]
    row += [_fmt_num(run.get(k)) for k in PARAM_COLUMNS]
    if res.metrics is None:
        row += [""] * len(METRIC_NAMES)
        row += [res.status.replace("\n", " "), ""]
    else:
        row += [_fmt_num(float(getattr(res.metrics, k)), 10) for k in METRIC_NAMES]
        row += [res.status, ";".join(res.metrics.flags)]
    return row


def write_run_outputs(res: RunResult, out_dir: Path) -> None:
    rid = res.run["run_id"]
    if res.trajectory is not None:
        write_table(out_dir / f"weights_{rid}.csv", res.trajectory.labels, res.trajectory.assets,
                    res.trajectory.weights)
    if res.wealth is not None:
        ret = np.concatenate([[np.nan], res.wealth.daily_returns])
        write_table(out_dir / f"wealth_{rid}.csv", res.wealth.dates, ("wealth", "daily_return"),
                    np.column_stack([res.wealth.wealth, ret]))


def write_regimes(forecaster: HmmBlForecaster, data: ExperimentData, out_dir: Path) -> None:
    rows, labels = [], []
    for t in data.calendar.rebalance_dates:
        _, q = forecaster.regime(t)
        rows.append(q)
        labels.append(data.returns.decision_date(t))
    frame = pd.DataFrame({"date": labels, "q_t": rows,
                          "regime_label": ["n" if q >= 0.5 else "c" for q in rows]})
    tmp = out_dir / "regimes.csv.tmp"
    frame.to_csv(tmp, index=False, float_format="%.12g", lineterminator="\n")
    tmp.replace(out_dir / "regimes.csv")


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Path] = None,
                   data: Optional[ExperimentData] = None) -> tuple[pd.DataFrame, list[RunResult]]:
    """
    Execute every grid point, write per-run CSVs and ``metrics.csv``.

    HMM fits are computed once per rebalance date and shared by all HMM-BL
    runs.  With ``workers > 1`` runs are spread over processes; results are
    still collected and written in grid order.
    """
    out = Path(out_dir if out_dir is not None else cfg.opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_experiment_data(cfg)
    runs = cfg.runs()
    o = cfg.opts
    forecaster = None
    if any(STRATEGIES[r["strategy"]][1] == "HMM-BL" for r in runs):
        probe = spec_for_run(next(r for r in runs if STRATEGIES[r["strategy"]][1] == "HMM-BL"),
                             cfg, len(data.calendar.rebalance_dates))
        forecaster = HmmBlForecaster(data.returns, data.aum, probe.bl, int(o["window"]),
                                     data.calendar.step, int(o["seed"]))
        try:
            for t in data.calendar.rebalance_dates:
                forecaster.regime(t)
        except (ValueError, ArithmeticError) as exc:
            log.warning("HMM fitting failed: %s", exc)
        if o["regimes"] and len(forecaster._fits) == len(data.calendar.rebalance_dates):
            write_regimes(forecaster, data, out)

    workers = max(1, int(o["workers"]))
    if workers == 1 or len(runs) == 1:
        results = [execute_run(r, cfg, data, forecaster) for r in runs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_execute_packed, [(r, cfg, data, forecaster) for r in runs]))

    for res in results:
        write_run_outputs(res, out)
    table = pd.DataFrame([_metrics_row(r) for r in results], columns=list(METRICS_HEADER))
    tmp = out / "metrics.csv.tmp"
    table.to_csv(tmp, index=False, lineterminator="\n")
    tmp.replace(out / "metrics.csv")
    return table, results


def metrics_from_files(wealth_csv, weights_csv=None, trading_days: int = TRADING_DAYS) -> MetricsReport:
    """Recompute metrics from stored ``wealth_<id>.csv`` / ``weights_<id>.csv``."""
    wf = pd.read_csv(wealth_csv)
    w = wf["wealth"].to_numpy(dtype=float)
    series = WealthSeries(tuple(wf.iloc[:, 0].astype(str)), w, w[1:] / w[:-1] - 1.0)
    traj = None
    if weights_csv is not None and Path(weights_csv).exists():
        ww = pd.read_csv(weights_csv)
        labels = tuple(ww.iloc[:, 0].astype(str))
        traj = WeightTrajectory(tuple(range(len(labels))), labels, tuple(ww.columns[1:]),
                                ww.iloc[:, 1:].to_numpy(dtype=float))
    return compute_metrics(series, traj, trading_days)
