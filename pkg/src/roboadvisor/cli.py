"""Command-line entry point: ``roboadvisor {backtest,grid,forecast,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .backtest import (ConfigError, ExperimentConfig, load_experiment_data,
                       metrics_from_files, run_experiment, METRIC_NAMES)
from .black_litterman import BlConfig
from .engine import HmmBlForecaster, sample_moment_forecasts
from .market_data import MarketDataError

log = logging.getLogger("roboadvisor")


def _read_config(path) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys to values")
    return raw, path.parent


def _overrides(args) -> dict:
    out = {"prices": args.prices, "aum": args.aum, "index": args.index,
           "out_dir": args.out_dir, "seed": args.seed}
    if getattr(args, "workers", None) is not None:
        out["workers"] = args.workers
    return out


def _load_config(args, extra=None, defaults=None) -> ExperimentConfig:
    raw, base = _read_config(args.config)
    for key, value in (defaults or {}).items():
        raw.setdefault(key, value)
    ov = _overrides(args)
    ov.update(extra or {})
    # command-line paths are relative to the working directory, config paths to the config file
    for key in ("prices", "aum", "index", "out_dir"):
        if ov.get(key) is not None:
            ov[key] = str(Path(ov[key]).resolve())
    return ExperimentConfig.from_mapping(raw, base, ov)


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    table, _ = run_experiment(cfg, Path(cfg.opts["out_dir"]))
    print(table.to_string(index=False))
    return 0


def cmd_backtest(args) -> int:
    extra = {}
    if args.strategy:
        extra["strategies"] = [args.strategy]
    for key in ("gamma", "gamma_r", "phi", "eta", "delta", "H"):
        v = getattr(args, key)
        if v is not None:
            extra[key] = [v]
    cfg = _load_config(args, extra, {"strategies": ["MV-BL"]})
    runs = cfg.runs()
    if len(runs) != 1:
        raise ConfigError(f"backtest needs exactly one run, config expands to {len(runs)}; use 'grid'")
    table, results = run_experiment(cfg, Path(cfg.opts["out_dir"]))
    print(table.to_string(index=False))
    return 0 if results[0].status == "ok" else 1


def cmd_forecast(args) -> int:
    cfg = _load_config(args, defaults={"strategies": ["MV-BL"]})
    data = load_experiment_data(cfg)
    returns = data.returns
    if args.date is None:
        t = data.calendar.rebalance_dates[0]
    else:
        decision = [returns.decision_date(i) for i in range(len(returns))]
        if args.date not in decision:
            raise ConfigError(f"date {args.date} not in the price table")
        t = decision.index(args.date)
    H = int(args.H or cfg.grid["H"][0])
    window = int(cfg.opts["window"])
    if args.forecaster == "sample-moments":
        fs = sample_moment_forecasts(returns.window(t, window), H, data.calendar.step, t)
        q = np.full(H, np.nan)
    else:
        o = cfg.opts
        bl = BlConfig(lambda_bar_0=float(o["lambda_bar_0"]), iota_n=float(o["iota_n"]))
        fc = HmmBlForecaster(returns, data.aum, bl, window, data.calendar.step, int(o["seed"]))
        fs = fc.forecast(t, H)
        params, q_t = fc.regime(t)
        log.info("p_nn=%.4f p_cc=%.4f q_t=%.4f", params.p_nn, params.p_cc, q_t)
        q = fs.q
    rows = []
    for s in range(H):
        vol = np.sqrt(np.diag(fs.sigma_hat[s]))
        for i, a in enumerate(returns.assets):
            rows.append({"step": s + 1, "asset": a, "r_hat": fs.r_hat[s, i], "vol_hat": vol[i],
                         "q": q[s]})
    frame = pd.DataFrame(rows)
    out = Path(cfg.opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"forecast_{returns.decision_date(t)}.csv"
    frame.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    print(frame.to_string(index=False))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out_dir or "results")
    wealth_files = sorted(out.glob("wealth_*.csv"))
    if not wealth_files:
        raise FileNotFoundError(f"no wealth_*.csv files in {out}")
    rows = []
    for wf in wealth_files:
        rid = wf.stem[len("wealth_"):]
        m = metrics_from_files(wf, out / f"weights_{rid}.csv")
        rows.append({"run_id": rid, **m.as_dict(), "flags": ";".join(m.flags)})
    table = pd.DataFrame(rows, columns=["run_id", *METRIC_NAMES, "flags"])
    table.to_csv(out / "report.csv", index=False, float_format="%.10g", lineterminator="\n")
    print(table.to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--prices", help="price CSV (date + one column per asset)")
    common.add_argument("--aum", help="AUM CSV for equilibrium weights")
    common.add_argument("--index", help="index CSV for the SP500 benchmark")
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--out-dir", dest="out_dir", help="output directory")
    common.add_argument("--seed", type=int, help="seed for EM tie-breaks and noisy profiles")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="roboadvisor", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grid", parents=[common], help="run an experiment grid")
    g.add_argument("--workers", type=int, help="parallel worker processes")
    g.set_defaults(func=cmd_grid)

    b = sub.add_parser("backtest", parents=[common], help="run a single strategy")
    b.add_argument("--strategy", help="MV-BL, MRB-BL, MV-Est-MPC, MV-Est-myopic, MRB-Est, 1/N, SP500")
    for key, typ in (("gamma", float), ("gamma_r", float), ("phi", float), ("eta", float),
                     ("delta", float), ("H", int)):
        b.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ)
    b.set_defaults(func=cmd_backtest)

    f = sub.add_parser("forecast", parents=[common], help="forecast diagnostics for one date")
    f.add_argument("--date", help="decision date (default: first rebalance)")
    f.add_argument("--H", type=int)
    f.add_argument("--forecaster", choices=["HMM-BL", "sample-moments"], default="HMM-BL")
    f.set_defaults(func=cmd_forecast)

    r = sub.add_parser("report", parents=[common], help="recompute metrics from stored CSVs")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, MarketDataError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
