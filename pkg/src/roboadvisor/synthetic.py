"""
Deterministic synthetic market used as the bundled reference dataset.

Eight assets: four low-volatility "bond" funds and four equity-like funds,
driven by a two-state Markov regime.  Equities earn the better Sharpe ratio
in calm markets and draw down in the stressed regime; bonds are mildly
defensive.  An AUM table and a cap-weighted index are produced alongside.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

BOND_NAMES = ("BND", "MUB", "LQD", "EMB")
RISKY_NAMES = ("VTI", "VEA", "VWO", "VNQ")
ASSETS = BOND_NAMES + RISKY_NAMES
INDEX_NAME = "SP500"

# daily means and vols per regime (normal, stressed)
_MU_N = np.array([0.5e-4, 0.4e-4, 0.6e-4, 0.8e-4, 7.0e-4, 6.5e-4, 7.5e-4, 7.0e-4])
_MU_C = np.array([0.8e-4, 0.6e-4, 0.2e-4, -0.5e-4, -6.0e-4, -6.5e-4, -8.0e-4, -7.5e-4])
_VOL_N = np.array([0.0025, 0.0022, 0.0035, 0.0045, 0.0090, 0.0095, 0.0110, 0.0105])
_VOL_C = np.array([0.0040, 0.0035, 0.0060, 0.0080, 0.0200, 0.0210, 0.0250, 0.0240])
_P_NN, _P_CC = 0.99, 0.96


def _correlation(rho_bonds, rho_risky, rho_cross):
    n = len(ASSETS)
    C = np.full((n, n), rho_cross)
    C[:4, :4] = rho_bonds
    C[4:, 4:] = rho_risky
    np.fill_diagonal(C, 1.0)
    return C


def regime_path(n: int, rng: np.random.Generator, p_nn=_P_NN, p_cc=_P_CC) -> np.ndarray:
    """Boolean array, True where the normal regime is active."""
    state = np.empty(n, dtype=bool)
    s = True
    u = rng.random(n)
    for t in range(n):
        state[t] = s
        stay = p_nn if s else p_cc
        s = s if u[t] < stay else not s
    return state


def generate_reference_dataset(n_prices: int = 2520, seed: int = 20240101, start: str = "2010-01-04"):
    """
    Build price, AUM and index tables.

    Returns
    -------
    prices, aum, index : pandas.DataFrame
        Each with a ``date`` column first.
    regimes : numpy.ndarray
        True where the normal regime generated the return of that row.
    """
    rng = np.random.default_rng(seed)
    n = n_prices - 1
    normal = regime_path(n, rng)
    L_n = np.linalg.cholesky(_correlation(0.5, 0.7, 0.1))
    L_c = np.linalg.cholesky(_correlation(0.4, 0.85, -0.1))
    Z = rng.standard_normal((n, len(ASSETS)))
    R = np.where(normal[:, None],
                 _MU_N + (Z @ L_n.T) * _VOL_N,
                 _MU_C + (Z @ L_c.T) * _VOL_C)
    prices = 100.0 * np.vstack([np.ones(len(ASSETS)), np.cumprod(1.0 + R, axis=0)])

    # AUM: fund size follows price with slow flows, equities are bigger
    base = np.array([300, 60, 40, 15, 1200, 400, 300, 200], dtype=float)
    flows = np.exp(np.cumsum(rng.normal(2e-4, 4e-3, (n_prices, len(ASSETS))), axis=0))
    aum = base * flows * prices / 100.0

    w_idx = np.array([0, 0, 0, 0, 0.7, 0.15, 0.05, 0.1])
    idx = 1000.0 * np.concatenate([[1.0], np.cumprod(1.0 + R @ w_idx)])

    dates = pd.bdate_range(start, periods=n_prices).strftime("%Y-%m-%d")
    price_df = pd.DataFrame(prices, columns=ASSETS)
    price_df.insert(0, "date", dates)
    aum_df = pd.DataFrame(aum, columns=ASSETS)
    aum_df.insert(0, "date", dates)
    idx_df = pd.DataFrame({"date": dates, INDEX_NAME: idx})
    return price_df, aum_df, idx_df, normal


def write_reference_dataset(out_dir, **kwargs) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prices, aum, idx, _ = generate_reference_dataset(**kwargs)
    paths = {"prices": out / "prices.csv", "aum": out / "aum.csv", "index": out / "index.csv"}
    for key, frame in (("prices", prices), ("aum", aum), ("index", idx)):
        frame.to_csv(paths[key], index=False, float_format="%.8f", lineterminator="\n")
    return paths


def reference_paths() -> dict[str, Path]:
    """Locations of the bundled reference CSVs."""
    root = Path(str(resources.files("roboadvisor") / "data"))
    return {k: root / f"{k}.csv" for k in ("prices", "aum", "index")}


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else str(reference_paths()["prices"].parent)
    for name, p in write_reference_dataset(target).items():
        print(name, p)
