"""
Price and assets-under-management ingestion.

CSV layout: first column ``date``, one column per ticker, empty cell means
missing.  Day arithmetic everywhere downstream uses row indices; the date
labels are carried along only for output.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd


class MarketDataError(ValueError):
    """Base class for ingestion and calendar errors."""


class DataFormatError(MarketDataError):
    pass


class EmptyInputError(MarketDataError):
    pass


class DuplicateDateError(MarketDataError):
    pass


class InsufficientDataError(MarketDataError):
    pass


class CalendarError(MarketDataError):
    pass


class DegenerateRowError(MarketDataError):
    pass


@dataclass(frozen=True)
class PriceTable:
    dates: tuple[str, ...]
    assets: tuple[str, ...]
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.dates)

    def column(self, asset: str) -> np.ndarray:
        return self.values[:, self.assets.index(asset)]


@dataclass(frozen=True)
class ReturnPanel:
    """Simple returns; row ``t`` runs from price date ``t`` to price date ``t+1``.

    ``dates[t]`` labels the end of the interval and ``base_date`` is the
    first price date, so the decision date for row ``t`` is the price date
    at which the return is still unknown.
    """

    dates: tuple[str, ...]
    assets: tuple[str, ...]
    values: np.ndarray
    base_date: str = ""

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_assets(self) -> int:
        return self.values.shape[1]

    def decision_date(self, t: int) -> str:
        return self.base_date if t == 0 else self.dates[t - 1]

    def window(self, end: int, length: int) -> "ReturnPanel":
        """Trailing rows ``[end - length, end)``; only data known at ``end``."""
        if end > len(self) or end - length < 0:
            raise InsufficientDataError(
                f"window of {length} rows ending at {end} exceeds panel of {len(self)} rows"
            )
        lo = end - length
        return ReturnPanel(
            self.dates[lo:end], self.assets, self.values[lo:end], self.decision_date(lo)
        )


@dataclass(frozen=True)
class RebalanceCalendar:
    horizon_T: int
    rebalance_dates: tuple[int, ...]
    non_rebalance_dates: tuple[int, ...]
    step: int
    periods: int

    def period_end(self, k: int) -> int:
        """Exclusive end day of the holding interval started at rebalance ``k``."""
        return min(self.rebalance_dates[k] + self.step, self.horizon_T)


@dataclass(frozen=True)
class EquilibriumWeights:
    dates: tuple[str, ...]
    assets: tuple[str, ...]
    weights: np.ndarray

    def at(self, date: str) -> np.ndarray:
        """Row for the latest date on or before ``date``; equal weights if none."""
        key = pd.Timestamp(date)
        stamps = pd.to_datetime(pd.Index(self.dates))
        pos = int(stamps.searchsorted(key, side="right")) - 1
        if pos < 0:
            n = len(self.assets)
            return np.full(n, 1.0 / n)
        return self.weights[pos]


def _read_table(path, policy: str, strictly_positive: bool) -> PriceTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise EmptyInputError(f"{path}: file is empty") from exc
    if raw.shape[0] == 0 or raw.shape[1] < 2:
        raise EmptyInputError(f"{path}: no data rows or no asset columns")
    date_col = raw.columns[0]
    assets = tuple(str(c) for c in raw.columns[1:])

    stamps = []
    for i, label in enumerate(raw[date_col]):
        try:
            stamps.append(pd.Timestamp(label.strip()))
        except (ValueError, TypeError) as exc:
            raise DataFormatError(f"{path}: row {i + 1}: unparseable date {label!r}") from exc

    values = np.full((raw.shape[0], len(assets)), np.nan)
    for j, col in enumerate(raw.columns[1:]):
        for i, cell in enumerate(raw[col]):
            cell = cell.strip()
            if cell == "":
                continue
            try:
                v = float(cell)
            except ValueError as exc:
                raise DataFormatError(
                    f"{path}: row {i + 1}, column {col!r}: non-numeric value {cell!r}"
                ) from exc
            if not np.isfinite(v) or v < 0 or (strictly_positive and v == 0):
                raise DataFormatError(f"{path}: row {i + 1}, column {col!r}: invalid value {v}")
            values[i, j] = v

    order = np.argsort(np.array(stamps, dtype="datetime64[ns]"), kind="stable")
    sorted_stamps = [stamps[k] for k in order]
    for a, b in zip(sorted_stamps, sorted_stamps[1:]):
        if a == b:
            raise DuplicateDateError(f"{path}: duplicate date {a.date()}")
    dates = tuple(str(raw[date_col].iloc[k]).strip() for k in order)
    values = values[order]

    if policy == "ffill":
        values = pd.DataFrame(values).ffill().to_numpy()
        complete = ~np.isnan(values).any(axis=1)
        if not complete.any():
            raise EmptyInputError(f"{path}: no complete row after forward fill")
        first = int(np.argmax(complete))
        dates, values = dates[first:], values[first:]
    elif policy == "drop":
        keep = ~np.isnan(values).any(axis=1)
        dates = tuple(d for d, k in zip(dates, keep) if k)
        values = values[keep]
        if len(dates) == 0:
            raise EmptyInputError(f"{path}: no complete row")
    elif policy != "keep":
        raise ValueError(f"unknown missing-value policy {policy!r}")
    return PriceTable(dates, assets, values)


def load_price_table(path, policy: str = "ffill") -> PriceTable:
    """
    Load a dated price CSV.

    Parameters
    ----------
    path : str or Path
        CSV with a ``date`` first column and one price column per ticker.
    policy : {"ffill", "drop", "keep"}
        ``"ffill"`` forward-fills interior gaps and drops leading rows that
        still have missing values; ``"drop"`` removes any incomplete row;
        ``"keep"`` leaves NaNs in place (used for AUM tables).

    Raises
    ------
    EmptyInputError, DataFormatError, DuplicateDateError
    """
    return _read_table(path, policy, strictly_positive=True)


def load_aum_table(path, policy: str = "keep") -> PriceTable:
    """Same schema as prices, but zeros are allowed and gaps are kept by default."""
    return _read_table(path, policy, strictly_positive=False)


def to_returns(prices: PriceTable) -> ReturnPanel:
    if len(prices) < 2:
        raise InsufficientDataError("need at least two price rows to form returns")
    P = prices.values
    R = (P[1:] - P[:-1]) / P[:-1]
    return ReturnPanel(prices.dates[1:], prices.assets, R, prices.dates[0])


def build_calendar(start: int, step: int, periods: int, total_T: int) -> RebalanceCalendar:
    if step < 1 or periods < 1 or start < 0:
        raise CalendarError("step and periods must be >= 1 and start >= 0")
    last = start + step * (periods - 1)
    if last >= total_T:
        raise CalendarError(f"last rebalance day {last} is beyond horizon T={total_T}")
    reb = tuple(range(start, last + 1, step))
    reb_set = set(reb)
    nr = tuple(d for d in range(total_T) if d not in reb_set)
    return RebalanceCalendar(total_T, reb, nr, step, periods)


def equilibrium_weights(aum: PriceTable) -> EquilibriumWeights:
    """
    Normalise AUM rows into probability vectors.

    Rows with every value missing fall back to equal weights; partially
    missing cells count as zero.
    """
    V = np.asarray(aum.values, dtype=float)
    n = V.shape[1]
    if np.any(V[~np.isnan(V)] < 0):
        raise DegenerateRowError("AUM values must be nonnegative")
    W = np.empty_like(V)
    for t, row in enumerate(V):
        if np.all(np.isnan(row)):
            W[t] = 1.0 / n
            continue
        row = np.nan_to_num(row, nan=0.0)
        total = row.sum()
        if total <= 0:
            raise DegenerateRowError(f"AUM row {aum.dates[t]} sums to zero")
        W[t] = row / total
    return EquilibriumWeights(aum.dates, aum.assets, W)


def equal_weights(assets: Sequence[str], dates: Sequence[str] = ()) -> EquilibriumWeights:
    n = len(assets)
    return EquilibriumWeights(tuple(dates), tuple(assets), np.full((len(dates), n), 1.0 / n))


def write_table(path, dates: Sequence[str], columns: Sequence[str], values: np.ndarray,
                date_header: str = "date") -> None:
    """Write a dated matrix as CSV atomically (temp file then rename)."""
    path = Path(path)
    frame = pd.DataFrame(np.asarray(values), columns=list(columns))
    frame.insert(0, date_header, list(dates))
    tmp = path.with_suffix(path.suffix + ".tmp")
    frame.to_csv(tmp, index=False, float_format="%.12g", lineterminator="\n")
    tmp.replace(path)
