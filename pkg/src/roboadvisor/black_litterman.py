"""
Regime-wise Black-Litterman blending of HMM forecasts.

Each regime gets a Gaussian prior on mean returns centred at
``2 * lambda_bar * Sigma @ w`` with covariance ``iota * Sigma``; views
``P mu = v`` carry noise ``alpha * Sigma``.  The two posterior legs are then
mixed with the forecast normal-regime probability.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import repair_psd
from .regimes import HmmParams, mixture_moments, propagate_regime_probability

INF = math.inf


class BlNumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class BlConfig:
    lambda_bar_0: float = 1.0
    lambda_mult_n: float = 1.2
    lambda_mult_c: float = 0.8
    iota_n: float = 0.03
    iota_c: Optional[float] = None
    alpha_n: float = 1.0
    alpha_c: float = 1.0
    pick_n: Optional[np.ndarray] = None
    pick_c: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.iota_c is None:
            object.__setattr__(self, "iota_c", 0.9 * self.iota_n)
        for name in ("iota_n", "iota_c", "alpha_n", "alpha_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def lambda_n(self) -> float:
        return self.lambda_mult_n * self.lambda_bar_0

    @property
    def lambda_c(self) -> float:
        return self.lambda_mult_c * self.lambda_bar_0

    def key(self) -> tuple:
        """Hashable summary used to cache forecasts across runs."""
        picks = tuple(None if p is None else np.asarray(p).tobytes()
                      for p in (self.pick_n, self.pick_c))
        return (self.lambda_bar_0, self.lambda_mult_n, self.lambda_mult_c, self.iota_n,
                self.iota_c, self.alpha_n, self.alpha_c) + picks


@dataclass(frozen=True)
class ForecastSet:
    r_hat: np.ndarray       # (H, N) per-period mean
    sigma_hat: np.ndarray   # (H, N, N) per-period covariance
    anchored_at: int = 0
    q: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.r_hat.shape[0]

    def __len__(self) -> int:
        return self.horizon


def prior_mean(lambda_bar: float, sigma: np.ndarray, w: np.ndarray) -> np.ndarray:
    return 2.0 * lambda_bar * (np.asarray(sigma) @ np.asarray(w))


def absolute_views(mixture_mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Views equal to the mixture mean with an identity pick matrix."""
    mu = np.asarray(mixture_mu, dtype=float)
    return mu.copy(), np.eye(mu.shape[0])


def posterior_leg(prior_mu, views, pick, iota: float, alpha: float, sigma):
    """
    Gaussian posterior of one regime leg.

    Parameters
    ----------
    prior_mu : (N,) array
    views : (K,) array
    pick : (K, N) array
    iota : float
        Prior uncertainty scale; ``0`` means the prior mean is certain.
    alpha : float
        View noise scale; ``math.inf`` means the views carry no information.
    sigma : (N, N) array

    Returns
    -------
    mean : (N,) array
    cov : (N, N) array
    """
    prior_mu = np.asarray(prior_mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if iota < 0 or alpha < 0:
        raise ValueError("iota and alpha must be nonnegative")
    if iota == 0.0:
        return prior_mu.copy(), sigma.copy()
    if math.isinf(alpha):
        return prior_mu.copy(), (1.0 + iota) * sigma
    P = np.atleast_2d(np.asarray(pick, dtype=float))
    v = np.atleast_1d(np.asarray(views, dtype=float))
    PS = P @ sigma
    M = PS @ P.T
    if np.linalg.matrix_rank(M) < M.shape[0]:
        raise BlNumericalError("P Sigma P' is singular")
    # Sigma P' (P Sigma P')^-1 == solve(M, P Sigma)' since M is symmetric
    gain = np.linalg.solve(M, PS).T
    ratio = iota / (iota + alpha)
    mean = prior_mu + ratio * gain @ (v - P @ prior_mu)
    cov = (1.0 + iota) * sigma - (iota * iota / (iota + alpha)) * gain @ PS
    return mean, 0.5 * (cov + cov.T)


def mix_posteriors(q: float, leg_n, leg_c):
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q={q} outside [0, 1]")
    r_n, S_n = leg_n
    r_c, S_c = leg_c
    r = q * r_n + (1.0 - q) * r_c
    rr = np.outer(r, r)
    S = (q * S_n + (1.0 - q) * S_c
         + q * (np.outer(r_n, r_n) - rr) + (1.0 - q) * (np.outer(r_c, r_c) - rr))
    return r, repair_psd(S)


def build_forecast_set(params: HmmParams, q_t: float, w_t, cfg: BlConfig, H: int,
                       days_per_period: int = 1, anchored_at: int = 0) -> ForecastSet:
    """
    HMM-BL forecasts for ``H`` rebalance periods.

    The regime probability is propagated daily over ``H * days_per_period``
    days starting at ``q_t``; daily mixture means and covariances are summed
    within each period.  Priors, views, leg posteriors and the final mixing
    then run on the period-scale moments, with the period's average regime
    probability as mixing weight.
    """
    if H < 1 or days_per_period < 1:
        raise ValueError("H and days_per_period must be >= 1")
    d = days_per_period
    path = propagate_regime_probability(q_t, params.p_nn, params.p_cc, H * d - 1, anchored_at)
    daily = mixture_moments(params, path)
    w_t = np.asarray(w_t, dtype=float)
    N = w_t.shape[0]
    r_hat = np.empty((H, N))
    s_hat = np.empty((H, N, N))
    q_per = np.empty(H)
    for j in range(H):
        sl = slice(j * d, (j + 1) * d)
        mu_p = daily.mu[sl].sum(axis=0)
        S_p = daily.sigma[sl].sum(axis=0) if d > 1 else daily.sigma[j]
        q_p = float(path.q[sl].mean()) if d > 1 else float(path.q[j])
        assert 0.0 <= q_p <= 1.0
        legs = []
        for lam, iota, alpha, pick in (
            (cfg.lambda_n, cfg.iota_n, cfg.alpha_n, cfg.pick_n),
            (cfg.lambda_c, cfg.iota_c, cfg.alpha_c, cfg.pick_c),
        ):
            prior = prior_mean(lam, S_p, w_t)
            if pick is None:
                v, P = absolute_views(mu_p)
            else:
                P = np.asarray(pick, dtype=float)
                v = P @ mu_p
            legs.append(posterior_leg(prior, v, P, iota, alpha, S_p))
        r_hat[j], s_hat[j] = mix_posteriors(q_p, legs[0], legs[1])
        q_per[j] = q_p
    return ForecastSet(r_hat, s_hat, anchored_at, q_per)
