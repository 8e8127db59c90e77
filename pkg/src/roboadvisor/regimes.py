"""
Two-regime Gaussian hidden Markov model.

State 0 is the normal regime ``n`` and state 1 the contraction regime ``c``.
Fitting is plain Baum-Welch on a trailing window; the forward/backward passes
are compiled with numba because the engine refits at every rebalance date.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .linalg import EIG_FLOOR, repair_psd
from .market_data import InsufficientDataError, ReturnPanel


class HmmNumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class HmmParams:
    mu_n: np.ndarray
    mu_c: np.ndarray
    sigma_n: np.ndarray
    sigma_c: np.ndarray
    p_nn: float
    p_cc: float
    fitted_at: int = 0
    loglik_history: tuple[float, ...] = field(default=(), compare=False)
    converged: bool = field(default=True, compare=False)

    @property
    def transition(self) -> np.ndarray:
        return np.array([[self.p_nn, 1.0 - self.p_nn], [1.0 - self.p_cc, self.p_cc]])

    def stationary(self) -> float:
        """Long-run probability of the normal regime."""
        den = (1.0 - self.p_nn) + (1.0 - self.p_cc)
        if den <= 0.0:
            return 0.5
        return (1.0 - self.p_cc) / den

    def swapped(self) -> "HmmParams":
        return HmmParams(self.mu_c, self.mu_n, self.sigma_c, self.sigma_n,
                         self.p_cc, self.p_nn, self.fitted_at, self.loglik_history, self.converged)


@dataclass(frozen=True)
class RegimePath:
    q: np.ndarray
    anchored_at: int = 0

    def __len__(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class MixtureMoments:
    mu: np.ndarray      # (L, N)
    sigma: np.ndarray   # (L, N, N)

    def __len__(self) -> int:
        return self.mu.shape[0]


@numba.njit(cache=True)
def _forward_backward(logB, trans, init):
    T = logB.shape[0]
    alpha = np.empty((T, 2))
    beta = np.empty((T, 2))
    b = np.empty((T, 2))
    scale = np.empty(T)
    ll = 0.0
    for t in range(T):
        m = max(logB[t, 0], logB[t, 1])
        b[t, 0] = np.exp(logB[t, 0] - m)
        b[t, 1] = np.exp(logB[t, 1] - m)
        if t == 0:
            a0 = init[0] * b[t, 0]
            a1 = init[1] * b[t, 1]
        else:
            a0 = (alpha[t - 1, 0] * trans[0, 0] + alpha[t - 1, 1] * trans[1, 0]) * b[t, 0]
            a1 = (alpha[t - 1, 0] * trans[0, 1] + alpha[t - 1, 1] * trans[1, 1]) * b[t, 1]
        s = a0 + a1
        scale[t] = s
        alpha[t, 0] = a0 / s
        alpha[t, 1] = a1 / s
        ll += np.log(s) + m
    beta[T - 1, 0] = 1.0
    beta[T - 1, 1] = 1.0
    for t in range(T - 2, -1, -1):
        e0 = b[t + 1, 0] * beta[t + 1, 0]
        e1 = b[t + 1, 1] * beta[t + 1, 1]
        beta[t, 0] = (trans[0, 0] * e0 + trans[0, 1] * e1) / scale[t + 1]
        beta[t, 1] = (trans[1, 0] * e0 + trans[1, 1] * e1) / scale[t + 1]
    gamma = alpha * beta
    for t in range(T):
        s = gamma[t, 0] + gamma[t, 1]
        gamma[t, 0] /= s
        gamma[t, 1] /= s
    xi = np.zeros((2, 2))
    for t in range(T - 1):
        for i in range(2):
            for j in range(2):
                xi[i, j] += (alpha[t, i] * trans[i, j] * b[t + 1, j] * beta[t + 1, j]
                             / scale[t + 1])
    return gamma, xi, ll


@numba.njit(cache=True)
def _forward_filter(logB, trans, init):
    T = logB.shape[0]
    out = np.empty((T, 2))
    p0 = init[0]
    p1 = init[1]
    for t in range(T):
        m = max(logB[t, 0], logB[t, 1])
        if t > 0:
            q0 = p0 * trans[0, 0] + p1 * trans[1, 0]
            q1 = p0 * trans[0, 1] + p1 * trans[1, 1]
        else:
            q0 = p0
            q1 = p1
        a0 = q0 * np.exp(logB[t, 0] - m)
        a1 = q1 * np.exp(logB[t, 1] - m)
        s = a0 + a1
        p0 = a0 / s
        p1 = a1 / s
        out[t, 0] = p0
        out[t, 1] = p1
    return out


def _log_gauss(X, mu, sigma):
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise HmmNumericalError("emission covariance is singular") from exc
    d = X.shape[1]
    Z = np.linalg.solve(L, (X - mu).T)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (np.einsum("ij,ij->j", Z, Z) + logdet + d * np.log(2.0 * np.pi))


def _emission_logs(X, params: HmmParams):
    return np.column_stack([
        _log_gauss(X, params.mu_n, params.sigma_n),
        _log_gauss(X, params.mu_c, params.sigma_c),
    ])


def _weighted_moments(X, w):
    tot = w.sum()
    mu = w @ X / tot
    D = X - mu
    cov = (D.T * w) @ D / tot
    return mu, repair_psd(cov, EIG_FLOOR)


def _median_split(X, seed):
    level = X.mean(axis=1)
    med = np.median(level)
    high = level > med
    ties = np.flatnonzero(level == med)
    if ties.size:
        rng = np.random.default_rng(seed)
        high[ties] = rng.random(ties.size) < 0.5
    return high.astype(float)


def fit_hmm(window: ReturnPanel, seed: int = 0, max_iter: int = 200, ll_tol: float = 1e-6,
            fitted_at: int = 0) -> HmmParams:
    """
    Fit the two-regime Gaussian HMM by Baum-Welch.

    The start splits the rows at the median of their cross-sectional mean
    return (upper half seeds the normal regime); ``seed`` only breaks ties
    at the median.  Covariances are repaired to PSD after every M-step and
    the final states are relabelled so that the normal regime has the larger
    average mean.

    Raises
    ------
    InsufficientDataError
        Fewer than ``10 * N`` rows.
    HmmNumericalError
        Non-finite likelihood or a singular emission covariance.
    """
    X = np.asarray(window.values, dtype=float)
    T, N = X.shape
    if T < 10 * N:
        raise InsufficientDataError(f"HMM needs at least {10 * N} rows, got {T}")
    if not np.all(np.isfinite(X)):
        raise InsufficientDataError("HMM window contains non-finite returns")

    w_n = _median_split(X, seed)
    mu_n, S_n = _weighted_moments(X, w_n)
    mu_c, S_c = _weighted_moments(X, 1.0 - w_n)
    params = HmmParams(mu_n, mu_c, S_n, S_c, 0.9, 0.9, fitted_at)
    init = np.array([0.5, 0.5])

    history = []
    converged = False
    for _ in range(max_iter):
        logB = _emission_logs(X, params)
        gamma, xi, ll = _forward_backward(logB, params.transition, init)
        if not np.isfinite(ll):
            raise HmmNumericalError("EM produced a non-finite log-likelihood")
        history.append(float(ll))
        if len(history) > 1 and history[-1] - history[-2] < ll_tol:
            converged = True
            break
        g_n, g_c = gamma[:, 0], gamma[:, 1]
        if g_n.sum() < 1e-8 or g_c.sum() < 1e-8:
            raise HmmNumericalError("one regime lost all responsibility")
        mu_n, S_n = _weighted_moments(X, g_n)
        mu_c, S_c = _weighted_moments(X, g_c)
        row = xi.sum(axis=1)
        p_nn = float(xi[0, 0] / row[0]) if row[0] > 0 else 1.0
        p_cc = float(xi[1, 1] / row[1]) if row[1] > 0 else 1.0
        params = HmmParams(mu_n, mu_c, S_n, S_c, p_nn, p_cc, fitted_at)

    params = HmmParams(params.mu_n, params.mu_c, params.sigma_n, params.sigma_c,
                       params.p_nn, params.p_cc, fitted_at, tuple(history), converged)
    if params.mu_n.mean() < params.mu_c.mean():
        params = params.swapped()
    return params


def filtered_probabilities(params: HmmParams, window: ReturnPanel) -> np.ndarray:
    """Normal-regime filtered probability after each row of ``window``."""
    X = np.asarray(window.values, dtype=float)
    if X.shape[0] == 0:
        raise InsufficientDataError("empty window")
    logB = _emission_logs(X, params)
    pi0 = params.stationary()
    out = _forward_filter(logB, params.transition, np.array([pi0, 1.0 - pi0]))
    return np.clip(out[:, 0], 0.0, 1.0)


def filter_normal_probability(params: HmmParams, window: ReturnPanel) -> float:
    """Forward-filtered P(normal regime) at the last row, started from the stationary law."""
    return float(filtered_probabilities(params, window)[-1])


def propagate_regime_probability(q_t: float, p_nn: float, p_cc: float, steps: int,
                                 anchored_at: int = 0) -> RegimePath:
    for p in (q_t, p_nn, p_cc):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    q = np.empty(steps + 1)
    q[0] = q_t
    for k in range(1, steps + 1):
        q[k] = q[k - 1] * p_nn + (1.0 - q[k - 1]) * (1.0 - p_cc)
    return RegimePath(q, anchored_at)


def mixture_moments(params: HmmParams, path: RegimePath) -> MixtureMoments:
    """Mean and covariance of the two-Gaussian mixture at every point of ``path``."""
    L = len(path)
    N = params.mu_n.shape[0]
    mu = np.empty((L, N))
    sigma = np.empty((L, N, N))
    on = np.outer(params.mu_n, params.mu_n)
    oc = np.outer(params.mu_c, params.mu_c)
    for k, q in enumerate(path.q):
        m = q * params.mu_n + (1.0 - q) * params.mu_c
        mm = np.outer(m, m)
        S = (q * params.sigma_n + (1.0 - q) * params.sigma_c
             + q * (on - mm) + (1.0 - q) * (oc - mm))
        mu[k] = m
        sigma[k] = repair_psd(S)
    return MixtureMoments(mu, sigma)
