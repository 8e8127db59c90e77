"""Small covariance helpers shared by the forecasting modules."""
from __future__ import annotations

import numpy as np

EIG_FLOOR = 1e-10


def repair_psd(S: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetrise ``S`` and lift eigenvalues below ``floor`` up to ``floor``.

    Matrices that are already symmetric with spectrum above ``floor`` come back
    unchanged bit for bit.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= floor:
        return S
    S = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (S + S.T)


def min_eig(S: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (S + S.T)).min())


def random_psd(rng: np.random.Generator, n: int, cond: float = 50.0) -> np.ndarray:
    """Random symmetric positive definite matrix with bounded condition number."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.exp(rng.uniform(0.0, np.log(cond), n))
    return (Q * w) @ Q.T
