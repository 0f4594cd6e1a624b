"""Multivariate GCM: maximum over pairwise statistics, Gaussian calibration.

For ``d_X`` columns of X and ``d_Y`` columns of Y the test statistic is
``S_n = max_{j,k} |T_jk|``. Its null distribution is approximated by the
maximum absolute entry of a centred Gaussian vector whose correlation matrix
is the sample correlation of the residual-product vectors ``R_jk``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from ._stats import as_generator
from .core import DEGENERACY_TOL, gcm_statistic
from .data import DataSet
from .errors import DataError, DegenerateStatisticError
from .regression import make_backend

DEFAULT_DRAWS = 5000
PSD_JITTER = 1e-8

Transform = Union[str, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class MultiGcmResult:
    t_matrix: np.ndarray
    s_n: float
    sigma_hat: np.ndarray
    g_quantile: float
    p_value: float
    draws: int
    reject: bool
    alpha: float


@dataclass(frozen=True)
class FeatureLift:
    """Fixed maps ``X -> f_X(X, Z)`` and ``Y -> f_Y(Y, Z)`` applied before testing.

    Each map is either a built-in name (``raw``, ``square``, ``abs``) or a
    callable ``(block, z_block) -> array`` that must not depend on the data
    beyond its arguments.
    """

    map_x: Transform = "raw"
    map_y: Transform = "raw"


def _apply(transform: Transform, block: np.ndarray, z: np.ndarray) -> np.ndarray:
    if transform == "raw":
        out = block
    elif transform == "square":
        out = np.hstack([block, block**2])
    elif transform == "abs":
        out = np.hstack([block, np.abs(block)])
    elif callable(transform):
        out = np.asarray(transform(block, z), dtype=float)
        if out.ndim == 1:
            out = out.reshape(-1, 1)
    else:
        raise ValueError(f"unknown lift {transform!r}")
    if not np.all(np.isfinite(out)):
        raise DataError("feature lift produced non-finite values")
    return out


def feature_lift_apply(data: DataSet, lift: FeatureLift | None) -> DataSet:
    if lift is None:
        return data
    return DataSet(
        _apply(lift.map_x, data.x_block, data.z_block),
        _apply(lift.map_y, data.y_block, data.z_block),
        data.z_block,
    )


def gcm_matrix(data: DataSet, backend_x="krr", backend_y=None):
    """Pairwise statistics ``T_jk`` and the residual products behind them.

    Each column of X and of Y is regressed once; the residuals are reused
    across pairs. Returns ``(t_matrix, R_store)`` where ``R_store`` has shape
    ``(d_X * d_Y, n)`` with row ``j * d_Y + k`` holding ``R_jk``.
    """
    bx = make_backend(backend_x)
    by = make_backend(backend_x if backend_y is None else backend_y)
    if bx == by:
        fits = bx.fit_many(data.z_block, np.hstack([data.x_block, data.y_block]))
        fx, fy = fits[: data.d_x], fits[data.d_x :]
    else:
        fx = bx.fit_many(data.z_block, data.x_block)
        fy = by.fit_many(data.z_block, data.y_block)
    rx = np.stack([f.residuals for f in fx])
    ry = np.stack([f.residuals for f in fy])
    R_store = (rx[:, None, :] * ry[None, :, :]).reshape(data.d_x * data.d_y, data.n)
    t = np.empty((data.d_x, data.d_y))
    for j in range(data.d_x):
        for k in range(data.d_y):
            try:
                t[j, k] = gcm_statistic(R_store[j * data.d_y + k])[0]
            except DegenerateStatisticError as exc:
                raise DegenerateStatisticError(
                    f"pair (x{j + 1}, y{k + 1}): {exc}", pair=(j, k)
                ) from None
    return t, R_store


def residual_correlation(R_store) -> np.ndarray:
    """Sample correlation matrix of the rows of ``R_store`` (1/n convention)."""
    R = np.atleast_2d(np.asarray(R_store, dtype=float))
    n = R.shape[1]
    mean = R.mean(axis=1)
    var = (R * R).mean(axis=1) - mean**2
    bad = np.flatnonzero(~(var > DEGENERACY_TOL * (1.0 + (R * R).mean(axis=1))))
    if bad.size:
        raise DegenerateStatisticError(f"residual-product vector {int(bad[0])} is degenerate")
    sd = np.sqrt(var)
    cov = R @ R.T / n - np.outer(mean, mean)
    sigma = cov / np.outer(sd, sd)
    sigma = 0.5 * (sigma + sigma.T)
    np.fill_diagonal(sigma, 1.0)
    return np.clip(sigma, -1.0, 1.0)


def repair_psd(sigma) -> np.ndarray:
    """Clip negative eigenvalues at zero and add ``1e-8`` to the spectrum."""
    sigma = np.asarray(sigma, dtype=float)
    w, U = np.linalg.eigh(0.5 * (sigma + sigma.T))
    w = np.clip(w, 0.0, None) + PSD_JITTER
    return (U * w) @ U.T


def _sqrt_psd(sigma: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (sigma + sigma.T))
    w = np.clip(w, 0.0, None) + PSD_JITTER
    return (U * np.sqrt(w)) @ U.T


def max_abs_draws(sigma_hat, B: int, rng=None) -> np.ndarray:
    """``B`` draws of ``max |G|`` with ``G ~ N(0, sigma_hat)`` (after PSD repair)."""
    sigma = np.atleast_2d(np.asarray(sigma_hat, dtype=float))
    if sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"sigma_hat must be square, got {sigma.shape}")
    if np.max(np.abs(sigma - sigma.T)) > 1e-8:
        raise ValueError("sigma_hat is not symmetric")
    root = _sqrt_psd(sigma)
    g = as_generator(rng).standard_normal((int(B), sigma.shape[0])) @ root
    return np.abs(g).max(axis=1)


def _quantile(draws: np.ndarray, level: float) -> float:
    return float(np.quantile(draws, level, method="inverted_cdf"))


def mc_quantile(sigma_hat, level: float, B: int = DEFAULT_DRAWS, seed=None) -> float:
    """Monte-Carlo ``level``-quantile of the max-abs Gaussian with covariance ``sigma_hat``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if B < 1000:
        raise ValueError(f"need B >= 1000 draws, got {B}")
    return _quantile(max_abs_draws(sigma_hat, B, seed), level)


def multi_gcm_test(
    data: DataSet,
    backend_x="krr",
    backend_y=None,
    alpha: float = 0.05,
    B: int = DEFAULT_DRAWS,
    seed=None,
    lift: FeatureLift | None = None,
) -> MultiGcmResult:
    """Max-statistic GCM test with Monte-Carlo Gaussian calibration.

    Rejects when ``S_n`` exceeds the ``1 - alpha`` quantile of the simulated
    maxima. The p-value is ``(1 + #{draws >= S_n}) / (B + 1)``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if B < 1000:
        raise ValueError(f"need B >= 1000 draws, got {B}")
    data = feature_lift_apply(data, lift)
    t, R_store = gcm_matrix(data, backend_x, backend_y)
    sigma = residual_correlation(R_store)
    s_n = float(np.abs(t).max())
    draws = max_abs_draws(sigma, B, seed)
    g = _quantile(draws, 1.0 - alpha)
    p = (1.0 + np.count_nonzero(draws >= s_n)) / (B + 1.0)
    return MultiGcmResult(t, s_n, sigma, g, float(p), int(B), bool(s_n > g), alpha)
