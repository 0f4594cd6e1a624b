"""Univariate generalised covariance measure.

The statistic is the normalised mean of the residual products
``R_i = (x_i - f(z_i)) (y_i - g(z_i))``::

    T = sqrt(n) * mean(R) / sqrt(mean(R^2) - mean(R)^2)

Under conditional independence, and when both regressions predict well
enough, ``T`` is asymptotically standard normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._stats import as_generator, norm_ppf, two_sided_p
from .data import DataSet
from .errors import DataError, DegenerateStatisticError, InsufficientSampleError
from .regression import Backend, RegressionFit, make_backend

DEGENERACY_TOL = 1e-12


@dataclass(frozen=True)
class GcmResult:
    statistic: float
    tau_n: float
    tau_d: float
    p_value: float
    reject: bool
    alpha: float
    n: int
    backend_tags: tuple[str, str]
    fit_x: RegressionFit | None = field(default=None, repr=False, compare=False)
    fit_y: RegressionFit | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class CondCovEstimate:
    """Point estimate and normal confidence interval for ``E cov(X, Y | Z)``."""

    rho_hat: float
    sigma_hat: float
    ci_lower: float
    ci_upper: float
    alpha: float
    split_used: bool
    n_eval: int


@dataclass(frozen=True)
class Diagnostics:
    """In-sample prediction errors against the known conditional means."""

    a_f: float
    a_g: float
    n: int

    @property
    def product_check(self) -> float:
        """``n * A_f * A_g``; must vanish for the normal limit to hold."""
        return self.n * self.a_f * self.a_g


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def residual_products(fit_x: RegressionFit, fit_y: RegressionFit) -> np.ndarray:
    rx = np.asarray(getattr(fit_x, "residuals", fit_x), dtype=float)
    ry = np.asarray(getattr(fit_y, "residuals", fit_y), dtype=float)
    if rx.shape != ry.shape:
        raise DataError(f"residual lengths differ: {rx.shape} vs {ry.shape}")
    return rx * ry


def gcm_statistic(R) -> tuple[float, float, float]:
    """Return ``(T, tau_N, tau_D)`` for residual products ``R`` (1/n variance)."""
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    if n < 2:
        raise InsufficientSampleError(f"need at least 2 residual products, got {n}")
    m1 = R.mean()
    m2 = (R * R).mean()
    var = m2 - m1 * m1
    if not var > DEGENERACY_TOL * (1.0 + m2):
        raise DegenerateStatisticError(
            f"residual products have zero variance (var={var:.3g})"
        )
    tau_n = math.sqrt(n) * m1
    tau_d = math.sqrt(var)
    return tau_n / tau_d, tau_n, tau_d


def _fits(data: DataSet, backend_x, backend_y):
    bx, by = make_backend(backend_x), make_backend(backend_y)
    if data.d_x != 1 or data.d_y != 1:
        raise DataError("univariate GCM needs d_X = d_Y = 1; use multi_gcm_test")
    if bx == by:
        fx, fy = bx.fit_many(data.z_block, np.hstack([data.x_block, data.y_block]))
    else:
        (fx,) = bx.fit_many(data.z_block, data.x_block)
        (fy,) = by.fit_many(data.z_block, data.y_block)
    return bx, by, fx, fy


def _result(T, tau_n, tau_d, alpha, n, bx: Backend, by: Backend, fx, fy) -> GcmResult:
    p = two_sided_p(T)
    return GcmResult(float(T), float(tau_n), float(tau_d), p, p <= alpha, alpha, n,
                     (bx.tag, by.tag), fx, fy)


def gcm_test(data: DataSet, backend_x="krr", backend_y=None, alpha: float = 0.05) -> GcmResult:
    """Two-sided GCM test of ``X _||_ Y | Z`` for scalar ``X`` and ``Y``.

    ``backend_y`` defaults to ``backend_x``. The p-value is
    ``2 * (1 - Phi(|T|))`` and the null is rejected when it is at most ``alpha``.
    """
    _check_alpha(alpha)
    bx, by, fx, fy = _fits(data, backend_x, backend_x if backend_y is None else backend_y)
    T, tau_n, tau_d = gcm_statistic(residual_products(fx, fy))
    return _result(T, tau_n, tau_d, alpha, data.n, bx, by, fx, fy)


def naive_resid_corr_test(
    data: DataSet, backend_x="linear", backend_y=None, alpha: float = 0.05
) -> GcmResult:
    """Residual-correlation test normalised by ``sd(res_x) * sd(res_y)``.

    This is the partial-correlation style baseline. It does not hold its level
    when the residuals are dependent but uncorrelated (e.g. multiplicative
    noise), because the product of the variances is not the variance of the
    product.
    """
    _check_alpha(alpha)
    bx, by, fx, fy = _fits(data, backend_x, backend_x if backend_y is None else backend_y)
    R = residual_products(fx, fy)
    n = R.shape[0]
    tau_d = float(fx.residuals.std() * fy.residuals.std())
    if not tau_d > DEGENERACY_TOL * (1.0 + float((R * R).mean())):
        raise DegenerateStatisticError("a residual vector has zero variance")
    tau_n = math.sqrt(n) * R.mean()
    return _result(tau_n / tau_d, tau_n, tau_d, alpha, n, bx, by, fx, fy)


def expected_cond_cov_ci(
    data: DataSet,
    backend_x="krr",
    backend_y=None,
    alpha: float = 0.05,
    split: bool = True,
    rng=None,
) -> CondCovEstimate:
    """Estimate ``rho = E cov(X, Y | Z)`` with a normal confidence interval.

    With ``split=True`` the regressions are trained on a random half of the
    rows and the residual products are formed on the other half, so the fitted
    functions are independent of the evaluation sample. ``split=False`` uses
    in-sample residuals on the full data.
    """
    _check_alpha(alpha)
    bx = make_backend(backend_x)
    by = make_backend(backend_x if backend_y is None else backend_y)
    if data.d_x != 1 or data.d_y != 1:
        raise DataError("conditional covariance estimate needs d_X = d_Y = 1")
    if split:
        if data.n < 4:
            raise InsufficientSampleError(f"need n >= 4 to split the sample, got {data.n}")
        perm = as_generator(rng).permutation(data.n)
        train, held = np.sort(perm[: data.n // 2]), np.sort(perm[data.n // 2 :])
        zt, ze = data.z_block[train], data.z_block[held]
        (fx,) = bx.fit_predict(zt, data.x_block[train], ze, data.x_block[held])
        (fy,) = by.fit_predict(zt, data.y_block[train], ze, data.y_block[held])
    else:
        (fx,) = bx.fit_many(data.z_block, data.x_block)
        (fy,) = by.fit_many(data.z_block, data.y_block)
    R = residual_products(fx, fy)
    _, tau_n, tau_d = gcm_statistic(R)
    m = R.shape[0]
    rho = tau_n / math.sqrt(m)
    half = float(norm_ppf(1.0 - alpha / 2.0)) * tau_d / math.sqrt(m)
    return CondCovEstimate(rho, tau_d, rho - half, rho + half, alpha, split, m)


def prediction_errors(truth_x, fit_x: RegressionFit, truth_y, fit_y: RegressionFit) -> Diagnostics:
    """MSPEs ``A_f``, ``A_g`` of the fitted values against known conditional means."""
    a_f = float(np.mean((np.asarray(truth_x, dtype=float) - fit_x.predictions) ** 2))
    a_g = float(np.mean((np.asarray(truth_y, dtype=float) - fit_y.predictions) ** 2))
    return Diagnostics(a_f, a_g, fit_x.n)
