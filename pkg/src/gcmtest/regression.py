"""Conditional-mean estimators that produce residuals for the GCM.

Three backends are provided: ordinary least squares with intercept, kernel
ridge regression (KRR) with the spectral tuning rule

    lambda_hat = argmin_{lambda > 0}  (1/n) sum_i mu_i^2 / (mu_i + lambda)^2 + lambda,

where ``mu_i`` are the eigenvalues of the scaled Gram matrix ``K_ij = k(z_i, z_j)/n``,
and leave-one-out k-nearest-neighbour averaging.

Every backend can regress several targets on the same ``z`` at once; KRR then
shares one eigendecomposition across targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError

LAMBDA_FLOOR = 1e-10
SYMMETRY_TOL = 1e-10
_GRID_POINTS = 200
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class KernelSpec:
    """Reproducing kernel on the conditioning variable.

    ``gaussian``: ``k(z, z') = exp(-|z - z'|^2 / (2 bandwidth^2))``.
    ``sobolev_first_order``: ``k(s, t) = 1 + min(s, t)`` for scalar ``z`` on
    ``[0, 1]``; samples outside ``[0, 1]`` are min-max rescaled first.
    """

    family: str = "gaussian"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.family not in ("gaussian", "sobolev_first_order"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    @property
    def tag(self) -> str:
        if self.family == "gaussian":
            return f"gaussian(sigma={self.bandwidth:g})"
        return "sobolev1"

    def scaler(self, z: np.ndarray):
        """Return the fixed input map learned from the training sample ``z``."""
        if self.family == "gaussian":
            return lambda u: u
        if z.shape[1] != 1:
            raise DataError("sobolev_first_order kernel supports scalar z only")
        lo, hi = float(z.min()), float(z.max())
        if lo >= 0.0 and hi <= 1.0:
            return lambda u: np.clip(u, 0.0, 1.0)
        span = hi - lo if hi > lo else 1.0
        return lambda u: np.clip((u - lo) / span, 0.0, 1.0)

    def evaluate(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Unscaled kernel matrix ``k(a_i, b_j)`` on already-mapped inputs."""
        if self.family == "gaussian":
            d2 = cdist(a, b, "sqeuclidean")
            return np.exp(-d2 / (2.0 * self.bandwidth**2))
        return 1.0 + np.minimum(a[:, 0][:, None], b[:, 0][None, :])


@dataclass(frozen=True)
class RegressionFit:
    """Fitted values and residuals of one regression run."""

    predictions: np.ndarray
    residuals: np.ndarray
    backend_tag: str
    lambda_used: float | None = None
    in_sample: bool = True

    @property
    def n(self) -> int:
        return self.predictions.shape[0]


@dataclass(frozen=True)
class KernelDiag:
    eigenvalues: np.ndarray
    lambda_hat: float
    objective_at_min: float


def _fit(target: np.ndarray, pred: np.ndarray, tag: str, lam=None, in_sample=True):
    return RegressionFit(pred, target - pred, tag, lam, in_sample)


def _as_z(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if not np.all(np.isfinite(z)):
        raise DataError("z contains non-finite values")
    return z


def _as_targets(target, n: int) -> tuple[np.ndarray, bool]:
    t = np.asarray(target, dtype=float)
    single = t.ndim == 1
    t = t.reshape(n, -1) if not single else t.reshape(n, 1)
    if not np.all(np.isfinite(t)):
        raise DataError("target contains non-finite values")
    return t, single


# ---------------------------------------------------------------------------
# Kernel ridge regression
# ---------------------------------------------------------------------------


def gram_matrix(z_block, kernel: KernelSpec = KernelSpec()) -> np.ndarray:
    """Scaled Gram matrix with entries ``k(z_i, z_j) / n``."""
    z = _as_z(z_block)
    n = z.shape[0]
    if n < 1:
        raise DataError("empty z block")
    u = kernel.scaler(z)(z)
    return kernel.evaluate(u, u) / n


def lambda_objective(lam, eigenvalues, n: int):
    """Spectral risk bound minimised by :func:`select_lambda` (vectorised in ``lam``)."""
    mu = np.asarray(eigenvalues, dtype=float)
    lam = np.asarray(lam, dtype=float)
    ratio = mu[None, :] / (mu[None, :] + lam.reshape(-1, 1))
    out = (ratio**2).sum(axis=1) / n + lam.reshape(-1)
    return out.reshape(lam.shape)


def _golden(f, lo: float, hi: float, tol: float) -> float:
    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol * (1.0 + abs(c)):
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _INV_PHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INV_PHI * (hi - lo)
            fd = f(d)
    return c if fc <= fd else d


def select_lambda(eigenvalues, n: int) -> float:
    """Minimise the spectral objective over ``[1e-10, max(1, mu_1)]``.

    A log-spaced grid locates the basin; golden-section search refines it.
    """
    mu = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    if mu.size == 0 or not np.any(mu > 0):
        return LAMBDA_FLOOR
    cap = max(1.0, float(mu.max()))
    grid = np.geomspace(LAMBDA_FLOOR, cap, _GRID_POINTS)
    vals = lambda_objective(grid, mu, n)
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    best = _golden(lambda x: float(lambda_objective(x, mu, n)), lo, hi, 1e-12)
    # the refinement never does worse than the best grid point
    if float(lambda_objective(best, mu, n)) > vals[i]:
        return float(grid[i])
    return float(best)


def _eigh(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    asym = np.max(np.abs(K - K.T)) if K.size else 0.0
    if asym > SYMMETRY_TOL:
        raise np.linalg.LinAlgError(f"Gram matrix not symmetric (max asymmetry {asym:.3g})")
    w, U = np.linalg.eigh(0.5 * (K + K.T))
    w = np.clip(w, 0.0, None)
    return w[::-1], U[:, ::-1]


def kernel_diagnostics(z_block, kernel: KernelSpec = KernelSpec()) -> KernelDiag:
    """Spectrum of the scaled Gram matrix and the tuned ``lambda_hat``."""
    K = gram_matrix(z_block, kernel)
    w, _ = _eigh(K)
    n = K.shape[0]
    lam = select_lambda(w, n)
    return KernelDiag(w, lam, float(lambda_objective(lam, w, n)))


@dataclass
class _KrrState:
    kernel: KernelSpec
    scale: object
    u_train: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    lam: np.ndarray

    @classmethod
    def build(cls, z: np.ndarray, kernel: KernelSpec, lam, t: np.ndarray) -> "_KrrState":
        scale = kernel.scaler(z)
        u = scale(z)
        K = kernel.evaluate(u, u) / z.shape[0]
        w, U = _eigh(K)
        if isinstance(lam, str):
            if lam == "auto":
                lam = np.full(t.shape[1], select_lambda(w, z.shape[0]))
            elif lam == "loocv":
                lam = np.array([loocv_lambda(w, U, t[:, j]) for j in range(t.shape[1])])
            else:
                raise ValueError(f"lambda must be positive, 'auto' or 'loocv', got {lam!r}")
        elif not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        else:
            lam = np.full(t.shape[1], float(lam))
        return cls(kernel, scale, u, w, U, lam)

    def in_sample(self, t: np.ndarray) -> np.ndarray:
        U, w = self.eigvecs, self.eigvals
        return U @ ((w[:, None] / (w[:, None] + self.lam[None, :])) * (U.T @ t))

    def predict(self, t: np.ndarray, z_new: np.ndarray) -> np.ndarray:
        U, w = self.eigvecs, self.eigvals
        coef = U @ ((U.T @ t) / (w[:, None] + self.lam[None, :]))
        n = self.u_train.shape[0]
        k_new = self.kernel.evaluate(self.scale(z_new), self.u_train) / n
        return k_new @ coef


def loocv_lambda(eigvals: np.ndarray, eigvecs: np.ndarray, target: np.ndarray) -> float:
    """Penalty minimising the closed-form leave-one-out squared error.

    Not the spectral rule: an alternative for targets whose noise level is
    small relative to the complexity of the regression function.
    """
    grid = np.geomspace(LAMBDA_FLOOR, max(1.0, float(eigvals.max())), 121)
    proj = eigvecs.T @ target
    sq = eigvecs**2
    best, best_err = grid[0], np.inf
    for lam in grid:
        shrink = eigvals / (eigvals + lam)
        resid = target - eigvecs @ (shrink * proj)
        lev = sq @ shrink
        err = np.mean((resid / np.maximum(1.0 - lev, 1e-12)) ** 2)
        if err < best_err:
            best, best_err = lam, err
    return float(best)


def fit_krr(z_block, target, kernel: KernelSpec = KernelSpec(), lam="auto") -> RegressionFit:
    """In-sample kernel ridge fit ``K (K + lam I)^{-1} target`` via ``eigh``.

    ``lam="auto"`` selects the penalty with :func:`select_lambda`.
    """
    return KRR(kernel, lam).fit(z_block, target)


# ---------------------------------------------------------------------------
# Linear least squares
# ---------------------------------------------------------------------------


def _design(z: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((z.shape[0], 1)), z])


def _ols_coef(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    X = _design(z)
    G = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1]:
        G = G + 1e-12 * np.eye(G.shape[0])
    return np.linalg.solve(G, X.T @ t)


def fit_linear(z_block, target) -> RegressionFit:
    """Ordinary least squares of ``target`` on ``[1, z]``."""
    return Linear().fit(z_block, target)


# ---------------------------------------------------------------------------
# k nearest neighbours
# ---------------------------------------------------------------------------


def _knn_index(d: np.ndarray, k: int) -> np.ndarray:
    # stable sort breaks distance ties towards the lower row index
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def fit_knn(z_block, target, k: int | None = None) -> RegressionFit:
    """Leave-one-out k-NN: row ``i`` is predicted from its ``k`` nearest other rows."""
    return KNN(k).fit(z_block, target)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class Backend:
    """Common interface of the regression backends."""

    tag = "backend"

    def fit_many(self, z_block, targets) -> list[RegressionFit]:
        """In-sample fits of every column of ``targets`` on ``z_block``."""
        raise NotImplementedError

    def fit_predict(self, z_train, t_train, z_eval, t_eval) -> list[RegressionFit]:
        """Train on one sample, report out-of-sample residuals on another."""
        raise NotImplementedError

    def fit(self, z_block, target) -> RegressionFit:
        z = _as_z(z_block)
        t, single = _as_targets(target, z.shape[0])
        if not single:
            raise DataError("fit expects a single target vector; use fit_many")
        return self.fit_many(z, t)[0]


@dataclass(frozen=True)
class Linear(Backend):
    tag = "linear"

    def fit_many(self, z_block, targets):
        z = _as_z(z_block)
        t, _ = _as_targets(targets, z.shape[0])
        pred = _design(z) @ _ols_coef(z, t)
        return [_fit(t[:, j], pred[:, j], self.tag) for j in range(t.shape[1])]

    def fit_predict(self, z_train, t_train, z_eval, t_eval):
        z, ze = _as_z(z_train), _as_z(z_eval)
        t, _ = _as_targets(t_train, z.shape[0])
        te, _ = _as_targets(t_eval, ze.shape[0])
        pred = _design(ze) @ _ols_coef(z, t)
        return [_fit(te[:, j], pred[:, j], self.tag, in_sample=False) for j in range(te.shape[1])]


@dataclass(frozen=True)
class KRR(Backend):
    kernel: KernelSpec = field(default_factory=KernelSpec)
    lam: float | str = "auto"

    @property
    def tag(self) -> str:
        lam = self.lam if isinstance(self.lam, str) else f"{self.lam:g}"
        return f"krr[{self.kernel.tag},lambda={lam}]"

    def fit_many(self, z_block, targets):
        z = _as_z(z_block)
        if z.shape[0] < 1:
            raise DataError("empty z block")
        t, _ = _as_targets(targets, z.shape[0])
        state = _KrrState.build(z, self.kernel, self.lam, t)
        pred = state.in_sample(t)
        return [_fit(t[:, j], pred[:, j], self.tag, float(state.lam[j])) for j in range(t.shape[1])]

    def fit_predict(self, z_train, t_train, z_eval, t_eval):
        z, ze = _as_z(z_train), _as_z(z_eval)
        t, _ = _as_targets(t_train, z.shape[0])
        te, _ = _as_targets(t_eval, ze.shape[0])
        state = _KrrState.build(z, self.kernel, self.lam, t)
        pred = state.predict(t, ze)
        return [
            _fit(te[:, j], pred[:, j], self.tag, float(state.lam[j]), in_sample=False)
            for j in range(te.shape[1])
        ]


@dataclass(frozen=True)
class KNN(Backend):
    k: int | None = None

    @property
    def tag(self) -> str:
        return "knn" if self.k is None else f"knn[k={self.k}]"

    def _k(self, n: int) -> int:
        k = self.k if self.k is not None else max(1, int(round(math.sqrt(n))))
        k = min(k, n - 1) if self.k is None else k
        if not 1 <= k <= n - 1:
            raise DataError(f"k must lie in [1, {n - 1}], got {k}")
        return k

    def fit_many(self, z_block, targets):
        z = _as_z(z_block)
        n = z.shape[0]
        t, _ = _as_targets(targets, n)
        k = self._k(n)
        d = cdist(z, z, "sqeuclidean")
        np.fill_diagonal(d, np.inf)
        idx = _knn_index(d, k)
        pred = t[idx].mean(axis=1)
        return [_fit(t[:, j], pred[:, j], self.tag) for j in range(t.shape[1])]

    def fit_predict(self, z_train, t_train, z_eval, t_eval):
        z, ze = _as_z(z_train), _as_z(z_eval)
        t, _ = _as_targets(t_train, z.shape[0])
        te, _ = _as_targets(t_eval, ze.shape[0])
        k = self._k(z.shape[0] + 1)
        idx = _knn_index(cdist(ze, z, "sqeuclidean"), k)
        pred = t[idx].mean(axis=1)
        return [_fit(te[:, j], pred[:, j], self.tag, in_sample=False) for j in range(te.shape[1])]


def make_backend(spec: str | Backend | None = None, **options) -> Backend:
    """Resolve ``"linear"``, ``"krr"``, ``"knn"`` (or an instance) to a backend."""
    if isinstance(spec, Backend):
        return spec
    name = (spec or "krr").lower()
    if name == "linear":
        return Linear()
    if name == "krr":
        kernel = options.get("kernel") or KernelSpec(
            options.get("family", "gaussian"), float(options.get("bandwidth", 1.0))
        )
        return KRR(kernel, options.get("lam", "auto"))
    if name == "knn":
        return KNN(options.get("k"))
    raise ValueError(f"unknown backend {spec!r}")


def fit_columns(backend: Backend, z_block, block: np.ndarray) -> list[RegressionFit]:
    return make_backend(backend).fit_many(z_block, np.asarray(block, dtype=float))


__all__: Sequence[str] = [
    "KernelSpec",
    "KernelDiag",
    "RegressionFit",
    "Backend",
    "Linear",
    "KRR",
    "KNN",
    "gram_matrix",
    "lambda_objective",
    "select_lambda",
    "kernel_diagnostics",
    "fit_krr",
    "fit_linear",
    "fit_knn",
    "make_backend",
]
