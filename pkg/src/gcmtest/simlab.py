"""Simulation models and the rejection-rate engine.

Models ``a``-``e`` are the benchmark nulls (with ``power=True`` variants that
add ``0.2 X`` to the Y equation), ``example1`` is the multiplicative-noise
null ``X = Z N_X, Y = Z N_Y`` and ``nfl`` is the unit-noise ``f_a`` model.

Replication ``i`` at sample size ``n`` draws its data from the substream
``(seed, MODEL_STREAM, n, i)`` and any test randomness from
``(seed, TEST_STREAM, n, i)``, so results do not depend on scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from ._stats import MODEL_STREAM, TEST_STREAM, as_generator, stream
from .core import Diagnostics, gcm_test, naive_resid_corr_test, prediction_errors
from .data import DataSet
from .errors import DataError, GcmError
from .multi import FeatureLift, multi_gcm_test
from .nofreelunch import f_a
from .regression import RegressionFit, make_backend

log = logging.getLogger(__name__)

MODELS = ("a", "b", "c", "d", "e", "example1", "nfl")
DEFAULT_N_GRID = (50, 100, 200, 300, 400)
DEFAULT_REPS = 100
NOISE_SD = 0.3
POWER_COEF = 0.2


@dataclass(frozen=True)
class ModelSpec:
    name: str
    power: bool = False
    a: float | None = None
    n: int | None = None

    def __post_init__(self):
        if self.name not in MODELS:
            raise ValueError(f"unknown model {self.name!r}; choose from {MODELS}")
        if self.a is not None and self.name not in ("a", "b", "nfl"):
            raise ValueError(f"model {self.name!r} takes no 'a' parameter")
        if self.a is not None and not self.a > 0:
            raise ValueError("a must be positive")

    @property
    def a_value(self) -> float | None:
        if self.a is not None:
            return float(self.a)
        return {"a": 2.0, "b": 4.0, "nfl": 2.0}.get(self.name)

    @property
    def label(self) -> str:
        tag = self.name if self.a is None else f"{self.name}(a={self.a:g})"
        return tag + ("+power" if self.power else "")


def gen_model(spec: ModelSpec, rng=None, n: int | None = None) -> DataSet:
    """Draw one data set of size ``n`` (default ``spec.n``) from ``spec``."""
    n = spec.n if n is None else n
    if n is None or n < 2:
        raise ValueError("sample size n >= 2 required")
    rng = as_generator(rng)
    noise = lambda: rng.standard_normal(n)  # noqa: E731
    name, p = spec.name, POWER_COEF if spec.power else 0.0
    if name in ("a", "b"):
        z = noise()
        fz = f_a(z, spec.a_value)
        x = fz + NOISE_SD * noise()
        y = fz + NOISE_SD * noise() + p * x
        return DataSet(x, y, z)
    if name == "c":
        z = np.column_stack([noise(), noise()])
        f1, f2 = f_a(z[:, 0], 1.0), f_a(z[:, 1], 1.0)
        x = f1 - f2 + NOISE_SD * noise()
        y = f1 + f2 + NOISE_SD * noise() + p * x
        return DataSet(x, y, z)
    if name == "d":
        z = noise()
        fz = f_a(z, 1.0)
        x1 = fz + NOISE_SD * noise()
        x2 = fz + x1 + NOISE_SD * noise()
        y1 = fz + NOISE_SD * noise()
        y2 = fz + y1 + NOISE_SD * noise() + p * x2
        return DataSet(np.column_stack([x1, x2]), np.column_stack([y1, y2]), z)
    if name == "e":
        z = noise()
        fz = f_a(z, 2.0)
        y = fz * noise()
        x = fz * noise()
        return DataSet(x, y + p * x, z)
    if name == "example1":
        z = noise()
        x = z * noise()
        y = z * noise()
        return DataSet(x, y + p * x, z)
    # nfl
    z = noise()
    fz = f_a(z, spec.a_value)
    x = fz + noise()
    y = fz + noise() + p * x
    return DataSet(x, y, z)


def conditional_means(spec: ModelSpec, z_block) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``E[X | Z]`` and ``E[Y | Z]`` blocks for a simulation model."""
    z = np.asarray(z_block, dtype=float)
    z = z.reshape(z.shape[0], -1)
    p = POWER_COEF if spec.power else 0.0
    name = spec.name
    if name in ("a", "b", "nfl"):
        f = f_a(z[:, 0], spec.a_value)
        fx, fy = f, (1.0 + p) * f
    elif name == "c":
        f1, f2 = f_a(z[:, 0], 1.0), f_a(z[:, 1], 1.0)
        fx = f1 - f2
        fy = f1 + f2 + p * fx
    elif name == "d":
        f = f_a(z[:, 0], 1.0)
        return np.column_stack([f, 2 * f]), np.column_stack([f, (2 + 2 * p) * f])
    else:
        fx = fy = np.zeros(z.shape[0])
    return fx.reshape(-1, 1), fy.reshape(-1, 1)


def truth_diagnostics(
    spec: ModelSpec, data: DataSet, fit_x: RegressionFit, fit_y: RegressionFit, j: int = 0, k: int = 0
) -> Diagnostics:
    """``A_f``, ``A_g`` and ``n A_f A_g`` for column pair ``(j, k)`` of a simulated data set."""
    if not isinstance(spec, ModelSpec):
        raise DataError("truth diagnostics need a simulation model with known conditional means")
    fx, fy = conditional_means(spec, data.z_block)
    return prediction_errors(fx[:, j], fit_x, fy[:, k], fit_y)


# ---------------------------------------------------------------------------
# tests under simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestConfig:
    """Which test to run on each simulated data set.

    ``kind``: ``gcm`` (univariate GCM, or the max-statistic version when X or Y
    has several columns), ``multi`` (always the max-statistic version) or
    ``naive`` (residual correlation with the product-of-sd denominator).
    """

    __test__ = False  # not a pytest class

    kind: str = "gcm"
    backend: str = "krr"
    bandwidth: float = 1.0
    k: int | None = None
    B: int = 5000
    lift: FeatureLift | None = None
    lam: float | str = "auto"

    def _backend(self):
        return make_backend(self.backend, bandwidth=self.bandwidth, k=self.k, lam=self.lam)

    @property
    def tag(self) -> str:
        return f"{self.kind}:{self._backend().tag}"

    def run(self, data: DataSet, alpha: float, rng) -> bool:
        backend = self._backend()
        multivariate = data.d_x * data.d_y > 1 or self.lift is not None
        if self.kind == "multi" or (self.kind == "gcm" and multivariate):
            return multi_gcm_test(data, backend, alpha=alpha, B=self.B, seed=rng, lift=self.lift).reject
        if self.kind == "gcm":
            return gcm_test(data, backend, alpha=alpha).reject
        if self.kind == "naive":
            return naive_resid_corr_test(data, backend, alpha=alpha).reject
        raise ValueError(f"unknown test kind {self.kind!r}")


def level_band(reps: int, alpha: float = 0.05, confidence: float = 0.99) -> float:
    """Largest rejection rate consistent with size ``alpha`` at level ``1 - confidence``.

    One-sided exact binomial bound; equals 0.11 for 100 replications at 0.05.
    """
    return float(stats.binom.ppf(confidence, reps, alpha)) / reps


@dataclass
class RejectionReport:
    model: str
    test: str
    n_values: list[int]
    reps: int
    alpha: float
    seed: int
    rates: list[float]
    mc_stderr: list[float]
    band: float
    band_pass: list[bool]
    errors: list[int] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {
                "model": self.model,
                "test": self.test,
                "n": n,
                "reps": self.reps,
                "rate": rate,
                "stderr": se,
                "band": self.band,
                "pass": ok,
            }
            for n, rate, se, ok in zip(self.n_values, self.rates, self.mc_stderr, self.band_pass)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["model", "test", "n", "reps", "rate", "stderr", "band", "pass"],
                           lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def worker_count() -> int:
    cap = os.environ.get("GCM_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            warnings.warn(f"ignoring GCM_THREADS={cap!r}")
    return n


TestFn = Callable[[DataSet, float, np.random.Generator], bool]


def _one_rep(spec: ModelSpec, test: TestFn, n: int, rep: int, alpha: float, seed: int):
    data = gen_model(spec, stream(seed, MODEL_STREAM, n, rep), n)
    try:
        return bool(test(data, alpha, stream(seed, TEST_STREAM, n, rep))), False
    except (GcmError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.warning("replication %d at n=%d failed: %s", rep, n, exc)
        return False, True


def rejection_rate(
    spec: ModelSpec,
    test_config: TestConfig | TestFn,
    n_values: Sequence[int] = DEFAULT_N_GRID,
    reps: int = DEFAULT_REPS,
    alpha: float = 0.05,
    seed: int = 0,
    workers: int | None = None,
) -> RejectionReport:
    """Empirical rejection rate of a test on ``reps`` fresh data sets per ``n``.

    Failed replications count as non-rejections and are tallied in
    ``errors``. ``band_pass`` compares each rate with :func:`level_band`.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if isinstance(test_config, TestConfig):
        test, tag = test_config.run, test_config.tag
    else:
        test, tag = test_config, getattr(test_config, "__name__", "custom")
    workers = worker_count() if workers is None else workers
    rates, ses, errs = [], [], []
    for n in n_values:
        jobs = [(spec, test, int(n), i, alpha, seed) for i in range(reps)]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                out = list(pool.map(lambda j: _one_rep(*j), jobs))
        else:
            out = [_one_rep(*j) for j in jobs]
        hits = sum(r for r, _ in out)
        rate = hits / reps
        rates.append(rate)
        ses.append(float(np.sqrt(rate * (1.0 - rate) / reps)))
        errs.append(sum(e for _, e in out))
    band = level_band(reps, alpha)
    return RejectionReport(
        model=spec.label,
        test=tag,
        n_values=[int(n) for n in n_values],
        reps=reps,
        alpha=alpha,
        seed=int(seed),
        rates=rates,
        mc_stderr=ses,
        band=band,
        band_pass=[r <= band for r in rates],
        errors=errs,
    )
