"""Hard null distributions for conditional-independence tests.

Two constructions live here:

* the smooth family ``f_a(z) = exp(-z^2/2) sin(a z)``, whose Gaussian-kernel
  RKHS norm grows like ``exp(a^2)``, used as conditional mean in an otherwise
  easy null model;
* a digit-hiding sampler. Given any sampler for ``(X, Y, Z)``, it discretises
  the draw, writes the binary digits of ``X`` into the low-order digits of
  ``Z`` and adds fine uniform noise. The output is within a small
  ``l_inf`` distance of the input, yet ``X~`` is a deterministic function of
  ``Z~`` plus independent noise, so ``X~ _||_ Y~ | Z~`` holds exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._stats import as_generator
from .data import DataSet

SQRT_8PI = math.sqrt(8.0 * math.pi)
_MANTISSA_BITS = 52


def f_a(z, a: float):
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z) * np.sin(a * z)


def rkhs_log_norm_sq(a: float, sigma: float = 1.0) -> float:
    """``log ||f_a||_H^2`` for the Gaussian kernel with bandwidth 1."""
    if sigma != 1.0:
        raise ValueError("closed-form RKHS norm is available for bandwidth 1 only")
    a2 = float(a) ** 2
    return 0.5 * math.log(8.0 * math.pi) + a2 + math.log1p(math.exp(-2.0 * a2))


def rkhs_norm_sq(a: float, sigma: float = 1.0) -> float:
    """``||f_a||_H^2 = sqrt(8 pi) (exp(a^2) + exp(-a^2))``; ``inf`` once ``a^2 > 700``.

    Use :func:`rkhs_log_norm_sq` for large ``a``.
    """
    if sigma != 1.0:
        raise ValueError("closed-form RKHS norm is available for bandwidth 1 only")
    a2 = float(a) ** 2
    if a2 > 700.0:
        return math.inf
    return SQRT_8PI * (math.exp(a2) + math.exp(-a2))


def nfl_null_model(a: float, n: int, rng=None) -> DataSet:
    """``Z ~ N(0,1)``, ``X = f_a(Z) + N_X``, ``Y = f_a(Z) + N_Y`` with unit noise."""
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    rng = as_generator(rng)
    z = rng.standard_normal(n)
    fz = f_a(z, a)
    x = fz + rng.standard_normal(n)
    y = fz + rng.standard_normal(n)
    return DataSet(x, y, z)


# ---------------------------------------------------------------------------
# digit embedding
# ---------------------------------------------------------------------------


def _grid_codes(n_vec, r: int, t: int) -> np.ndarray:
    scaled = np.ldexp(np.asarray(n_vec, dtype=float), r)
    codes = np.floor(scaled)
    if np.any(codes != scaled):
        raise ValueError(f"components are not on the grid 2^-{r} Z")
    if np.any(codes < 0) or np.any(codes > 2**t - 1):
        raise ValueError(f"scaled components must lie in [0, {2**t - 1}]")
    return codes.astype(np.int64)


def embed_digits(n_vec, r: int, t: int):
    """Concatenate the ``t``-bit codes ``2^r N_j`` into one integer in ``[0, 2^(d t))``.

    ``n_vec`` has shape ``(d,)`` or ``(m, d)``; returns an int or an int array.
    """
    codes = _grid_codes(n_vec, r, t)
    d = codes.shape[-1]
    weights = np.left_shift(np.int64(1), t * np.arange(d, dtype=np.int64))
    out = (codes * weights).sum(axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def extract_digits(code, d: int, r: int, t: int) -> np.ndarray:
    """Invert :func:`embed_digits`; returns grid values of shape ``(..., d)``."""
    code = np.asarray(code, dtype=np.int64)
    shifts = t * np.arange(d, dtype=np.int64)
    digits = np.right_shift(code[..., None], shifts) & ((1 << t) - 1)
    return np.ldexp(digits.astype(float), -r)


@dataclass(frozen=True)
class AffinePermutation:
    """The permutation ``e -> (mult * e + offset) mod K`` of ``{0, ..., K-1}``.

    ``K`` is a power of two and ``mult`` is odd, so the map is a bijection.
    Seed 0 gives the identity.
    """

    K: int
    mult: int = 1
    offset: int = 0

    @classmethod
    def from_seed(cls, K: int, seed: int) -> "AffinePermutation":
        if seed == 0:
            return cls(K)
        rng = np.random.default_rng(seed)
        return cls(K, 2 * int(rng.integers(0, max(K // 2, 1))) + 1, int(rng.integers(0, K)))

    def __call__(self, e):
        return (self.mult * np.asarray(e, dtype=np.int64) + self.offset) % self.K

    def inverse(self, p):
        inv = pow(self.mult, -1, self.K) if self.K > 1 else 0
        return (inv * ((np.asarray(p, dtype=np.int64) - self.offset) % self.K)) % self.K


@dataclass(frozen=True)
class HidingSpec:
    """Grid and embedding parameters of the hiding construction.

    ``r``: values are discretised to ``2^-r Z``. ``t``: bits per embedded
    coordinate. ``K = 2^(d t)``: number of distinct codes. ``m``: seed of the
    embedding permutation (0 = identity). ``m2``: clip bound applied to each
    coordinate by the sampler.
    """

    epsilon: float
    delta: float
    r: int
    t: int
    d: int = 1
    m2: float = 1.0
    m: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.r < 0 or self.t < 1 or self.d < 1:
            raise ValueError("need r >= 0, t >= 1, d >= 1")
        if 2 * self.d * self.t > _MANTISSA_BITS:
            raise ValueError("K^2 exceeds double precision")

    @property
    def K(self) -> int:
        return 1 << (self.d * self.t)

    @property
    def fine_exponent(self) -> int:
        """Hidden values live on the grid ``2^-(r + 2 d t) Z``."""
        return self.r + 2 * self.d * self.t

    @property
    def shift(self) -> float:
        """Grid offset that makes clipped X values non-negative."""
        return math.ldexp(math.ceil(math.ldexp(self.m2, self.r)), -self.r)

    @property
    def permutation(self) -> AffinePermutation:
        return AffinePermutation.from_seed(self.K, self.m)

    def precision_ok(self, bound: float) -> bool:
        """Whether values up to ``bound`` survive hiding exactly in float64."""
        int_bits = max(0, math.ceil(math.log2(bound + 2.0)))
        return int_bits + self.fine_exponent <= _MANTISSA_BITS

    @classmethod
    def build(
        cls,
        epsilon: float,
        delta: float,
        n_target: int,
        q_sampler: Callable | None = None,
        m2: float | None = None,
        m: int = 0,
        pilot: int = 10000,
        rng=None,
    ) -> "HidingSpec":
        """Derive ``r``, ``t`` and the clip bound for ``n_target`` observations.

        ``r`` is the smallest integer with ``2^-r < min(epsilon/3, 1/n_target)``.
        Without an explicit ``m2`` the clip bound is the empirical
        ``1 - delta/(2 n_target)`` quantile of ``|V|_inf`` over ``pilot`` draws.
        """
        bound = min(epsilon / 3.0, 1.0 / n_target)
        r = 0
        while math.ldexp(1.0, -r) >= bound:
            r += 1
        if m2 is None:
            if q_sampler is None:
                raise ValueError("need q_sampler or m2")
            v = np.asarray(q_sampler(as_generator(rng), pilot), dtype=float)
            m2 = float(np.quantile(np.abs(v).max(axis=1), 1.0 - delta / (2.0 * n_target)))
        m2 = float(m2)
        span = 2.0 * math.ldexp(math.ceil(math.ldexp(m2, r)), -r)
        t = 1
        while 2**t <= math.ldexp(max(1.0, span), r):
            t += 1
        spec = cls(epsilon, delta, r, t, 1, m2, m)
        if not spec.precision_ok(m2):
            raise ValueError(
                f"grid 2^-{spec.fine_exponent} is too fine for float64 at |v| <= {m2:g}"
            )
        return spec


def _hidden_index(code, e, spec: HidingSpec) -> np.ndarray:
    K = spec.K
    return (np.asarray(code, dtype=np.int64) + e) % K + K * spec.permutation(e)


def hide(w_last, n_vec, spec: HidingSpec, rng=None, e=None):
    """Write the digits of ``n_vec`` below the ``2^-r`` digit of ``w_last``.

    Returns ``w_last + 2^-r K^-2 N_m`` with ``N_m = ((code + e) mod K) + K pi(e)``
    and ``e`` uniform on ``{0, ..., K-1}`` unless given. Vectorised over a
    leading axis (``n_vec`` of shape ``(m, d)``).
    """
    w = np.asarray(w_last, dtype=float)
    if np.any(np.ldexp(np.floor(np.ldexp(w, spec.r)), -spec.r) != w):
        raise ValueError(f"w_last must lie on the grid 2^-{spec.r} Z")
    n_arr = np.asarray(n_vec, dtype=float)
    if n_arr.shape[-1] != spec.d:
        raise ValueError(f"n_vec must have {spec.d} components")
    code = embed_digits(n_arr, spec.r, spec.t)
    if e is None:
        e = as_generator(rng).integers(0, spec.K, size=np.shape(code))
    e = np.asarray(e, dtype=np.int64)
    if np.any((e < 0) | (e >= spec.K)):
        raise ValueError(f"e must lie in [0, {spec.K})")
    nm = _hidden_index(code, e, spec)
    hidden = w + np.ldexp(nm.astype(float), -spec.fine_exponent)
    # float64 must hold every digit, otherwise recovery is not exact
    back = np.ldexp(hidden - w, spec.fine_exponent)
    if np.any(back != nm):
        raise ValueError("hidden value not representable exactly in float64")
    return float(hidden) if hidden.ndim == 0 else hidden


def recover(w_hidden, spec: HidingSpec):
    """Invert :func:`hide`: returns ``(w_last, n_vec, e)``."""
    wh = np.asarray(w_hidden, dtype=float)
    w = np.ldexp(np.floor(np.ldexp(wh, spec.r)), -spec.r)
    frac = np.ldexp(wh - w, spec.fine_exponent)
    nm = np.rint(frac)
    if np.any(np.abs(frac - nm) > 0.25):
        raise ValueError("value is off the embedding grid")
    nm = nm.astype(np.int64)
    K = spec.K
    e = spec.permutation.inverse(nm // K)
    code = (nm % K - e) % K
    n_vec = extract_digits(code, spec.d, spec.r, spec.t)
    if wh.ndim == 0:
        return float(w), n_vec, int(e)
    return w, n_vec, e


@dataclass(frozen=True)
class HiddenSample:
    """Batch output of :func:`sample_hidden_null` (one row per draw)."""

    v_tilde: np.ndarray
    v_orig: np.ndarray
    x_ring: np.ndarray
    recovered_ok: np.ndarray
    clipped: np.ndarray

    def to_dataset(self) -> DataSet:
        return DataSet(self.v_tilde[:, 0], self.v_tilde[:, 1], self.v_tilde[:, 2])

    @property
    def sup_distance(self) -> np.ndarray:
        return np.abs(self.v_tilde - self.v_orig).max(axis=1)


def truncate_noise(z_tilde, spec: HidingSpec):
    """Drop the uniform noise below the embedding digits of ``z~``."""
    return np.ldexp(np.floor(np.ldexp(np.asarray(z_tilde, dtype=float), spec.fine_exponent)),
                    -spec.fine_exponent)


def sample_hidden_null(q_sampler: Callable, spec: HidingSpec, n: int, rng=None) -> HiddenSample:
    """Turn ``n`` draws of ``(X, Y, Z)`` into a conditional-independence null.

    ``q_sampler(rng, size)`` must return an array of shape ``(size, 3)``
    holding ``x, y, z``. Each draw is clipped to ``[-m2, m2]``, floored to the
    grid ``2^-r Z``, ``x`` is hidden in ``z``, and uniform noise of width
    ``2^-r`` (``2^-r K^-2`` for ``z``) is added.
    """
    rng = as_generator(rng)
    v = np.asarray(q_sampler(rng, n), dtype=float)
    if v.shape != (n, 3):
        raise ValueError(f"q_sampler must return shape ({n}, 3), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("q_sampler produced non-finite values")
    if not spec.precision_ok(spec.m2):
        raise ValueError("hiding spec too fine for float64 at its clip bound")
    clipped = np.abs(v).max(axis=1) > spec.m2
    vc = np.clip(v, -spec.m2, spec.m2)
    grid = np.ldexp(np.floor(np.ldexp(vc, spec.r)), -spec.r)
    x_ring, y_ring, z_grid = grid[:, 0], grid[:, 1], grid[:, 2]

    e = rng.integers(0, spec.K, size=n)
    z_ring = hide(z_grid, (x_ring + spec.shift)[:, None], spec, e=e)

    step = math.ldexp(1.0, -spec.r)
    fine = math.ldexp(1.0, -spec.fine_exponent)
    u = rng.random((n, 3))
    x_t = x_ring + step * u[:, 0]
    y_t = y_ring + step * u[:, 1]
    z_t = np.minimum(z_ring + fine * u[:, 2], np.nextafter(z_ring + fine, -np.inf))

    _, n_rec, _ = recover(truncate_noise(z_t, spec), spec)
    ok = (n_rec[:, 0] - spec.shift) == x_ring
    return HiddenSample(np.column_stack([x_t, y_t, z_t]), v, x_ring, ok, clipped)
