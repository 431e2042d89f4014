"""Seeded random numbers, checked matrix arithmetic and the special functions
behind Student-t p-values.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and shape
``(rows, cols)``; the helpers here only add shape and finiteness checks.

Random numbers come from :class:`RngState`, a thin wrapper over numpy's PCG64
bit generator. Only the raw 64-bit output of PCG64 is used (that stream is
frozen across numpy releases); every transform on top of it (uniforms,
normals, permutations) is defined in this module so that a seed means the
same thing on every machine.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "RngState",
    "derive_seed",
    "as_matrix",
    "matmul",
    "standard_normal",
    "regularized_incomplete_beta",
    "student_t_two_sided_p",
]

_MASK64 = (1 << 64) - 1
_TWO_NEG_53 = 2.0 ** -53

BETA_CF_TOL = 1e-14
BETA_CF_MAX_ITER = 300


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Mix ``seed`` with integer ``keys`` into a new 64-bit seed.

    Used to give every fold, tree and experiment cell its own stream by
    fixed arithmetic, so results never depend on execution order.
    """
    h = _splitmix64(int(seed) & _MASK64)
    for k in keys:
        h = _splitmix64(h ^ (int(k) & _MASK64))
    return h


class RngState:
    """Single-owner deterministic random stream.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit seed. Negative values are reduced modulo 2**64.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bits = np.random.PCG64(self.seed)

    def __repr__(self):
        return f"RngState(seed={self.seed})"

    def raw(self, n: int) -> np.ndarray:
        """``n`` raw unsigned 64-bit words."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        return self._bits.random_raw(n).astype(np.uint64, copy=False)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each word."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53

    def standard_normal(self, n: int) -> np.ndarray:
        """``n`` N(0, 1) draws by the Box-Muller transform.

        Pairs of uniforms (u1, u2) give ``r*cos(2*pi*u2)`` and
        ``r*sin(2*pi*u2)`` with ``r = sqrt(-2 ln(1 - u1))``; the cosine
        and sine halves are interleaved and the surplus draw of an odd
        ``n`` is discarded.
        """
        if n < 0:
            raise DomainError("n must be non-negative")
        if n == 0:
            return np.empty(0, dtype=np.float64)
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)`` (bias below 2**-53 * high)."""
        if high <= 0:
            raise DomainError("high must be positive")
        idx = np.floor(self.uniform(n) * high).astype(np.int64)
        return np.minimum(idx, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """A uniformly random permutation of ``range(n)``."""
        return np.argsort(self.raw(n), kind="stable").astype(np.int64)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        return self.permutation(n)[:k]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a C-contiguous float64 2-D array, rejecting NaN/Inf."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise DomainError(f"{name} contains non-finite values")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.isfinite(out).all():
        raise DomainError("matrix product overflowed")
    return out


def standard_normal(rng: RngState, n: int) -> np.ndarray:
    return rng.standard_normal(n)


def _beta_cf(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the incomplete-beta continued fraction.
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, BETA_CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETA_CF_TOL:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b).

    Evaluated by continued fraction, switching to ``1 - I_{1-x}(b, a)``
    when ``x > (a + 1) / (a + b + 2)`` where the direct fraction converges
    slowly.
    """
    a = float(a)
    b = float(b)
    x = float(x)
    if not (a > 0.0 and b > 0.0):
        raise DomainError(f"a and b must be positive, got a={a}, b={b}")
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        val = front * _beta_cf(a, b, x) / a
    else:
        val = 1.0 - front * _beta_cf(b, a, 1.0 - x) / b
    return min(1.0, max(0.0, val))


def student_t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability P(|T_df| >= |t|)."""
    if not df >= 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {df}")
    t = float(t)
    if math.isnan(t):
        raise DomainError("t is NaN")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)
