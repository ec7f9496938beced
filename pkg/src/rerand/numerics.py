"""Small dense numeric kernels used throughout the package.

Covariate dimensions here are tiny (k is rarely above a dozen), so the
factorizations are written out directly on numpy arrays. The chi-squared
functions are built on the regularized incomplete gamma function: a power
series below ``x < a + 1`` and a Lentz continued fraction above it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import as_generator
from .errors import DomainError, NotPositiveDefiniteError, SingularDesignError

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


# -- linear algebra ---------------------------------------------------------


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {a.shape}")
    return a


def cholesky(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises :class:`NotPositiveDefiniteError` naming the first pivot that is
    not strictly positive.
    """
    a = _as_square(a)
    scale = np.max(np.abs(a)) if a.size else 0.0
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12 * max(scale, 1.0)):
        raise DomainError("matrix is not symmetric")
    k = a.shape[0]
    L = np.zeros_like(a)
    for j in range(k):
        pivot = a[j, j] - L[j, :j] @ L[j, :j]
        # relative floor so that rounding noise on a singular matrix still fails
        if not pivot > 1e-13 * max(scale, _TINY):
            raise NotPositiveDefiniteError(j, float(pivot))
        L[j, j] = math.sqrt(pivot)
        if j + 1 < k:
            L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def solve_lower(L: np.ndarray, b) -> np.ndarray:
    """Forward substitution; ``b`` may be a vector or a matrix of columns."""
    b = np.array(b, dtype=float)
    x = np.empty_like(b)
    for i in range(L.shape[0]):
        x[i] = (b[i] - L[i, :i] @ x[:i]) / L[i, i]
    return x


def solve_upper(U: np.ndarray, b) -> np.ndarray:
    b = np.array(b, dtype=float)
    x = np.empty_like(b)
    k = U.shape[0]
    for i in range(k - 1, -1, -1):
        x[i] = (b[i] - U[i, i + 1 :] @ x[i + 1 :]) / U[i, i]
    return x


def cho_solve(L: np.ndarray, b) -> np.ndarray:
    return solve_upper(L.T, solve_lower(L, b))


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``."""
    return cho_solve(cholesky(a), b)


def sample_covariance(x) -> np.ndarray:
    """Unbiased (n - 1 denominator) sample covariance of the rows of ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise DomainError("sample covariance needs at least two rows")
    centered = x - x.mean(axis=0)
    return centered.T @ centered / (x.shape[0] - 1)


# -- multivariate normal ----------------------------------------------------


@dataclass(frozen=True)
class MVNSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = _as_square(np.atleast_2d(self.cov))
        if cov.shape[0] != mean.shape[0]:
            raise DomainError("mean and covariance dimensions disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def isotropic(cls, k: int, sd: float = 1.0, mean: float = 0.0) -> "MVNSpec":
        return cls(np.full(k, float(mean)), np.eye(k) * float(sd) ** 2)


def sample_mvn(spec: MVNSpec, seed=None, size: int | None = None) -> np.ndarray:
    """Draw from ``spec`` via the Cholesky transform of standard normals.

    Returns a length-k vector when ``size`` is None, else a ``(size, k)``
    array. The covariance must be positive definite.
    """
    L = cholesky(spec.cov)
    rng = as_generator(seed)
    shape = (spec.dim,) if size is None else (int(size), spec.dim)
    z = rng.standard_normal(shape)
    return spec.mean + z @ L.T


# -- chi-squared ------------------------------------------------------------


def _gamma_series(a: float, x: float) -> float:
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a: float, x: float) -> float:
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Lower regularized incomplete gamma ``P(a, x)``."""
    if a <= 0 or x < 0:
        raise DomainError("regularized_gamma_p needs a > 0 and x >= 0")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cont_frac(a, x)


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma ``Q(a, x) = 1 - P(a, x)``."""
    if a <= 0 or x < 0:
        raise DomainError("regularized_gamma_q needs a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cont_frac(a, x)


def _check_dof(k) -> float:
    if not k > 0:
        raise DomainError(f"degrees of freedom must be positive, got {k}")
    return float(k)


def chi2_cdf(x: float, k: float) -> float:
    k = _check_dof(k)
    if x < 0 or math.isnan(x):
        raise DomainError(f"chi2_cdf needs x >= 0, got {x}")
    if math.isinf(x):
        return 1.0
    return regularized_gamma_p(k / 2.0, x / 2.0)


def chi2_sf(x: float, k: float) -> float:
    """Survival function, accurate in the far upper tail."""
    k = _check_dof(k)
    if x < 0 or math.isnan(x):
        raise DomainError(f"chi2_sf needs x >= 0, got {x}")
    if math.isinf(x):
        return 0.0
    return regularized_gamma_q(k / 2.0, x / 2.0)


def chi2_pdf(x: float, k: float) -> float:
    k = _check_dof(k)
    if x < 0:
        return 0.0
    if x == 0:
        return 0.5 if k == 2 else (math.inf if k < 2 else 0.0)
    h = k / 2.0
    return math.exp((h - 1.0) * math.log(x) - x / 2.0 - h * math.log(2.0) - math.lgamma(h))


def chi2_quantile(p: float, k: float) -> float:
    """Inverse of :func:`chi2_cdf` by bracketed bisection and Newton polish."""
    k = _check_dof(k)
    if not 0.0 <= p < 1.0:
        raise DomainError(f"chi2_quantile needs 0 <= p < 1, got {p}")
    if p == 0.0:
        return 0.0
    lo, hi = 0.0, max(k, 1.0)
    while chi2_cdf(hi, k) < p:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, k) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    x = 0.5 * (lo + hi)
    for _ in range(5):
        dens = chi2_pdf(x, k)
        if not dens > 0 or math.isinf(dens):
            break
        step = (chi2_cdf(x, k) - p) / dens
        nxt = x - step
        if not lo <= nxt <= hi:
            break
        x = nxt
        if abs(step) <= 1e-15 * x:
            break
    return x


# -- least squares ----------------------------------------------------------


@dataclass(frozen=True)
class OLSFit:
    coef: np.ndarray
    coef_cov: np.ndarray
    sigma2: float
    residuals: np.ndarray
    names: tuple[str, ...] = ()


def ols_fit(x, y, intercept: bool = True, names=None) -> OLSFit:
    """Least-squares fit of ``y`` on the columns of ``x``.

    With ``intercept`` a column of ones is prepended. The coefficient
    covariance is ``sigma2 * inv(X'X)``, ``sigma2`` the residual mean square.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if y.shape != (n,):
        raise DomainError("x and y disagree on the number of rows")
    design = np.column_stack([np.ones(n), x]) if intercept else x
    p = design.shape[1]
    if n <= p:
        raise SingularDesignError(f"need more rows ({n}) than coefficients ({p})")
    col_scale = np.sqrt((design**2).sum(axis=0))
    if np.any(col_scale == 0):
        raise SingularDesignError("design matrix has an all-zero column")
    scaled = design / col_scale
    try:
        L = cholesky(scaled.T @ scaled)
    except NotPositiveDefiniteError as exc:
        raise SingularDesignError(f"design matrix is rank deficient (column {exc.pivot})") from exc
    # condition guard: Cholesky of X'X squares the condition number
    if np.min(np.diag(L)) / np.max(np.diag(L)) < 1e-7:
        raise SingularDesignError("design matrix is numerically rank deficient")
    beta_scaled = cho_solve(L, scaled.T @ y)
    coef = beta_scaled / col_scale
    resid = y - design @ coef
    sigma2 = float(resid @ resid / (n - p))
    inv_scaled = cho_solve(L, np.eye(p))
    coef_cov = sigma2 * inv_scaled / np.outer(col_scale, col_scale)
    if names is None:
        names = tuple(f"x{i}" for i in range(x.shape[1]))
    full_names = (("intercept",) if intercept else ()) + tuple(names)
    return OLSFit(coef, coef_cov, sigma2, resid, full_names)
