"""Log-gamma, the regularized lower incomplete gamma function and the
gamma / scaled chi-squared CDFs built on it.

Everything here accepts scalars or numpy arrays (broadcast together) and
returns a float for scalar input. The incomplete gamma function uses the
classic split: power series for ``x < a + 1`` and a modified-Lentz continued
fraction for the upper tail otherwise. Both iterate to a relative tolerance of
``TOL`` and give up after ``iteration_cap(a)`` terms.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import DomainError, NumericalError

__all__ = [
    "GammaParams",
    "TOL",
    "MAX_ITER",
    "iteration_cap",
    "ln_gamma",
    "reg_inc_gamma_lower",
    "scaled_chi2_cdf",
    "gamma_cdf",
]

TOL = 1e-14
MAX_ITER = 500

_HALF_LN_2PI = 0.5 * math.log(2.0 * math.pi)
_FPMIN = 1e-300
_STIRLING_SHIFT = 10.0
# B_{2k} / (2k (2k - 1)), k = 1..8
_STIRLING_COEFFS = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
)


@dataclass(frozen=True)
class GammaParams:
    """Shape/rate parametrization of Gamma(shape, rate)."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (math.isfinite(self.shape) and self.shape > 0):
            raise DomainError(f"gamma shape must be positive, got {self.shape}")
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise DomainError(f"gamma rate must be positive, got {self.rate}")

    @property
    def mean(self):
        return self.shape / self.rate


def iteration_cap(a):
    """Iteration cap for the series / continued fraction at shape ``a``.

    Near the transition ``x ~ a`` both expansions need O(sqrt(a)) terms, so
    the fixed cap of ``MAX_ITER`` is raised to ``10 * ceil(sqrt(a))`` once
    that exceeds it (only for a > 2500).
    """
    return np.maximum(MAX_ITER, 10 * np.ceil(np.sqrt(a))).astype(np.int64)


def _as_float_array(v):
    return np.asarray(v, dtype=np.float64)


def _scalar_or_array(out, *inputs):
    if all(np.ndim(v) == 0 for v in inputs):
        return float(out)
    return out


def _stirling_correction(z):
    """lnΓ(z) - [(z - 1/2) ln z - z + ln sqrt(2π)] for z >= 10."""
    zinv = 1.0 / z
    zinv2 = zinv * zinv
    acc = np.zeros_like(z)
    for c in reversed(_STIRLING_COEFFS):
        acc = acc * zinv2 + c
    return acc * zinv


def _ln_gamma(a):
    shift = np.zeros_like(a)
    prod = np.ones_like(a)
    z = a.copy()
    for _ in range(int(_STIRLING_SHIFT)):
        small = z < _STIRLING_SHIFT
        if not small.any():
            break
        prod = np.where(small, prod * z, prod)
        z = np.where(small, z + 1.0, z)
        shift = np.where(small, 1.0, shift)
    out = (z - 0.5) * np.log(z) - z + _HALF_LN_2PI + _stirling_correction(z)
    return np.where(shift > 0, out - np.log(prod), out)


def ln_gamma(a):
    """Natural log of the gamma function for positive real ``a``.

    Arguments below 10 are shifted up with the recurrence
    Γ(a) = Γ(a + k) / (a (a+1) ... (a+k-1)) and the Stirling series with
    eight Bernoulli terms is summed at a + k >= 10.

    Raises
    ------
    DomainError
        If any ``a`` is non-positive or non-finite.
    """
    arr = _as_float_array(a)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError("ln_gamma requires finite a > 0")
    return _scalar_or_array(_ln_gamma(np.atleast_1d(arr)).reshape(arr.shape), a)


def _log1pmx(t):
    """log(1 + t) - t without cancellation for small |t|."""
    out = np.empty_like(t)
    big = np.abs(t) > 0.5
    with np.errstate(divide="ignore"):  # t = -1 (x << a) gives -inf, as it should
        out[big] = np.log1p(t[big]) - t[big]
    ts = t[~big]
    y = ts / (2.0 + ts)
    y2 = y * y
    acc = np.zeros_like(ts)
    for k in range(20, 0, -1):
        acc = acc * y2 + 1.0 / (2 * k + 1)
    out[~big] = -ts * y + 2.0 * y * y2 * acc
    return out


def _ln_prefix(a, x):
    """log of x^a e^{-x} / Γ(a + 1) for x > 0.

    For large a the exponent is rewritten as a*log1pmx((x - a)/a) minus the
    Stirling terms so that no two O(a) quantities are subtracted.
    """
    out = np.empty_like(a)
    large = a >= _STIRLING_SHIFT
    al, xl = a[large], x[large]
    out[large] = (
        al * _log1pmx((xl - al) / al)
        - 0.5 * np.log(2.0 * np.pi * al)
        - _stirling_correction(al)
    )
    asm, xsm = a[~large], x[~large]
    out[~large] = asm * np.log(xsm) - xsm - _ln_gamma(asm + 1.0)
    return out


def _lower_series(a, x, max_iter=None):
    """P(a, x) by the power series; intended for x < a + 1."""
    caps = iteration_cap(a) if max_iter is None else np.full(a.shape, max_iter)
    total = np.ones_like(a)
    term = np.ones_like(a)
    active = np.arange(a.size)
    k = 0
    while active.size:
        k += 1
        exhausted = caps[active] < k
        if exhausted.any():
            i = active[exhausted][0]
            raise NumericalError(
                "incomplete gamma series did not converge",
                a=float(a[i]), x=float(x[i]), iterations=int(caps[i]),
            )
        term[active] *= x[active] / (a[active] + k)
        total[active] += term[active]
        active = active[term[active] > TOL * total[active]]
    return np.exp(_ln_prefix(a, x)) * total


def _upper_cf(a, x, max_iter=None):
    """Q(a, x) = 1 - P(a, x) by the modified-Lentz continued fraction.

    Intended for x >= a + 1; converges for any x > 0 but slowly below that.
    """
    caps = iteration_cap(a) if max_iter is None else np.full(a.shape, max_iter)
    b = x + 1.0 - a
    c = np.full_like(a, 1.0 / _FPMIN)
    d = 1.0 / np.where(np.abs(b) < _FPMIN, _FPMIN, b)
    h = d.copy()
    active = np.arange(a.size)
    i = 0
    while active.size:
        i += 1
        exhausted = caps[active] < i
        if exhausted.any():
            j = active[exhausted][0]
            raise NumericalError(
                "incomplete gamma continued fraction did not converge",
                a=float(a[j]), x=float(x[j]), iterations=int(caps[j]),
            )
        an = -i * (i - a[active])
        b[active] += 2.0
        dd = an * d[active] + b[active]
        dd = np.where(np.abs(dd) < _FPMIN, _FPMIN, dd)
        cc = b[active] + an / c[active]
        cc = np.where(np.abs(cc) < _FPMIN, _FPMIN, cc)
        dd = 1.0 / dd
        step = dd * cc
        d[active] = dd
        c[active] = cc
        h[active] *= step
        active = active[np.abs(step - 1.0) > TOL]
    return np.exp(np.log(a) + _ln_prefix(a, x)) * h


def reg_inc_gamma_lower(a, x, max_iter=None):
    """Regularized lower incomplete gamma function P(a, x) = γ(a, x) / Γ(a).

    Parameters
    ----------
    a : float or array_like
        Shape, ``a > 0``.
    x : float or array_like
        Upper integration limit, ``x >= 0``; ``inf`` gives 1.
    max_iter : int, optional
        Override of :func:`iteration_cap`.

    Raises
    ------
    DomainError
        For non-positive ``a``, negative ``x`` or NaN input.
    NumericalError
        If an expansion fails to converge within the cap; ``context`` holds
        the offending ``(a, x)``.
    """
    a_arr, x_arr = np.broadcast_arrays(_as_float_array(a), _as_float_array(x))
    if np.isnan(a_arr).any() or np.isnan(x_arr).any():
        raise DomainError("reg_inc_gamma_lower got NaN")
    if not np.all(np.isfinite(a_arr)) or np.any(a_arr <= 0):
        raise DomainError("reg_inc_gamma_lower requires finite a > 0")
    if np.any(x_arr < 0):
        raise DomainError("reg_inc_gamma_lower requires x >= 0")

    af = a_arr.ravel().astype(np.float64)
    xf = x_arr.ravel().astype(np.float64)
    out = np.zeros(af.shape)
    out[np.isinf(xf)] = 1.0

    series = (xf > 0) & (xf < af + 1.0)
    cf = np.isfinite(xf) & (xf >= af + 1.0)
    if series.any():
        out[series] = _lower_series(af[series], xf[series], max_iter)
    if cf.any():
        out[cf] = 1.0 - _upper_cf(af[cf], xf[cf], max_iter)
    np.clip(out, 0.0, 1.0, out=out)
    return _scalar_or_array(out.reshape(a_arr.shape), a, x)


def scaled_chi2_cdf(n, x):
    """Pr(Q(n) < x) where Q(n) = χ²_n / n ~ Gamma(n/2, n/2)."""
    n_arr = _as_float_array(n)
    if np.any(n_arr < 1) or np.any(n_arr != np.floor(n_arr)):
        raise DomainError("scaled_chi2_cdf requires integer n >= 1")
    half = 0.5 * n_arr
    return reg_inc_gamma_lower(half, half * _as_float_array(x))


def gamma_cdf(params, x):
    """CDF of Gamma(shape, rate) at ``x``."""
    return reg_inc_gamma_lower(params.shape, params.rate * _as_float_array(x))
