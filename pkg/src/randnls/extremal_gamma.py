"""Extremal probabilities of convex combinations of gamma variables.

Two exact results are implemented here, together with Monte-Carlo tools that
check them empirically.

Crossing point
    For X_i ~ Gamma(α_i, α_i) with α₁ < α₂ the CDF difference
    Δ(x) = F₂(x) − F₁(x) is negative, then positive, with a single sign
    change x* in [1, 1 + 1/(2√(α₁(α₂−α₁)))].

Extremal envelope
    For i.i.d. X_i ~ Gamma(α, β) and λ on the probability simplex, the
    extreme values over λ of Pr(Σ λ_i X_i < x) are attained at the uniform
    weights and at a corner. Below the mean α/β the uniform weights give the
    minimum; above (2α+1)/(2β) they give the maximum. Between the two
    nothing is claimed, and :func:`extremal_envelope` says so.
"""

from dataclasses import dataclass, field
import itertools
import math

import numpy as np

from .errors import DomainError, NumericalError
from .special_functions import GammaParams, gamma_cdf

__all__ = [
    "SimplexWeights",
    "CrossingPoint",
    "Envelope",
    "MonteCarloEstimate",
    "delta_cdf",
    "crossing_upper_bound",
    "crossing_point",
    "extremal_envelope",
    "simplex_cdf_mc",
    "simplex_grid",
    "EnvelopeCheck",
    "envelope_sweep",
]

SIMPLEX_ATOL = 1e-12


@dataclass(frozen=True)
class SimplexWeights:
    """Nonnegative weights summing to one."""

    lambdas: tuple

    def __post_init__(self):
        lam = tuple(float(v) for v in np.ravel(self.lambdas))
        if not lam:
            raise DomainError("simplex weights must be non-empty")
        if any(not math.isfinite(v) or v < 0 for v in lam):
            raise DomainError("simplex weights must be finite and nonnegative")
        if abs(math.fsum(lam) - 1.0) > SIMPLEX_ATOL:
            raise DomainError(f"simplex weights sum to {math.fsum(lam)}, not 1")
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def uniform(cls, n):
        return cls((1.0 / n,) * n)

    @classmethod
    def corner(cls, n, i=0):
        lam = [0.0] * n
        lam[i] = 1.0
        return cls(tuple(lam))

    def __len__(self):
        return len(self.lambdas)

    def as_array(self):
        return np.array(self.lambdas)


def crossing_upper_bound(alpha1, alpha2):
    """1 + 1/(2 sqrt(α₁(α₂ − α₁))), the right end of the crossing bracket."""
    return 1.0 + 1.0 / (2.0 * math.sqrt(alpha1 * (alpha2 - alpha1)))


@dataclass(frozen=True)
class CrossingPoint:
    """Location of the sign change of :func:`delta_cdf`."""

    x_star: float
    upper_bound: float
    alpha1: float
    alpha2: float
    lower_bound: float = 1.0
    bracket_width: float = 0.0

    def __post_init__(self):
        if not (0 < self.alpha1 < self.alpha2):
            raise DomainError("need 0 < alpha1 < alpha2")
        if not (self.lower_bound <= self.x_star <= self.upper_bound):
            raise DomainError(
                f"crossing {self.x_star} outside [{self.lower_bound}, {self.upper_bound}]"
            )


@dataclass(frozen=True)
class Envelope:
    """Closed-form extremes of Pr(Σ λ_i X_i < x) over the simplex.

    ``regime`` is one of ``"point"`` (n = 1), ``"below"`` (x < α/β),
    ``"above"`` (x > (2α+1)/(2β)) or ``"indeterminate"``; in the last case
    ``m`` and ``M`` are ``None``.
    """

    regime: str
    m: float | None
    M: float | None

    @property
    def determinate(self):
        return self.regime != "indeterminate"


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    std_error: float
    samples: int

    def __iter__(self):
        return iter((self.estimate, self.std_error))


def _check_pair(alpha1, alpha2):
    if not (math.isfinite(alpha1) and math.isfinite(alpha2) and 0 < alpha1 < alpha2):
        raise DomainError(f"need 0 < alpha1 < alpha2, got ({alpha1}, {alpha2})")


def delta_cdf(alpha1, alpha2, x):
    """Δ(x) = Pr(X₂ < x) − Pr(X₁ < x) with X_i ~ Gamma(α_i, α_i)."""
    _check_pair(alpha1, alpha2)
    return gamma_cdf(GammaParams(alpha2, alpha2), x) - gamma_cdf(
        GammaParams(alpha1, alpha1), x
    )


def crossing_point(alpha1, alpha2, tol=1e-12, max_expansions=20):
    """Bisect for the unique sign change of Δ inside its theoretical bracket.

    The search starts on [1, upper_bound]. If rounding leaves Δ with the
    wrong sign at an end, that end is pushed outward by a margin that
    doubles each time, up to ``max_expansions`` times.

    Raises
    ------
    NumericalError
        If no sign change is found, or the bisection result falls outside the
        theoretical bracket. Either points at special-function inaccuracy.
    """
    _check_pair(alpha1, alpha2)
    if tol <= 0:
        raise DomainError("tol must be positive")
    ub = crossing_upper_bound(alpha1, alpha2)
    lo, hi = 1.0, ub
    margin = 1e-6 * (ub - 1.0)
    f_lo, f_hi = delta_cdf(alpha1, alpha2, lo), delta_cdf(alpha1, alpha2, hi)
    for _ in range(max_expansions):
        if f_lo < 0 < f_hi:
            break
        if f_lo >= 0:
            lo = max(lo - margin, 0.5 * lo)
            f_lo = delta_cdf(alpha1, alpha2, lo)
        if f_hi <= 0:
            hi += margin
            f_hi = delta_cdf(alpha1, alpha2, hi)
        margin *= 2.0
    else:
        raise NumericalError(
            "no sign change of the CDF difference", alpha1=alpha1, alpha2=alpha2,
            bracket=(lo, hi), values=(f_lo, f_hi),
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        f_mid = delta_cdf(alpha1, alpha2, mid)
        if f_mid < 0:
            lo = mid
        elif f_mid > 0:
            hi = mid
        else:
            lo = hi = mid
    x_star = 0.5 * (lo + hi)
    if not (1.0 <= x_star <= ub):
        raise NumericalError(
            "crossing point outside its theoretical bracket",
            alpha1=alpha1, alpha2=alpha2, x_star=x_star, upper_bound=ub,
        )
    return CrossingPoint(x_star, ub, float(alpha1), float(alpha2), 1.0, hi - lo)


def extremal_envelope(alpha, beta, n, x):
    """Min and max over the simplex of Pr(Σ λ_i X_i < x), X_i ~ Gamma(α, β).

    Parameters
    ----------
    alpha, beta : float
        Shape and rate of the i.i.d. summands.
    n : int
        Number of summands.
    x : float
        Evaluation point, ``x >= 0``.

    Returns
    -------
    Envelope
        With ``m = Pr(mean of n < x)`` and ``M = Pr(X₁ < x)`` for
        ``x < α/β``, the two swapped for ``x > (2α+1)/(2β)``, and an
        indeterminate marker in between. Both end points of the gap belong
        to the indeterminate regime.
    """
    params = GammaParams(alpha, beta)
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    if not (x >= 0):
        raise DomainError(f"x must be nonnegative, got {x}")
    corner = gamma_cdf(params, x)
    if n == 1:
        return Envelope("point", corner, corner)
    uniform = gamma_cdf(GammaParams(n * alpha, n * beta), x)
    if x < alpha / beta:
        return Envelope("below", uniform, corner)
    if x > (2 * alpha + 1) / (2 * beta):
        return Envelope("above", corner, uniform)
    return Envelope("indeterminate", None, None)


def simplex_cdf_mc(params: GammaParams, w: SimplexWeights, x, samples=10**5, seed=0,
                   chunk=1 << 18):
    """Monte-Carlo estimate of Pr(Σ λ_i X_i < x), X_i i.i.d. Gamma(α, β).

    Gamma variates come from numpy's ``Generator.standard_gamma`` on a
    PCG64 stream seeded with ``seed``. That is the Marsaglia-Tsang
    squeeze-rejection method, with the U^{1/α} boost for α < 1. Zero
    weights draw nothing, so the estimate depends only on the support of
    ``w``.

    Returns
    -------
    MonteCarloEstimate
        Unpacks as ``(estimate, std_error)``. The standard error is the
        binomial one, sqrt(p(1 − p)/samples).
    """
    if samples < 10**4:
        raise DomainError("simplex_cdf_mc needs at least 10^4 samples")
    rng = np.random.default_rng(seed)
    lam = w.as_array()
    lam = lam[lam > 0]
    hits = 0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        draws = rng.standard_gamma(params.shape, size=(m, lam.size))
        y = draws @ lam / params.rate
        hits += int(np.count_nonzero(y < x))
        done += m
    p = hits / samples
    return MonteCarloEstimate(p, math.sqrt(p * (1.0 - p) / samples), samples)


def simplex_grid(n, step=0.1, include_uniform=True):
    """Points of the n-simplex whose coordinates are multiples of ``step``.

    The uniform point is appended when it is not already on the grid.
    """
    k = round(1.0 / step)
    if not math.isclose(k * step, 1.0):
        raise DomainError("1/step must be an integer")
    pts = []
    for head in itertools.product(range(k + 1), repeat=n - 1):
        rest = k - sum(head)
        if rest >= 0:
            pts.append(tuple(h / k for h in head) + (rest / k,))
    if include_uniform and k % n:
        pts.append((1.0 / n,) * n)
    return [SimplexWeights(p) for p in pts]


@dataclass(frozen=True)
class EnvelopeCheck:
    """One simplex point of an envelope sweep."""

    alpha: float
    beta: float
    n: int
    x: float
    weights: SimplexWeights
    estimate: float
    std_error: float
    envelope: Envelope = field(repr=False)
    z: float = 4.0

    @property
    def inside(self):
        """Estimate within [m − z se, M + z se]; vacuous when indeterminate."""
        if not self.envelope.determinate:
            return True
        slack = self.z * self.std_error
        return self.envelope.m - slack <= self.estimate <= self.envelope.M + slack


def envelope_sweep(alpha, beta, n, xs, step=0.1, samples=10**5, seed=0, z=4.0):
    """MC estimate at every simplex grid point for every ``x`` in ``xs``.

    Each (x, grid point) pair gets its own child stream of
    ``SeedSequence(seed)``, so the result does not depend on evaluation
    order.
    """
    params = GammaParams(alpha, beta)
    grid = simplex_grid(n, step)
    streams = np.random.SeedSequence(seed).spawn(len(xs) * len(grid))
    out = []
    for i, x in enumerate(xs):
        env = extremal_envelope(alpha, beta, n, x)
        for j, w in enumerate(grid):
            est = simplex_cdf_mc(params, w, x, samples, streams[i * len(grid) + j])
            out.append(EnvelopeCheck(alpha, beta, n, float(x), w, est.estimate,
                                     est.std_error, env, z))
    return out
