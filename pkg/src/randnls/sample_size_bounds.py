"""Sample sizes for the Gaussian trace estimator.

Given a tolerance budget (eps, delta), these routines find how many Gaussian
probes ``n`` are needed so that the estimator ``tr_n(A)`` satisfies

* lower:      Pr(tr_n(A) >= (1 - eps) tr(A)) >= 1 - delta
* upper:      Pr(tr_n(A) <= (1 + eps) tr(A)) >= 1 - delta
* two-sided:  Pr(|tr_n(A) - tr(A)| <= eps tr(A)) >= 1 - delta

The sufficient sizes hold for every SPSD ``A``; the necessary sizes use the
rank ``r`` of ``A`` (the distribution of ``tr_n(A) / tr(A)`` is then no better
than Q(n r)). Every tight size is the first ``n`` of an upward integer scan
over the scaled chi-squared CDF. Once the scan passes the point where the
probability is known to be monotone in ``n`` it switches to bisection, which
finds the same first ``n`` with far fewer CDF evaluations.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import DomainError
from .special_functions import scaled_chi2_cdf

__all__ = [
    "ToleranceBudget",
    "SampleSizeResult",
    "DEFAULT_SCAN_LIMIT",
    "loose_sufficient",
    "p_lower",
    "p_upper",
    "p_two_sided",
    "sufficient_lower",
    "sufficient_upper",
    "sufficient_two_sided",
    "necessary_lower",
    "necessary_upper",
    "necessary_two_sided",
    "sufficient",
    "necessary",
]

DEFAULT_SCAN_LIMIT = 10**6
SIDES = ("lower", "upper", "two_sided")

_FIRST_CHUNK = 512
_MAX_CHUNK = 1 << 16


@dataclass(frozen=True)
class ToleranceBudget:
    """Relative accuracy ``eps`` and failure probability ``delta``."""

    eps: float
    delta: float

    def __post_init__(self):
        if not (0.0 < self.eps < 1.0):
            raise DomainError(f"eps must lie in (0, 1), got {self.eps}")
        if not (0.0 < self.delta < 1.0):
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class SampleSizeResult:
    """Outcome of a sample-size scan.

    Attributes
    ----------
    n : int or None
        Smallest qualifying sample size, or ``None`` if the scan reached
        ``scan_limit`` without success.
    kind : {"sufficient", "necessary"}
    side : {"lower", "upper", "two_sided"}
    rank_used : int or None
        Rank ``r`` for necessary sizes, ``None`` for sufficient ones.
    scan_limit : int
    scan_start : int
        First ``n`` examined. Upper and two-sided scans start at
        ``floor(1/eps) + 1`` because the conditions are only meaningful
        above ``1/eps``.
    monotone_threshold : float or None
        ``eps^-2 r^-2`` for the upper and two-sided sides, the point past
        which the upper probability is known to increase with ``n``. The
        lower probability decreases for all ``n``, so it is ``None`` there.
    """

    n: int | None
    kind: str
    side: str
    rank_used: int | None
    scan_limit: int
    scan_start: int = 1
    monotone_threshold: float | None = None

    def __post_init__(self):
        if self.kind not in ("sufficient", "necessary"):
            raise DomainError(f"unknown kind {self.kind!r}")
        if self.side not in SIDES:
            raise DomainError(f"unknown side {self.side!r}")
        if self.n is not None and not (1 <= self.n <= self.scan_limit):
            raise DomainError("n must lie in [1, scan_limit]")
        if (self.rank_used is not None) != (self.kind == "necessary"):
            raise DomainError("rank_used is required exactly for necessary sizes")

    @property
    def found(self):
        return self.n is not None

    @property
    def in_monotone_regime(self):
        """Whether every ``n' >= n`` is guaranteed to qualify as well.

        ``None`` when the scan was exhausted.
        """
        if self.n is None:
            return None
        if self.monotone_threshold is None:
            return True
        return self.n > self.monotone_threshold

    @property
    def regime_triple(self):
        """``(n, eps^-2 r^-2, in_monotone_regime)`` for callers that want to
        judge the necessary-and-sufficient regime themselves."""
        return (self.n, self.monotone_threshold, self.in_monotone_regime)


def loose_sufficient(t: ToleranceBudget) -> int:
    """Classic sufficient size: the smallest integer above 8 eps^-2 ln(1/delta)."""
    return math.floor(8.0 * math.log(1.0 / t.delta) / t.eps**2) + 1


def p_lower(eps, n, r=1):
    """P^-_{eps,r}(n) = Pr(Q(n r) < 1 - eps)."""
    return scaled_chi2_cdf(np.asarray(n) * r, 1.0 - eps)


def p_upper(eps, n, r=1):
    """P^+_{eps,r}(n) = Pr(Q(n r) <= 1 + eps)."""
    return scaled_chi2_cdf(np.asarray(n) * r, 1.0 + eps)


def p_two_sided(eps, n, r=1):
    """Pr(1 - eps <= Q(n r) <= 1 + eps)."""
    return p_upper(eps, n, r) - p_lower(eps, n, r)


def _scan(condition, start, limit, monotone_from=0):
    """First ``n`` in ``[start, limit]`` with ``condition(n)`` true, else None.

    ``condition`` maps an integer array to a boolean array. Every ``n`` up to
    ``monotone_from`` (and at least one chunk) is checked explicitly, in
    chunks that grow geometrically. Past that point the condition is known
    to stay true once it holds, so the rest of the scan is a galloping
    search followed by bisection. It returns the same ``n`` as a
    one-by-one scan but takes O(log n) CDF evaluations instead of O(n).
    """
    lo = start
    linear_end = min(limit, max(monotone_from, start + _FIRST_CHUNK - 1))
    chunk = _FIRST_CHUNK
    while lo <= linear_end:
        hi = min(linear_end, lo + chunk - 1)
        ns = np.arange(lo, hi + 1, dtype=np.int64)
        hits = np.flatnonzero(condition(ns))
        if hits.size:
            return int(ns[hits[0]])
        lo = hi + 1
        chunk = min(2 * chunk, _MAX_CHUNK)
    if lo > limit:
        return None

    def holds(n):
        return bool(condition(np.array([n], dtype=np.int64))[0])

    # condition fails at lo - 1; gallop for a success
    bad, step = lo - 1, 1
    while True:
        probe = min(limit, bad + step)
        if holds(probe):
            good = probe
            break
        if probe == limit:
            return None
        bad, step = probe, 2 * step
    while good - bad > 1:
        mid = (good + bad) // 2
        if holds(mid):
            good = mid
        else:
            bad = mid
    return good


def _check_rank_limit(r, scan_limit):
    if int(r) != r or r < 1:
        raise DomainError(f"rank must be a positive integer, got {r}")
    if int(scan_limit) != scan_limit or scan_limit < 1:
        raise DomainError(f"scan_limit must be a positive integer, got {scan_limit}")


def _upper_start(eps):
    return math.floor(1.0 / eps) + 1


def _monotone_from(eps, r):
    # P+ increases (and P- decreases) in n beyond eps^-2 r^-2
    return math.ceil(1.0 / (eps * r) ** 2)


def _lower(t, r, scan_limit, kind):
    _check_rank_limit(r, scan_limit)
    n = _scan(lambda ns: p_lower(t.eps, ns, r) <= t.delta, 1, scan_limit, 1)
    return SampleSizeResult(
        n, kind, "lower", r if kind == "necessary" else None, scan_limit, 1, None
    )


def _upper(t, r, scan_limit, kind):
    _check_rank_limit(r, scan_limit)
    start = _upper_start(t.eps)
    n = _scan(
        lambda ns: p_upper(t.eps, ns, r) >= 1.0 - t.delta,
        start, scan_limit, _monotone_from(t.eps, r),
    )
    return SampleSizeResult(
        n, kind, "upper", r if kind == "necessary" else None, scan_limit, start,
        1.0 / (t.eps * r) ** 2,
    )


def _two_sided(t, r, scan_limit, kind):
    _check_rank_limit(r, scan_limit)
    start = _upper_start(t.eps)
    n = _scan(
        lambda ns: p_two_sided(t.eps, ns, r) >= 1.0 - t.delta,
        start, scan_limit, _monotone_from(t.eps, r),
    )
    return SampleSizeResult(
        n, kind, "two_sided", r if kind == "necessary" else None, scan_limit, start,
        1.0 / (t.eps * r) ** 2,
    )


def sufficient_lower(t: ToleranceBudget, scan_limit: int = DEFAULT_SCAN_LIMIT):
    """Smallest ``n >= 1`` with Pr(Q(n) < 1 - eps) <= delta.

    Since that probability decreases in ``n``, every larger ``n`` also
    qualifies and the lower-side guarantee holds for any SPSD matrix.
    """
    return _lower(t, 1, scan_limit, "sufficient")


def necessary_lower(t: ToleranceBudget, r: int, scan_limit: int = DEFAULT_SCAN_LIMIT):
    """Smallest ``n >= 1`` with Pr(Q(n r) < 1 - eps) <= delta.

    No smaller ``n`` can give the lower-side guarantee for a rank-``r``
    matrix; for equal nonzero eigenvalues it is also sufficient.
    """
    return _lower(t, r, scan_limit, "necessary")


def sufficient_upper(t: ToleranceBudget, scan_limit: int = DEFAULT_SCAN_LIMIT):
    """Smallest ``n > 1/eps`` with Pr(Q(n) <= 1 + eps) >= 1 - delta.

    The first qualifying ``n`` is returned even when it lies below eps^-2,
    where later ``n`` are not guaranteed to qualify; see
    :attr:`SampleSizeResult.in_monotone_regime`.
    """
    return _upper(t, 1, scan_limit, "sufficient")


def necessary_upper(t: ToleranceBudget, r: int, scan_limit: int = DEFAULT_SCAN_LIMIT):
    """Smallest ``n > 1/eps`` with Pr(Q(n r) <= 1 + eps) >= 1 - delta."""
    return _upper(t, r, scan_limit, "necessary")


def sufficient_two_sided(t: ToleranceBudget, scan_limit: int = DEFAULT_SCAN_LIMIT):
    """Smallest ``n > 1/eps`` with Pr(1 - eps <= Q(n) <= 1 + eps) >= 1 - delta."""
    return _two_sided(t, 1, scan_limit, "sufficient")


def necessary_two_sided(t: ToleranceBudget, r: int, scan_limit: int = DEFAULT_SCAN_LIMIT):
    """Two-sided analogue of :func:`necessary_upper`."""
    return _two_sided(t, r, scan_limit, "necessary")


def sufficient(t: ToleranceBudget, side: str, scan_limit: int = DEFAULT_SCAN_LIMIT):
    """Dispatch to the sufficient scan for ``side``."""
    return {"lower": _lower, "upper": _upper, "two_sided": _two_sided}[_side(side)](
        t, 1, scan_limit, "sufficient"
    )


def necessary(t: ToleranceBudget, side: str, r: int, scan_limit: int = DEFAULT_SCAN_LIMIT):
    """Dispatch to the necessary scan for ``side``."""
    return {"lower": _lower, "upper": _upper, "two_sided": _two_sided}[_side(side)](
        t, r, scan_limit, "necessary"
    )


def _side(side):
    if side not in SIDES:
        raise DomainError(f"side must be one of {SIDES}, got {side!r}")
    return side
