"""Gaussian Monte-Carlo trace estimation for matrices known only through
matrix-vector products.

The estimator is tr_n(A) = (1/n) Σ_j w_jᵀ A w_j with w_j ~ N(0, I).
Probe vectors are drawn with ``numpy.random.default_rng(seed)`` (PCG64 bit
generator, ziggurat normals) as one ``(n, dim)`` block, so an estimate is
bit-reproducible for a given seed and numpy version.
"""

from dataclasses import dataclass
from typing import Callable
import math

import numpy as np

from .errors import ConfigurationError, DomainError, InterfaceError
from .sample_size_bounds import ToleranceBudget, sufficient, SIDES

__all__ = [
    "ImplicitSpsdOperator",
    "TraceEstimate",
    "CoverageResult",
    "estimate_trace",
    "estimate_trace_with_guarantee",
    "empirical_coverage",
    "satisfies_side",
    "dense_operator",
    "fixture",
    "FIXTURES",
]


@dataclass
class ImplicitSpsdOperator:
    """A symmetric positive semi-definite matrix available only as ``v -> A v``.

    Attributes
    ----------
    dim : int
        Size ``s`` of the (square) matrix.
    apply : callable
        Maps an ``s``-vector to ``A v``.
    rank_hint : int, optional
        Rank ``r`` if known; used by the necessary sample sizes.
    true_trace : float, optional
        Exact trace, for test fixtures and coverage experiments.
    apply_block : callable, optional
        Maps an ``(s, k)`` array to ``A V``. Used only by
        :func:`empirical_coverage`, where per-vector calls would dominate.
    concurrent_safe : bool
        Whether ``apply`` may be called from several threads at once.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    rank_hint: int | None = None
    true_trace: float | None = None
    apply_block: Callable[[np.ndarray], np.ndarray] | None = None
    concurrent_safe: bool = False

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise DomainError(f"dim must be a positive integer, got {self.dim}")
        if self.rank_hint is not None and not (1 <= self.rank_hint <= self.dim):
            raise DomainError("rank_hint must lie in [1, dim]")

    def matvec(self, v):
        out = np.asarray(self.apply(v), dtype=np.float64)
        if out.shape != (self.dim,):
            raise InterfaceError(
                f"apply returned shape {out.shape}, expected ({self.dim},)"
            )
        return out

    def matmat(self, V):
        """``A V`` for an ``(s, k)`` block, via ``apply_block`` when given."""
        if self.apply_block is None:
            return np.column_stack([self.matvec(v) for v in V.T])
        out = np.asarray(self.apply_block(V), dtype=np.float64)
        if out.shape != V.shape:
            raise InterfaceError(
                f"apply_block returned shape {out.shape}, expected {V.shape}"
            )
        return out

    def check_invariants(self, samples=5, seed=0):
        """Spot-check linearity, symmetry and a nonnegative quadratic form.

        Returns a dict of booleans keyed by invariant name.
        """
        rng = np.random.default_rng(seed)
        ok = {"linear": True, "symmetric": True, "nonnegative": True}
        for _ in range(samples):
            u, v = rng.standard_normal((2, self.dim))
            au, av, auv = self.matvec(u), self.matvec(v), self.matvec(u + v)
            scale = np.linalg.norm(au) + np.linalg.norm(av)
            ok["linear"] &= bool(np.linalg.norm(auv - au - av) <= 1e-8 * scale)
            ok["symmetric"] &= bool(
                abs(u @ av - v @ au) <= 1e-8 * np.linalg.norm(au) * np.linalg.norm(v)
            )
            ok["nonnegative"] &= bool(v @ av >= -1e-10 * (v @ v))
        return ok


@dataclass(frozen=True)
class TraceEstimate:
    value: float
    n_used: int
    seed: int

    def __post_init__(self):
        if self.n_used < 1:
            raise DomainError("n_used must be positive")


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    std_error: float
    n: int
    trials: int

    def __iter__(self):
        return iter((self.coverage, self.std_error))


def _probes(seed, n, dim):
    return np.random.default_rng(seed).standard_normal((n, dim))


def estimate_trace(op: ImplicitSpsdOperator, n: int, seed: int) -> TraceEstimate:
    """tr_n(A) with ``n`` Gaussian probes; calls ``op.apply`` exactly n times."""
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    W = _probes(seed, n, op.dim)
    total = 0.0
    for w in W:
        total += float(w @ op.matvec(w))
    return TraceEstimate(total / n, int(n), seed)


def estimate_trace_with_guarantee(op, t: ToleranceBudget, side: str, seed: int,
                                  scan_limit: int | None = None) -> TraceEstimate:
    """Estimate with ``n`` set by the sufficient bound for ``side``.

    Raises
    ------
    ConfigurationError
        If the sample-size scan finds no ``n`` below ``scan_limit``.
    """
    res = sufficient(t, side) if scan_limit is None else sufficient(t, side, scan_limit)
    if res.n is None:
        raise ConfigurationError(
            f"no sufficient sample size for {t} ({side}) below {res.scan_limit}"
        )
    return estimate_trace(op, res.n, seed)


def satisfies_side(estimate, trace, eps, side):
    """Elementwise test of the accuracy event for ``side``."""
    estimate = np.asarray(estimate)
    lower = estimate >= (1.0 - eps) * trace
    upper = estimate <= (1.0 + eps) * trace
    if side == "lower":
        return lower
    if side == "upper":
        return upper
    if side == "two_sided":
        return lower & upper
    raise DomainError(f"side must be one of {SIDES}, got {side!r}")


def empirical_coverage(op, t: ToleranceBudget, side: str, n: int, trials: int,
                       seed: int, max_block: int = 1 << 16) -> CoverageResult:
    """Fraction of ``trials`` independent estimates meeting the accuracy event.

    All probes come from one ``default_rng(seed)`` stream, drawn in blocks of
    whole trials and pushed through ``op.matmat``.

    Returns
    -------
    CoverageResult
        Unpacks as ``(coverage, std_error)`` with the binomial standard error.
    """
    if op.true_trace is None:
        raise ConfigurationError("empirical_coverage needs op.true_trace")
    if trials < 1000:
        raise DomainError("empirical_coverage needs at least 10^3 trials")
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    satisfies_side(0.0, 0.0, t.eps, side)
    rng = np.random.default_rng(seed)
    per_block = max(1, max_block // n)
    hits = 0
    done = 0
    while done < trials:
        k = min(per_block, trials - done)
        W = rng.standard_normal((k * n, op.dim))
        quad = np.einsum("ij,ji->i", W, op.matmat(W.T))
        est = quad.reshape(k, n).mean(axis=1)
        hits += int(np.count_nonzero(satisfies_side(est, op.true_trace, t.eps, side)))
        done += k
    p = hits / trials
    return CoverageResult(p, math.sqrt(p * (1.0 - p) / trials), int(n), int(trials))


def dense_operator(A, rank_hint=None, true_trace=None):
    """Wrap an explicit symmetric matrix as an :class:`ImplicitSpsdOperator`."""
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("dense_operator needs a square matrix")
    if true_trace is None:
        true_trace = float(np.trace(A))
    return ImplicitSpsdOperator(
        dim=A.shape[0],
        apply=lambda v: A @ v,
        rank_hint=rank_hint,
        true_trace=true_trace,
        apply_block=lambda V: A @ V,
        concurrent_safe=True,
    )


def _rank1(seed):
    v = np.random.default_rng(seed).standard_normal(10)
    return dense_operator(np.outer(v, v), rank_hint=1)


def _equal5(seed):
    A = np.zeros((10, 10))
    A[:5, :5] = 3.0 * np.eye(5)
    return dense_operator(A, rank_hint=5)


def _random20(seed):
    G = np.random.default_rng(seed).standard_normal((20, 20))
    return dense_operator(G @ G.T, rank_hint=20)


def _identity(seed):
    return dense_operator(np.eye(5), rank_hint=5)


def _zero(seed):
    return ImplicitSpsdOperator(
        dim=5, apply=lambda v: np.zeros(5), true_trace=0.0,
        apply_block=lambda V: np.zeros_like(V), concurrent_safe=True,
    )


FIXTURES = {
    "rank1": _rank1,
    "equal5": _equal5,
    "random20": _random20,
    "identity": _identity,
    "zero": _zero,
}


def fixture(name: str, seed: int = 0) -> ImplicitSpsdOperator:
    """Named test operators.

    ``rank1``: v vᵀ in 10 dimensions. ``equal5``: 3·I₅ padded to 10×10.
    ``random20``: G Gᵀ with a 20×20 Gaussian G. ``identity``: I₅.
    ``zero``: the 5×5 zero matrix. ``seed`` fixes the random ones.
    """
    try:
        return FIXTURES[name](seed)
    except KeyError:
        raise DomainError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
