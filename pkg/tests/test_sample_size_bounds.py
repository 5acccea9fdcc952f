import csv
import math
import os
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import gammainc

from randnls.errors import DomainError
from randnls.sample_size_bounds import (
    ToleranceBudget, SampleSizeResult, loose_sufficient, p_lower, p_upper, p_two_sided,
    sufficient_lower, sufficient_upper, sufficient_two_sided,
    necessary_lower, necessary_upper, necessary_two_sided, sufficient, necessary,
)
from conftest import GOLDEN

T = ToleranceBudget


def get_sample_sizes(epsilon, delta, max_n, r):
    """Line-by-line port of the classic vectorised reference scan.

    The reference ``gammainc(x, a)`` takes its arguments in the opposite
    order to scipy's ``gammainc(a, x)``.
    """
    ns = np.arange(1, max_n + 1)
    p1 = gammainc(ns * r / 2, ns * r * (1 - epsilon) / 2)
    i1 = np.flatnonzero(p1 <= delta)
    n1 = int(ns[i1[0]]) if i1.size else None
    ns = np.arange(math.floor(1 / epsilon) + 1, max_n + 1)
    p2 = gammainc(ns * r / 2, ns * r * (1 + epsilon) / 2)
    i2 = np.flatnonzero(p2 >= 1 - delta)
    n2 = int(ns[i2[0]]) if i2.size else None
    return n1, n2


def golden(eps):
    with open(os.path.join(GOLDEN, f"sample_sizes_eps{eps}.csv")) as fh:
        return [{k: float(v) if k == "delta" else int(v) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ToleranceBudget and result type ------------------------------------------

@pytest.mark.parametrize("eps, delta", [(0, 0.1), (1, 0.1), (0.1, 0), (0.1, 1), (-0.1, 0.5)])
def test_budget_validation(eps, delta):
    with pytest.raises(DomainError):
        T(eps, delta)


def test_result_invariants():
    with pytest.raises(DomainError):
        SampleSizeResult(11, "sufficient", "lower", None, 10)
    with pytest.raises(DomainError):
        SampleSizeResult(5, "necessary", "lower", None, 10)
    with pytest.raises(DomainError):
        SampleSizeResult(5, "sufficient", "upper", 2, 10)
    assert not SampleSizeResult(None, "sufficient", "lower", None, 10).found


# loose bound --------------------------------------------------------------

@pytest.mark.parametrize("eps, delta, expected", [
    (0.1, 0.01, 3685),
    (0.1, 0.3, 964),
    (1 - 1e-9, math.exp(-1 / 8), 2),
])
def test_loose_sufficient(eps, delta, expected):
    assert loose_sufficient(T(eps, delta)) == expected


# golden curves from the brute-force scipy scan ----------------------------

@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
def test_golden_curves(eps):
    for row in golden(eps):
        t = T(eps, row["delta"])
        assert loose_sufficient(t) == row["loose"]
        if row["r"] == 1:
            got = [sufficient(t, s).n for s in ("lower", "upper", "two_sided")]
        else:
            got = [necessary(t, s, row["r"]).n for s in ("lower", "upper", "two_sided")]
        assert got == [row["lower"], row["upper"], row["two_sided"]], row


@pytest.mark.parametrize("seed", range(20))
def test_reference_scan_parity(seed):
    rng = np.random.default_rng(seed)
    eps = float(rng.uniform(0.05, 0.5))
    delta = float(rng.uniform(0.01, 0.5))
    r = int(rng.integers(1, 6))
    n1, n2 = get_sample_sizes(eps, delta, 20_000, r)
    t = T(eps, delta)
    assert necessary_lower(t, r, 20_000).n == n1
    assert necessary_upper(t, r, 20_000).n == n2


# operation examples --------------------------------------------------------

def test_sufficient_lower_examples():
    assert sufficient_lower(T(0.1, 0.99), 10**5).n == 1
    assert sufficient_lower(T(0.1, 0.3), 10**5).n == get_sample_sizes(0.1, 0.3, 10**4, 1)[0]
    tight = sufficient_lower(T(0.1, 0.01), 10**5).n
    assert tight == 1023 < loose_sufficient(T(0.1, 0.01))


def test_necessary_lower_examples():
    t = T(0.1, 0.3)
    assert necessary_lower(t, 1).n == sufficient_lower(t).n
    assert necessary_lower(t, 4).n <= necessary_lower(t, 1).n
    assert p_lower(0.5, 100) <= 0.5
    res = necessary_lower(T(0.5, 0.5), 100)
    assert res.n == 1 and res.rank_used == 100 and res.kind == "necessary"


def test_sufficient_upper_examples():
    res = sufficient_upper(T(0.1, 0.3))
    assert res.n == 44 and res.n > 10 and res.scan_start == 11
    assert res.n == get_sample_sizes(0.1, 0.3, 10**4, 1)[1]
    assert res.in_monotone_regime is False
    assert res.regime_triple == (44, pytest.approx(100.0), False)


def test_sufficient_upper_threshold_at_eleven():
    # place delta exactly on the n = 11 threshold; nothing smaller is scanned
    delta = 1.0 - p_upper(0.1, 11)
    assert sufficient_upper(T(0.1, delta)).n == 11


def test_necessary_upper_examples():
    t = T(0.1, 0.3)
    assert necessary_upper(t, 1).n == sufficient_upper(t).n
    assert necessary_upper(T(0.1, 0.1), 10).n <= necessary_upper(T(0.1, 0.1), 1).n
    assert necessary_upper(T(0.3, 0.5), 2).n == get_sample_sizes(0.3, 0.5, 10**4, 2)[1]


def test_two_sided_examples():
    for eps, delta in [(0.1, 0.1), (0.05, 0.3), (0.2, 0.01)]:
        t = T(eps, delta)
        two = sufficient_two_sided(t).n
        assert two >= max(sufficient_lower(t).n, sufficient_upper(t).n)
    assert sufficient_two_sided(T(0.1, 0.1)).n == 540
    assert sufficient_two_sided(T(0.1, 0.999)).n == 11
    assert necessary_two_sided(T(0.1, 0.1), 1).n == 540


def test_scan_exhaustion_is_data():
    res = sufficient_upper(T(0.001, 0.001), scan_limit=5000)
    assert res.n is None and not res.found and res.in_monotone_regime is None


def test_large_scan_is_fast_and_exact():
    t0 = time.perf_counter()
    res = sufficient_lower(T(0.01, 1e-6))
    assert time.perf_counter() - t0 < 5
    n = res.n
    assert p_lower(0.01, n) <= 1e-6 < p_lower(0.01, n - 1)


@pytest.mark.parametrize("bad", [dict(r=0), dict(r=1.5), dict(scan_limit=0)])
def test_argument_validation(bad):
    kw = dict(r=1, scan_limit=100)
    kw.update(bad)
    with pytest.raises(DomainError):
        necessary_lower(T(0.1, 0.1), kw["r"], kw["scan_limit"])


def test_unknown_side():
    with pytest.raises(DomainError):
        sufficient(T(0.1, 0.1), "left")


# properties -----------------------------------------------------------------

@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
@pytest.mark.parametrize("r", [1, 2, 5])
def test_lower_probability_strictly_decreasing(eps, r):
    p = p_lower(eps, np.arange(1, 201), r)
    assert np.all(np.diff(p) < 0)


@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
@pytest.mark.parametrize("r", [1, 2, 5])
def test_upper_probability_increasing_past_threshold(eps, r):
    start = math.ceil(1 / (eps * r) ** 2)
    p = p_upper(eps, np.arange(start, start + 200), r)
    assert np.all(np.diff(p) > 0)


def test_upper_probability_increasing_from_100():
    assert np.all(np.diff(p_upper(0.1, np.arange(100, 201))) > 0)


@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
def test_tight_never_exceeds_loose(eps):
    for delta in np.round(np.arange(0.01, 0.301, 0.01), 2):
        t = T(eps, float(delta))
        loose = loose_sufficient(t)
        assert sufficient_lower(t).n <= loose
        assert sufficient_upper(t).n <= loose


def test_order_of_magnitude_gap():
    t = T(0.1, 0.3)
    assert loose_sufficient(t) / sufficient_lower(t).n >= 5
    assert loose_sufficient(t) / sufficient_upper(t).n >= 5


@given(st.floats(0.05, 0.5), st.floats(0.01, 0.5), st.integers(1, 20))
def test_necessary_never_exceeds_sufficient(eps, delta, r):
    t = T(eps, delta)
    for side in ("lower", "upper", "two_sided"):
        assert necessary(t, side, r).n <= sufficient(t, side).n


@given(st.floats(0.05, 0.5), st.floats(0.01, 0.5), st.integers(1, 8))
def test_first_hit_is_minimal(eps, delta, r):
    t = T(eps, delta)
    n = necessary_lower(t, r).n
    assert p_lower(eps, n, r) <= delta
    assert n == 1 or p_lower(eps, n - 1, r) > delta
    n = necessary_upper(t, r).n
    start = math.floor(1 / eps) + 1
    assert p_upper(eps, n, r) >= 1 - delta
    assert np.all(p_upper(eps, np.arange(start, n), r) < 1 - delta)


@given(st.floats(0.05, 0.5), st.integers(1, 300), st.integers(1, 5))
def test_two_sided_probability_is_difference(eps, n, r):
    assert p_two_sided(eps, n, r) == pytest.approx(p_upper(eps, n, r) - p_lower(eps, n, r))
