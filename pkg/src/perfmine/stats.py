"""Statistical verdicts for timing runs.

A patched version demonstrates an execution-time improvement on a test iff
the median run time dropped by at least ``delta`` (relative) AND a one-sided
Mann-Whitney test rejects the null at ``alpha`` (strict inequality). Both
thresholds default to 0.05.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import median
from typing import NamedTuple, Optional, Sequence

METHOD_EXACT = "exact"
METHOD_NORMAL = "normal_approx"

# Null U distributions keyed by (n, m); building one costs O(n * n*m) integer
# additions, so the cache matters for repeated 30-vs-30 judgements.
_DIST_CACHE: dict[tuple[int, int], list[int]] = {}


@dataclass(frozen=True)
class StatConfig:
    """Thresholds for the significance rule.

    delta: minimum relative median improvement (0.05 = 5%).
    alpha: p-value bound, applied strictly (p < alpha).
    exact_threshold: use the exact null distribution when
        len(pre) * len(post) <= exact_threshold and the pooled sample is
        tie-free; otherwise fall back to the normal approximation.
    """

    delta: float = 0.05
    alpha: float = 0.05
    exact_threshold: int = 10000

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.exact_threshold < 1:
            raise ValueError("exact_threshold must be >= 1")


@dataclass(frozen=True)
class TimingSeries:
    """Per-test wall times: pre (original version) vs post (patched)."""

    test_name: str
    pre_ms: tuple[float, ...]
    post_ms: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "pre_ms", tuple(self.pre_ms))
        object.__setattr__(self, "post_ms", tuple(self.post_ms))
        _validate_sample(self.pre_ms, "pre_ms")
        _validate_sample(self.post_ms, "post_ms")


@dataclass(frozen=True)
class SignificanceResult:
    u_statistic: float
    p_value: float
    relative_improvement: float
    significant: bool
    method: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value outside [0, 1]: {self.p_value}")
        if self.u_statistic < 0:
            raise ValueError(f"u_statistic negative: {self.u_statistic}")
        if self.method not in (METHOD_EXACT, METHOD_NORMAL):
            raise ValueError(f"unknown method: {self.method}")


class MannWhitneyResult(NamedTuple):
    u_statistic: float
    p_value: float
    method: str


class PrecisionRecall(NamedTuple):
    precision: Optional[float]
    recall: Optional[float]


def _validate_sample(values: Sequence[float], name: str) -> None:
    if len(values) == 0:
        raise ValueError(f"{name} must be non-empty")
    for v in values:
        if not v > 0:
            raise ValueError(f"{name} contains a non-positive duration: {v}")


def exact_u_distribution(n: int, m: int) -> list[int]:
    """Null distribution of U for tie-free samples of sizes n and m.

    Returns counts[u] = number of the C(n+m, n) equally likely rank
    assignments in which exactly u (pre, post) pairs rank the post value
    below the pre value. Computed as the coefficients of the Gaussian
    binomial [n+m, n]_q via polynomial multiply/divide, all in exact
    integer arithmetic.
    """
    if n < 0 or m < 0:
        raise ValueError("sample sizes must be non-negative")
    key = (n, m) if n <= m else (m, n)  # distribution is symmetric in (n, m)
    cached = _DIST_CACHE.get(key)
    if cached is not None:
        return list(cached)
    a, b = key
    size = a * b + 1
    coeffs = [0] * size
    coeffs[0] = 1
    for i in range(1, a + 1):
        # multiply by (1 - q^(b+i))
        k = b + i
        for j in range(size - 1, k - 1, -1):
            coeffs[j] -= coeffs[j - k]
        # divide by (1 - q^i)
        for j in range(i, size):
            coeffs[j] += coeffs[j - i]
    _DIST_CACHE[key] = coeffs
    return list(coeffs)


def u_statistic(pre: Sequence[float], post: Sequence[float]) -> float:
    """U = #{(a, b) in pre x post : b < a} + 1/2 per tied pair.

    Large U means post values sit below pre values, i.e. the patched
    version ran faster.
    """
    u = 0.0
    for a in pre:
        for b in post:
            if b < a:
                u += 1.0
            elif b == a:
                u += 0.5
    return u


def mann_whitney_one_sided(
    pre: Sequence[float],
    post: Sequence[float],
    exact_threshold: int = 10000,
) -> MannWhitneyResult:
    """One-sided Mann-Whitney test of "post is stochastically smaller".

    The p-value is P(U >= observed) under the null of identical
    distributions. Tie-free samples with len(pre)*len(post) within
    exact_threshold use the exact null distribution; everything else uses
    the normal approximation with midrank tie correction and a 0.5
    continuity correction.
    """
    _validate_sample(pre, "pre")
    _validate_sample(post, "post")
    n, m = len(pre), len(post)
    u = u_statistic(pre, post)

    pooled = list(pre) + list(post)
    tie_free = len(set(pooled)) == n + m
    if tie_free and n * m <= exact_threshold:
        counts = exact_u_distribution(n, m)
        u_int = int(round(u))  # integral for tie-free samples
        numer = sum(counts[u_int:])
        p = numer / math.comb(n + m, n)
        return MannWhitneyResult(u, min(max(p, 0.0), 1.0), METHOD_EXACT)

    big_n = n + m
    tie_sum = _tie_term(pooled)
    variance = (n * m / 12.0) * ((big_n + 1) - tie_sum / (big_n * (big_n - 1)))
    if variance <= 0:
        # every pooled value identical: no evidence either way
        return MannWhitneyResult(u, 1.0, METHOD_NORMAL)
    z = (u - n * m / 2.0 - 0.5) / math.sqrt(variance)
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return MannWhitneyResult(u, min(max(p, 0.0), 1.0), METHOD_NORMAL)


def _tie_term(pooled: Sequence[float]) -> float:
    """Sum of t^3 - t over groups of tied values in the pooled sample."""
    counts: dict[float, int] = {}
    for v in pooled:
        counts[v] = counts.get(v, 0) + 1
    return float(sum(t**3 - t for t in counts.values() if t > 1))


def relative_improvement(pre: Sequence[float], post: Sequence[float]) -> float:
    """(median(pre) - median(post)) / median(pre); negative for regressions."""
    _validate_sample(pre, "pre")
    _validate_sample(post, "post")
    m_pre = median(pre)
    return (m_pre - median(post)) / m_pre


def is_significant(improvement: float, p_value: float, config: StatConfig) -> bool:
    """The significance rule: improvement >= delta AND p < alpha (strict)."""
    return improvement >= config.delta and p_value < config.alpha


def judge(series: TimingSeries, config: StatConfig | None = None) -> SignificanceResult:
    """Apply the full significance rule to one test's timing series."""
    config = config or StatConfig()
    mwu = mann_whitney_one_sided(
        series.pre_ms, series.post_ms, exact_threshold=config.exact_threshold
    )
    improvement = relative_improvement(series.pre_ms, series.post_ms)
    if mwu.u_statistic > len(series.pre_ms) * len(series.post_ms):
        raise AssertionError("U exceeds |pre|*|post|")
    return SignificanceResult(
        u_statistic=mwu.u_statistic,
        p_value=mwu.p_value,
        relative_improvement=improvement,
        significant=is_significant(improvement, mwu.p_value, config),
        method=mwu.method,
    )


def precision_recall(tp: int, fp: int, fn: int, tn: int) -> PrecisionRecall:
    """Precision/recall from confusion counts; undefined ratios become None."""
    for name, v in (("tp", tp), ("fp", fp), ("fn", fn), ("tn", tn)):
        if v < 0 or int(v) != v:
            raise ValueError(f"{name} must be a non-negative integer, got {v}")
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    return PrecisionRecall(precision, recall)
