"""Paired Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

EXACT_MAX_N = 12


class WilcoxonResult(NamedTuple):
    statistic: float   # sum of ranks of positive differences a - b
    p_value: float     # two-sided
    n: int             # non-zero differences used
    method: str


def _signed_ranks(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("wilcoxon needs two paired 1-D samples of equal length")
    if len(a) < 5:
        raise ValueError("wilcoxon needs at least 5 pairs")
    d = a - b
    d = d[d != 0]
    if len(d) == 0:
        raise ValueError("all paired differences are zero; the test is undefined")
    return d, rankdata(np.abs(d))


def exact_null_distribution(ranks: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Support and probabilities of the positive-rank sum under random signs.

    Average ranks are multiples of 1/2, so the recursion runs on doubled ranks.
    """
    doubled = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    support = np.arange(len(counts)) / 2.0
    return support, counts / 2.0 ** len(doubled)


def _exact_p(ranks: np.ndarray, w: float) -> float:
    support, prob = exact_null_distribution(ranks)
    lower = prob[support <= w + 1e-9].sum()
    upper = prob[support >= w - 1e-9].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def _normal_p(ranks: np.ndarray, w: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, ties = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((ties**3 - ties).sum()) / 48.0
    if var <= 0:
        return 1.0
    diff = w - mean
    z = (abs(diff) - 0.5) / math.sqrt(var) if abs(diff) >= 0.5 else 0.0
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided signed-rank test of a - b.

    Zero differences are dropped and tied magnitudes get average ranks. The
    p-value is exact for up to 12 non-zero pairs with ``method="auto"`` and a
    tie-corrected normal approximation with continuity correction beyond.
    """
    d, ranks = _signed_ranks(a, b)
    w = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if len(d) <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = _exact_p(ranks, w)
    elif method == "normal":
        p = _normal_p(ranks, w)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, p, len(d), method)
