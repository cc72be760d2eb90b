import itertools

import numpy as np
import pytest
from scipy.stats import rankdata

from alflow.stats import exact_null_distribution, wilcoxon_signed_rank


def enumeration_p(a, b):
    """Two-sided p by listing all 2^n sign patterns of the ranked differences."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    sums = [sum(ri for ri, s in zip(r, signs) if s) for signs in itertools.product((0, 1), repeat=len(r))]
    sums = np.array(sums)
    lo = np.mean(sums <= w + 1e-9)
    hi = np.mean(sums >= w - 1e-9)
    return w, min(1.0, 2 * min(lo, hi))


class TestWilcoxon:
    def test_all_positive_n5(self):
        res = wilcoxon_signed_rank([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
        assert res.statistic == 15.0
        assert res.p_value == pytest.approx(1 / 16, abs=1e-15)
        assert res.method == "exact"

    def test_symmetry(self, rng):
        a = rng.normal(size=8)
        up = wilcoxon_signed_rank(a + 0.7, a)
        down = wilcoxon_signed_rank(a - 0.7, a)
        assert down.statistic == 0.0 and up.statistic == 36.0
        assert up.p_value == down.p_value

    def test_matches_enumeration(self):
        rng = np.random.default_rng(7)
        for case in range(50):
            n = 5 + case % 8
            a = rng.normal(size=n)
            b = a + rng.normal(0.3, 1.0, size=n)
            if case % 4 == 0:
                a, b = np.round(a, 1), np.round(b, 1)  # ties and zeros
            if np.all(a == b):
                continue
            w, p = enumeration_p(a, b)
            res = wilcoxon_signed_rank(a, b, method="exact")
            assert res.statistic == pytest.approx(w)
            assert res.p_value == pytest.approx(p, rel=1e-12, abs=1e-15)

    def test_normal_close_to_exact_at_12(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.normal(size=12), rng.normal(size=12)
            exact = wilcoxon_signed_rank(a, b, method="exact").p_value
            approx = wilcoxon_signed_rank(a, b, method="normal").p_value
            assert abs(exact - approx) < 0.02

    def test_auto_switches_to_normal(self, rng):
        res = wilcoxon_signed_rank(rng.normal(size=30), rng.normal(size=30))
        assert res.method == "normal" and 0 <= res.p_value <= 1

    def test_zero_differences_dropped(self):
        res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [1, 1, 1, 1, 1, 1])
        assert res.n == 5

    def test_errors(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2, 3], [1, 2, 4])
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(np.ones(6), np.ones(6))
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(np.ones(6), np.ones(5))
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(np.arange(6.0), np.zeros(6), method="bogus")

    def test_null_distribution_sums_to_one(self):
        support, prob = exact_null_distribution([1, 2, 3.5, 3.5, 5])
        assert prob.sum() == pytest.approx(1.0)
        assert support[-1] == 15.0
        np.testing.assert_allclose(prob, prob[::-1])
