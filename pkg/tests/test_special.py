import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nfa_inspect.special import (
    binomial_tail,
    chi2_cdf,
    chi2_logsf,
    chi2_logsf_scalar,
    chi2_quantile,
    chi2_sf,
    log_betainc_pair,
    log_binomial_tail,
    log_gammainc_pair,
    log_gammainc_pair_scalar,
)

mpmath = pytest.importorskip("mpmath")


def exact_binomial_tail(n, k, p):
    p = Fraction(p)
    return float(sum(math.comb(n, j) * p ** j * (1 - p) ** (n - j) for j in range(k, n + 1)))


class TestChi2Cdf:
    def test_zero(self):
        for df in (0.5, 1, 2, 45, 1000):
            assert chi2_cdf(0.0, df) == 0.0

    def test_df2_closed_form_points(self):
        assert chi2_cdf(2 * math.log(2), 2) == pytest.approx(0.5, abs=1e-12)
        assert chi2_cdf(4.605170, 2) == pytest.approx(0.9, abs=1e-6)

    def test_df2_closed_form_grid(self):
        x = np.linspace(0, 80, 1000)
        np.testing.assert_allclose(chi2_cdf(x, 2), -np.expm1(-x / 2), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("df", [0.3, 1, 2.5, 3, 17, 45, 72, 289.7, 1000, 1e4])
    def test_against_scipy(self, df):
        x = np.concatenate([np.linspace(0, 4 * df + 50, 400), [1e-8, 1e3, 1e5, 1e6]])
        np.testing.assert_allclose(chi2_cdf(x, df), stats.chi2.cdf(x, df), rtol=0, atol=1e-12)
        np.testing.assert_allclose(chi2_sf(x, df), stats.chi2.sf(x, df), rtol=0, atol=1e-12)

    def test_monotone_in_x_and_df(self):
        x = np.linspace(0, 120, 301)
        dfs = [1, 2, 5, 10, 45, 80]
        table = np.array([chi2_cdf(x, df) for df in dfs])
        assert np.all(np.diff(table, axis=1) >= -1e-15)
        assert np.all(np.diff(table, axis=0) <= 1e-15)

    def test_invalid(self):
        with pytest.raises(ValueError):
            chi2_cdf(-1.0, 2)
        with pytest.raises(ValueError):
            chi2_cdf(1.0, 0)


class TestLogTails:
    @pytest.mark.parametrize("df,x", [(1, 2000.0), (45, 3000.0), (2, 1500.0), (7.3, 900.0),
                                      (0.02, 50.0), (500.5, 4000.0)])
    def test_deep_tail_against_mpmath(self, df, x):
        mpmath.mp.dps = 50
        ref = float(mpmath.log(mpmath.gammainc(df / 2, x / 2, mpmath.inf, regularized=True)))
        assert chi2_logsf_scalar(x, df) == pytest.approx(ref, rel=1e-12)
        assert float(chi2_logsf(np.array([x]), df)[0]) == pytest.approx(ref, rel=1e-12)

    def test_vector_matches_scalar(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.1, 300, 200)
        x = rng.uniform(0, 900, 200)
        lp, lq = log_gammainc_pair(a, x)
        for i in range(0, 200, 7):
            sp, sq = log_gammainc_pair_scalar(float(a[i]), float(x[i]))
            assert lp[i] == pytest.approx(sp, rel=1e-11, abs=1e-300)
            assert lq[i] == pytest.approx(sq, rel=1e-11, abs=1e-300)

    def test_pair_complementary(self):
        a = np.array([0.5, 3.0, 22.5, 100.0])
        x = np.array([0.2, 4.0, 20.0, 130.0])
        lp, lq = log_gammainc_pair(a, x)
        np.testing.assert_allclose(np.exp(lp) + np.exp(lq), 1.0, atol=1e-14)

    def test_betainc_against_scipy(self):
        from scipy.special import betainc
        for a, b, x in [(2, 3, 0.3), (0.5, 0.5, 0.9), (30, 2, 0.99), (11.1, 7.4, 0.01)]:
            lo, hi = log_betainc_pair(a, b, x)
            assert math.exp(lo) == pytest.approx(betainc(a, b, x), rel=1e-12, abs=1e-300)
            assert math.exp(lo) + math.exp(hi) == pytest.approx(1.0, abs=1e-14)


class TestChi2Quantile:
    def test_closed_forms(self):
        assert chi2_quantile(0.99, 2) == pytest.approx(-2 * math.log(0.01), abs=1e-10)
        assert chi2_quantile(0.5, 2) == pytest.approx(2 * math.log(2), abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(p=st.floats(1e-6, 1 - 1e-6), df=st.floats(0.2, 500))
    def test_round_trip(self, p, df):
        q = chi2_quantile(p, df)
        assert chi2_cdf(q, df) == pytest.approx(p, abs=1e-9)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_invalid(self, p):
        with pytest.raises(ValueError):
            chi2_quantile(p, 2)


class TestBinomialTail:
    def test_examples(self):
        assert binomial_tail(4, 2, 0.5) == pytest.approx(0.6875, rel=1e-12)
        assert binomial_tail(10, 10, 0.5) == pytest.approx(2.0 ** -10, rel=1e-12)
        for n, p in [(5, 0.3), (12.5, 0.01), (0, 0.5)]:
            assert binomial_tail(n, 0, p) == 1.0
            assert binomial_tail(n, -1.0, p) == 1.0

    def test_exhaustive_small_n(self):
        for n in range(1, 31):
            for k in range(0, n + 1):
                for p in (0.01, 0.1, 0.5):
                    exact = exact_binomial_tail(n, k, p)
                    assert binomial_tail(n, k, p) == pytest.approx(exact, rel=1e-9)

    def test_log_saturated(self):
        # P(X >= n) = p**n, far below double range for large n
        n, p = 900.0, 0.01
        assert log_binomial_tail(n, n, p) == pytest.approx(n * math.log(p), rel=1e-10)

    def test_monotone(self):
        ks = np.arange(0, 21)
        ps = [0.01, 0.05, 0.2, 0.5, 0.8]
        table = np.array([[binomial_tail(20, k, p) for k in ks] for p in ps])
        assert np.all(np.diff(table, axis=1) <= 1e-15)
        assert np.all(np.diff(table, axis=0) >= -1e-15)

    def test_real_valued_against_scipy(self):
        from scipy.special import betainc
        n, k, p = 9.0, 2.7, 0.01
        assert binomial_tail(n, k, p) == pytest.approx(betainc(k, n - k + 1, p), rel=1e-10)

    def test_invalid(self):
        with pytest.raises(ValueError):
            binomial_tail(4, 5, 0.5)
        with pytest.raises(ValueError):
            binomial_tail(4, 2, 1.0)
