import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from bless.metrics import (bias_var_mse, confusion_rates, gaussian_kl, gaussian_samples, posterior_distance,
                           rates_table, reported_trio, wasserstein1)
from bless.rng import stream


def test_confusion_rates_hand_case():
    est = np.array([1, 1, 0, 0, 1, 0, 0, 0], bool)
    tru = np.array([1, 0, 1, 0, 1, 0, 0, 0], bool)
    r = confusion_rates(est, tru)
    assert (r.TPR, r.TDR, r.FPR, r.FDR) == (2 / 3, 2 / 3, 1 / 5, 1 / 3)
    assert r.counts == {"TP": 2, "FP": 1, "FN": 1, "TN": 4}
    empty = confusion_rates(np.zeros(4, bool), np.zeros(4, bool))
    assert empty.TPR is None and empty.TDR is None and empty.FDR is None and empty.FPR == 0.0
    tab = rates_table({"a": r, "b": empty})
    assert list(tab.label) == ["a", "b"] and tab.TP.tolist() == [2, 0]
    with pytest.raises(ValueError):
        confusion_rates(np.zeros(3, bool), np.zeros(4, bool))


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, st.integers(1, 50)), st.integers(0, 2 ** 31))
def test_confusion_rates_against_loop(tru, seed):
    est = stream(seed, "conf").random(tru.size) < 0.5
    tp = sum(1 for e, t in zip(est, tru) if e and t)
    fp = sum(1 for e, t in zip(est, tru) if e and not t)
    fn = sum(1 for e, t in zip(est, tru) if not e and t)
    tn = tru.size - tp - fp - fn
    r = confusion_rates(est, tru)
    assert r.TPR == (tp / (tp + fn) if tp + fn else None)
    assert r.FPR == (fp / (fp + tn) if fp + tn else None)
    assert r.TDR == (tp / (tp + fp) if tp + fp else None)
    assert r.FDR == (fp / (tp + fp) if tp + fp else None)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_bias_variance_decomposition(R, M, seed):
    rng = stream(seed, "bvm")
    est = rng.standard_normal((R, M, 2))
    tru = rng.standard_normal((M, 2))
    act = rng.random((M, 2)) < 0.5
    out = bias_var_mse(est, tru, act)
    assert np.allclose(out.mse, out.bias ** 2 + out.variance, atol=1e-10)
    b, v, m = out.aggregate["all"]
    assert m == pytest.approx(np.mean(out.bias ** 2 + out.variance), abs=1e-10)
    assert set(out.aggregate) <= {"all", "active", "inactive"}


def test_bias_var_mse_known_values():
    est = np.array([[1.0, 0.0], [3.0, 0.0]])
    out = bias_var_mse(est, np.array([1.0, 0.0]))
    assert out.bias.tolist() == [1.0, 0.0] and out.variance.tolist() == [1.0, 0.0]
    assert out.mse.tolist() == [2.0, 0.0]
    with pytest.raises(ValueError):
        bias_var_mse(est[:1], np.array([1.0, 0.0]))


def test_reported_trio():
    est = np.array([[0.5, 0.1], [0.7, -0.1]])
    var = np.array([[0.01, 0.02], [0.03, 0.04]])
    tru = np.array([0.5, 0.0])
    out = reported_trio(est, var, tru, active=np.array([True, False]))
    b, v, m = out["all"]
    assert b == pytest.approx(0.05) and v == pytest.approx(0.025) and m == pytest.approx(0.05 ** 2 + 0.025)
    assert out["active"][0] == pytest.approx(0.1) and out["inactive"][0] == pytest.approx(0.0)
    single = reported_trio(est[0], var[0], tru)
    assert single["all"][0] == pytest.approx(0.05)
    with pytest.raises(ValueError):
        reported_trio(est, var[:, :1], tru)


def test_gaussian_kl_values():
    I1 = np.eye(1)
    assert gaussian_kl(np.zeros(1), I1, np.ones(1), I1) == pytest.approx(0.5)
    assert gaussian_kl(np.zeros(1), I1, np.zeros(1), I1) == 0.0
    # univariate closed form
    ma, va, mb, vb = 0.3, 2.0, -1.0, 0.5
    ref = np.log(np.sqrt(vb / va)) + (va + (ma - mb) ** 2) / (2 * vb) - 0.5
    assert gaussian_kl(np.array([ma]), np.array([[va]]), np.array([mb]), np.array([[vb]])) == pytest.approx(ref)
    assert np.isnan(gaussian_kl(np.zeros(1), np.zeros((1, 1)), np.zeros(1), I1))
    # multivariate against a Monte Carlo estimate of E_a[log a - log b]
    A = np.array([[1.0, 0.4], [0.4, 0.8]])
    B = np.array([[1.5, -0.2], [-0.2, 1.0]])
    mu_b = np.array([0.5, -0.3])
    x = stats.multivariate_normal(np.zeros(2), A).rvs(200000, random_state=1)
    mc = np.mean(stats.multivariate_normal(np.zeros(2), A).logpdf(x) - stats.multivariate_normal(mu_b, B).logpdf(x))
    assert gaussian_kl(np.zeros(2), A, mu_b, B) == pytest.approx(mc, abs=0.01)


def test_wasserstein_values():
    rng = stream(0, "w1")
    a = rng.standard_normal(10000)
    b = rng.standard_normal(10000) + 1
    assert wasserstein1(a, b) == pytest.approx(1.0, rel=0.05)
    assert wasserstein1(a, a) == 0.0
    assert wasserstein1(a, a + 0.3) == pytest.approx(0.3)
    c = rng.standard_normal(3000) * 2
    assert wasserstein1(a, c) == pytest.approx(stats.wasserstein_distance(a, c), rel=0.05)


@settings(max_examples=40, deadline=None)
@given(st.integers(30, 200), st.integers(30, 200), st.integers(0, 2 ** 31))
def test_wasserstein_metric_properties(n, m, seed):
    rng = stream(seed, "w1p")
    a, b, c = rng.standard_normal(n), 2 * rng.standard_normal(m) + 1, rng.standard_normal(n) - 1
    assert wasserstein1(a, b) == wasserstein1(b, a) >= 0
    assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 0.1


def test_posterior_distance():
    rng = stream(1, "pd")
    a = rng.standard_normal((5000, 3))
    b = a + np.array([0.0, 1.0, 2.0])
    d = posterior_distance(a, b)
    assert d.kl[0] == pytest.approx(0.0, abs=1e-12)
    assert d.kl[1] == pytest.approx(0.5, rel=0.05) and d.kl[2] == pytest.approx(2.0, rel=0.05)
    assert np.allclose(d.w1, [0.0, 1.0, 2.0])
    same = posterior_distance(a, a)
    assert np.all(same.kl == 0) and np.all(same.w1 == 0)
    const = np.ones((40, 2))
    assert not posterior_distance(const, const).kl_defined.any()
    with pytest.raises(ValueError):
        posterior_distance(a[:29], a[:29])
    with pytest.raises(ValueError):
        posterior_distance(a, a[:, :2])
    ab = posterior_distance(rng.standard_normal((500, 2, 2)), rng.standard_normal((500, 2, 2)))
    assert ab.kl.shape == (2,) and np.all(ab.kl >= 0)


def test_gaussian_samples():
    mean = np.array([[0.5, -1.0], [2.0, 0.0]])
    cov = np.stack([np.array([[1.0, 0.5], [0.5, 2.0]]), np.eye(2) * 0.1])
    s = gaussian_samples(mean, cov, 100000, stream(2, "gs"))
    assert s.shape == (100000, 2, 2)
    assert np.allclose(s.mean(axis=0), mean, atol=0.02)
    for j in range(2):
        assert np.allclose(np.cov(s[:, j].T), cov[j], atol=0.03)


def test_perfect_inverted_and_offset_cases():
    tru = stream(3, "perf").random(1000) < 0.3
    r = confusion_rates(tru, tru)
    assert (r.TPR, r.TDR, r.FPR, r.FDR) == (1.0, 1.0, 0.0, 0.0)
    r = confusion_rates(~tru, tru)
    assert r.TPR == 0.0 and r.FPR == 1.0
    truth = stream(4, "perf").standard_normal((6, 2))
    same = bias_var_mse(np.stack([truth] * 5), truth)
    assert np.allclose(same.bias, 0, atol=1e-15) and np.allclose(same.variance, 0, atol=1e-30)
    assert np.all(same.mse == 0)
    off = bias_var_mse(np.stack([truth + 0.25] * 5), truth)
    assert np.allclose(off.bias, 0.25) and np.allclose(off.variance, 0) and np.allclose(off.mse, 0.0625)
