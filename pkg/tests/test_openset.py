import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from osda_hsi.openset import (
    Decision,
    DegenerateFeatureError,
    GmmModel,
    classify_known_unknown,
    consistency_score,
    consistency_scores,
    gmm_fit,
    responsibilities,
    unknown_mask,
)

from oracles import reference_em

nonzero = arrays(float, 5, elements=st.floats(-10, 10, allow_nan=False)).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_parallel_orthogonal_antiparallel():
    f = np.array([1.0, 2.0, -3.0])
    assert consistency_score(f, f).s == pytest.approx(1.0)
    assert consistency_score([1.0, 0.0], [0.0, 3.0]).s == 0.0
    anti = consistency_score(f, -f)
    assert anti.sim == pytest.approx(-1.0) and anti.s == pytest.approx(1.0)


def test_zero_norm_rejected():
    with pytest.raises(DegenerateFeatureError):
        consistency_score([0.0, 0.0], [1.0, 1.0])


@settings(max_examples=50)
@given(nonzero, nonzero, st.floats(0.1, 100), st.floats(0.1, 100), st.booleans())
def test_score_scale_and_sign_invariant(a, b, ca, cb, flip):
    s = consistency_score(a, b).s
    t = consistency_score(ca * a, (-cb if flip else cb) * b).s
    assert t == pytest.approx(s, abs=1e-12)
    assert 0.0 <= s <= 1.0


def test_vectorised_matches_scalar():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    expect = [consistency_score(x, y).s for x, y in zip(a, b)]
    np.testing.assert_allclose(consistency_scores(a, b), expect, atol=1e-15)


def test_gmm_on_two_points():
    m = gmm_fit([0.0, 0.0, 1.0, 1.0])
    np.testing.assert_allclose(sorted(m.mu), [0.0, 1.0], atol=1e-6)
    np.testing.assert_allclose(m.pi, [0.5, 0.5], atol=1e-6)


def test_gmm_matches_reference_em():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(0.2, 0.05, 60), rng.normal(0.6, 0.08, 40)])
    m = gmm_fit(x, tol=0, max_iter=200)
    mu0 = np.quantile(x, [0.25, 0.75])
    mu, var, pi = reference_em(x, mu0, [x.var()] * 2, [0.5, 0.5], iters=199)
    np.testing.assert_allclose(m.mu, mu, atol=1e-9)
    np.testing.assert_allclose(m.var, var, atol=1e-9)
    np.testing.assert_allclose(m.pi, pi, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_gmm_recovers_two_clusters(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(0.1, 0.02, 50), rng.normal(0.9, 0.02, 50)])
    m = gmm_fit(x)
    np.testing.assert_allclose(sorted(m.mu), [0.1, 0.9], atol=0.05)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_loglik_nondecreasing(seed, k):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(rng.uniform(0, 1), rng.uniform(0.01, 0.2), 40) for _ in range(3)])
    trace = gmm_fit(x, k=k).loglik_trace
    assert all(b >= a - 1e-10 for a, b in zip(trace, trace[1:]))


def test_gmm_deterministic_and_degenerate():
    x = np.random.default_rng(0).uniform(size=50)
    a, b = gmm_fit(x, seed=4), gmm_fit(x, seed=4)
    assert np.array_equal(a.mu, b.mu) and a.loglik_trace == b.loglik_trace
    with pytest.raises(ValueError):
        gmm_fit(np.full(10, 0.3) + np.linspace(0, 1e-10, 10))
    with pytest.raises(ValueError):
        gmm_fit(x, k=1)


def test_responsibilities():
    m = GmmModel(pi=np.array([0.5, 0.5]), mu=np.array([0.0, 1.0]), var=np.array([0.01, 0.01]))
    assert responsibilities(m, 0.0)[0] > 0.99
    np.testing.assert_allclose(responsibilities(m, 0.5), [0.5, 0.5], atol=1e-15)
    g = responsibilities(m, np.random.default_rng(0).uniform(-1, 2, 30))
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


def test_decision_example():
    s = [0.05, 0.1, 0.9, 0.95]
    flags = [d.flag for d in classify_known_unknown(gmm_fit(s), s)]
    assert flags == [Decision.KNOWN, Decision.KNOWN, Decision.UNKNOWN, Decision.UNKNOWN]


def test_all_below_midpoint_known():
    m = GmmModel(pi=np.array([0.5, 0.5]), mu=np.array([0.1, 0.9]), var=np.array([1e-3, 1e-3]))
    assert not unknown_mask(m, [0.0, 0.2, 0.45]).any()


def test_equal_means_all_known():
    m = GmmModel(pi=np.array([0.3, 0.7]), mu=np.array([0.5, 0.5]), var=np.array([0.01, 0.1]))
    assert not unknown_mask(m, np.linspace(0, 1, 11)).any()


def test_component_relabeling_invariant():
    m = GmmModel(pi=np.array([0.2, 0.5, 0.3]), mu=np.array([0.1, 0.8, 0.4]), var=np.array([0.01, 0.02, 0.03]))
    perm = [2, 0, 1]
    m2 = GmmModel(pi=m.pi[perm], mu=m.mu[perm], var=m.var[perm])
    s = np.linspace(0, 1, 101)
    assert np.array_equal(unknown_mask(m, s), unknown_mask(m2, s))


def midpoint_agreement(seeds=range(10), n=100, sd=0.02):
    """Pooled agreement with the midpoint threshold on 6-sd separated clusters."""
    hits = total = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        lo, hi = 0.2, 0.2 + 6 * sd
        s = np.concatenate([rng.normal(lo, sd, n), rng.normal(hi, sd, n)])
        hits += int(np.sum(unknown_mask(gmm_fit(s), s) == (s > (lo + hi) / 2)))
        total += s.size
    return hits / total


def test_agrees_with_midpoint_oracle():
    assert midpoint_agreement() >= 0.99


def test_model_json_roundtrip():
    m = gmm_fit([0.1, 0.2, 0.8, 0.9, 0.85])
    back = GmmModel.from_json(m.to_json())
    assert np.array_equal(back.mu, m.mu) and np.array_equal(back.var, m.var)
    assert m.to_json()["K"] == 2
