import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from osda_hsi import nn
from osda_hsi.alignment import (
    DegenerateSamplesError,
    KernelConfig,
    decoupled_loss,
    median_bandwidth,
    mmd2,
    rbf_kernel,
)

from oracles import naive_mmd2

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_rbf_self_is_one():
    assert rbf_kernel([1.0, -2.0, 3.0], [1.0, -2.0, 3.0], 0.7) == 1.0


def test_rbf_scalar_value():
    assert rbf_kernel(0.0, 2.0, 1.0) == pytest.approx(math.exp(-2.0), abs=1e-15)
    assert rbf_kernel(0.0, 2.0, 1.0) == pytest.approx(0.135335, abs=1e-6)


@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite), st.floats(0.1, 10))
def test_rbf_symmetric(x, y, sigma):
    assert rbf_kernel(x, y, sigma) == rbf_kernel(y, x, sigma)


def test_rbf_rejects_bad_input():
    with pytest.raises(ValueError):
        rbf_kernel([1.0], [1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        rbf_kernel([1.0], [1.0], 0.0)


def test_median_bandwidth_cases():
    assert median_bandwidth([[0.0], [3.0]]) == 3.0
    assert median_bandwidth([[0.0], [1.0], [2.0]]) == 1.0
    a, b = np.array([1.0, 2.0]), np.array([4.0, 6.0])
    assert median_bandwidth([a, a, b]) == pytest.approx(np.linalg.norm(a - b))
    with pytest.raises(DegenerateSamplesError):
        median_bandwidth([[1.0], [1.0]])


def test_mmd_identical_is_zero():
    s = np.random.default_rng(0).standard_normal((6, 3))
    value, _, _, _ = mmd2(s, s.copy())
    assert value <= 1e-12


def test_mmd_singletons():
    value, _, _, _ = mmd2([[0.0]], [[2.0]], KernelConfig(1.0))
    assert value == pytest.approx(2 - 2 * math.exp(-2), abs=1e-12)
    assert value == pytest.approx(1.729329, abs=1e-6)


@pytest.mark.parametrize("seed", range(50))
def test_mmd_matches_double_sum(seed):
    rng = np.random.default_rng(seed)
    m, n, d = rng.integers(1, 5, size=3)
    s, t = rng.standard_normal((m, d)), rng.standard_normal((n, d)) + rng.uniform(0, 1)
    value, _, _, sigma = mmd2(s, t)
    assert value == pytest.approx(naive_mmd2(s.tolist(), t.tolist(), sigma), abs=1e-12)


def test_mmd_gradient_fd():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = KernelConfig(float(rng.uniform(0.5, 2)))

        def fn(inp):
            v, ds, dt, _ = mmd2(inp["s"], inp["t"], cfg)
            return v, {"s": ds, "t": dt}

        assert nn.grad_check(fn, {"s": rng.standard_normal((3, 2)), "t": rng.standard_normal((3, 2))}) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mmd_properties(seed):
    rng = np.random.default_rng(seed)
    s, t = rng.standard_normal((5, 3)), rng.standard_normal((4, 3)) * 1.5
    v, _, _, _ = mmd2(s, t)
    assert v >= 0
    assert mmd2(t, s)[0] == v
    v_perm, _, _, _ = mmd2(s[rng.permutation(5)], t[rng.permutation(4)])
    assert v_perm == v


def test_mmd_monotone_in_mean_shift():
    means = []
    for delta in (0.0, 0.5, 1.0, 2.0):
        vals = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            s = rng.standard_normal((64, 1))
            t = rng.standard_normal((64, 1)) + delta
            vals.append(mmd2(s, t)[0])
        means.append(np.mean(vals))
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_decoupled_identical_is_zero():
    rng = np.random.default_rng(0)
    spe, spa = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    dl = decoupled_loss(spe, spe.copy(), spa, spa.copy())
    assert dl.l_mmd <= 1e-12


def test_decoupled_spectral_identical_gives_spatial_only():
    rng = np.random.default_rng(1)
    spe = rng.standard_normal((4, 3))
    spa_s, spa_t = rng.standard_normal((4, 3)), rng.standard_normal((4, 3)) + 5
    dl = decoupled_loss(spe, spe.copy(), spa_s, spa_t)
    assert dl.l_spe <= 1e-12
    assert dl.l_mmd == dl.l_spe + dl.l_spa
    assert dl.l_spa > 0.1


def test_decoupled_is_sum_of_independent_terms():
    rng = np.random.default_rng(2)
    a, b, c, d = (rng.standard_normal((3, 4)) for _ in range(4))
    dl = decoupled_loss(a, b, c, d)
    spe = naive_mmd2(a.tolist(), b.tolist(), median_bandwidth(np.concatenate([a, b])))
    spa = naive_mmd2(c.tolist(), d.tolist(), median_bandwidth(np.concatenate([c, d])))
    assert dl.l_mmd == pytest.approx(spe + spa, abs=1e-12)


def test_decoupled_degenerate_batch():
    x = np.ones((3, 2))
    dl = decoupled_loss(x, x, x, x)
    assert dl.l_mmd == 0.0 and not dl.d_spe_s.any()
