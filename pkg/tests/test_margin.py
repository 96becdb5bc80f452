import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import aaml_reference, central_diff, rel_error, softmax_ce
from triretrieval._norm import DegenerateInputError
from triretrieval.encoders import FeatureBatch
from triretrieval.margin import AamlConfig, CenterBank, aaml_loss, angles, init_centers, normalize_centers


def _instance(seed, n=8, c=4, d=16):
    rng = np.random.default_rng(seed)
    return (FeatureBatch(rng.standard_normal((n, d))), rng.integers(0, c, n),
            CenterBank(rng.standard_normal((c, d))))


def test_angles_examples():
    bank = CenterBank(np.array([[0.0, 2.0], [0.0, 1.0], [1.0, 0.0]]))
    th = angles(FeatureBatch(np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])), bank)
    assert th[0, 0] == pytest.approx(0.0, abs=1e-3)          # parallel, up to the clamp
    assert 0 < th[0, 0] < math.pi
    assert th[1, 1] == pytest.approx(math.pi / 2, abs=1e-15)
    assert th[2, 2] == pytest.approx(math.pi / 4, abs=1e-12)


def test_angles_zero_feature_rejected():
    with pytest.raises(DegenerateInputError):
        angles(FeatureBatch(np.zeros((1, 2))), CenterBank(np.eye(2)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(1e-3, 1e3))
def test_angles_scale_invariant(f, gamma):
    f = f + np.array([1e-2, 0, 0, 0])  # keep rows away from zero
    bank = CenterBank(np.random.default_rng(0).standard_normal((3, 4)))
    np.testing.assert_allclose(angles(FeatureBatch(gamma * f), bank), angles(FeatureBatch(f), bank), atol=1e-6)


def test_scalar_loss_no_margin():
    f = FeatureBatch(np.array([[1.0, 0.0]]))
    loss, _, _ = aaml_loss(f, np.array([0]), CenterBank(np.eye(2)), AamlConfig(s=1.0, m=0.0))
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-5)
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_scalar_loss_right_angle_margin():
    f = FeatureBatch(np.array([[1.0, 0.0]]))
    loss, _, _ = aaml_loss(f, np.array([0]), CenterBank(np.eye(2)), AamlConfig(s=1.0, m=math.pi / 2))
    assert loss == pytest.approx(math.log(2), abs=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_zero_margin_is_softmax_ce(seed):
    f, y, bank = _instance(seed)
    loss, _, _ = aaml_loss(f, y, bank, AamlConfig(s=32.0, m=0.0))
    u = f.values / np.linalg.norm(f.values, axis=1, keepdims=True)
    w = bank.centers / np.linalg.norm(bank.centers, axis=1, keepdims=True)
    assert abs(loss - softmax_ce((32.0 * u @ w.T).tolist(), y.tolist())) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_loop_reference(seed):
    f, y, bank = _instance(seed)
    loss, _, _ = aaml_loss(f, y, bank, AamlConfig())
    assert loss == pytest.approx(aaml_reference(f.values, y, bank.centers, 32.0, 0.15), rel=1e-12)


def _grad_errors(f, y, bank, cfg):
    _, gf, gc = aaml_loss(f, y, bank, cfg)
    nf = central_diff(lambda x: aaml_loss(FeatureBatch(x), y, bank, cfg)[0], f.values)
    nc = central_diff(lambda c: aaml_loss(f, y, CenterBank(c), cfg)[0], bank.centers)
    return rel_error(gf, nf), rel_error(gc, nc)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_finite_difference(seed):
    f, y, bank = _instance(seed)
    assert max(_grad_errors(f, y, bank, AamlConfig(s=32.0, m=0.15))) <= 1e-5


def test_gradients_through_fallback_branch():
    rng = np.random.default_rng(3)
    bank = CenterBank(rng.standard_normal((4, 6)))
    y = np.array([0, 1, 2, 3, 0, 1])
    # features pointing away from their own center land in the linear branch
    f = -bank.centers[y] + 0.05 * rng.standard_normal((6, 6))
    cfg = AamlConfig(s=16.0, m=1.0)
    th = angles(FeatureBatch(f), bank)[np.arange(6), y]
    assert np.all(th + cfg.m > math.pi)
    assert max(_grad_errors(FeatureBatch(f), y, bank, cfg)) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_loss_non_decreasing_in_margin(seed):
    f, y, bank = _instance(seed)
    th = angles(f, bank)[np.arange(8), y]
    m_max = math.pi - th.max()
    losses = [aaml_loss(f, y, bank, AamlConfig(s=8.0, m=m))[0] for m in np.linspace(0, m_max, 12)]
    assert all(b >= a for a, b in zip(losses, losses[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 64.0), st.floats(0.0, 3.0))
def test_loss_positive(seed, s, m):
    f, y, bank = _instance(seed, n=4, c=3, d=5)
    loss, gf, gc = aaml_loss(f, y, bank, AamlConfig(s, m))
    assert loss > 0
    assert np.all(np.isfinite(gf)) and np.all(np.isfinite(gc))


def test_label_out_of_range():
    f, _, bank = _instance(0)
    with pytest.raises(IndexError):
        aaml_loss(f, np.full(8, 4), bank)


def test_config_validation():
    with pytest.raises(ValueError):
        AamlConfig(s=0.0)
    with pytest.raises(ValueError):
        AamlConfig(m=math.pi)


def test_normalize_centers():
    bank = normalize_centers(CenterBank(np.array([[3.0, 4.0], [0.0, 2.0]])))
    np.testing.assert_array_equal(bank.centers[0], [0.6, 0.8])
    unit = init_centers(5, 7, seed=1)
    before = unit.centers.copy()
    np.testing.assert_allclose(normalize_centers(unit).centers, before, atol=1e-12)
    once = normalize_centers(CenterBank(np.random.default_rng(2).standard_normal((4, 3)))).centers.copy()
    twice = normalize_centers(CenterBank(once.copy())).centers
    np.testing.assert_allclose(twice, once, atol=1e-15)


def test_normalize_rejects_zero_row():
    with pytest.raises(DegenerateInputError):
        normalize_centers(CenterBank(np.array([[1.0, 0.0], [0.0, 0.0]])))
