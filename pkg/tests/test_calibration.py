import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgeforest.calibration import (
    CalibrationModel,
    apply_calibration,
    fit_beta,
    reliability,
)


# ----------------------------------------------------------------------
# reliability
# ----------------------------------------------------------------------

def test_reliability_identity_for_calibrated_scores():
    rng = np.random.default_rng(0)
    s = rng.uniform(0, 1, size=60_000)
    y = (rng.uniform(size=s.shape) < s).astype(float)
    curve = reliability(s, y, eps=0.05)
    # simulation oracle: each bin mean within 2 standard errors of its center
    ok = np.abs(curve.empirical - curve.centers) <= 2 * np.maximum(curve.stderr, 1e-3)
    assert ok.mean() >= 0.9


def test_reliability_single_bin_cases():
    c = reliability(np.full(50, 0.999), np.ones(50), eps=0.025)
    assert len(c.centers) == 1
    assert c.empirical[0] == 1.0
    # eps covering the whole range -> one bin equal to global accuracy
    s = np.array([0.1, 0.4, 0.9, 0.3])
    y = np.array([1.0, 0.0, 1.0, 1.0])
    c = reliability(s, y, eps=0.5)
    assert len(c.centers) == 1
    assert c.empirical[0] == pytest.approx(y.mean())


def test_reliability_soft_labels_and_table():
    s = np.array([0.2, 0.21, 0.8])
    y = np.array([0.5, 0.25, 1.0])
    c = reliability(s, y, eps=0.025)
    assert c.empirical[0] == pytest.approx(0.375)
    text = c.as_table()
    assert text.startswith("score\t")
    assert len(text.strip().splitlines()) == 1 + len(c.centers)


def test_reliability_rejects_empty():
    with pytest.raises(ValueError):
        reliability(np.array([]), np.array([]))


# ----------------------------------------------------------------------
# fit_beta
# ----------------------------------------------------------------------

def test_fit_beta_exact_recovery_noiseless():
    rng = np.random.default_rng(1)
    w = rng.uniform(0.01, 1.0, size=20_000)
    targets = 1.0 - np.exp(-8.0 * w)
    assert fit_beta(w, targets) == pytest.approx(8.0, abs=1e-3)


def test_fit_beta_bernoulli_recovery():
    rng = np.random.default_rng(2)
    w = rng.uniform(0.0, 1.0, size=100_000)
    y = (rng.uniform(size=w.shape) < 1.0 - np.exp(-8.0 * w)).astype(float)
    beta = fit_beta(w, y)
    assert 7.5 <= beta <= 8.5


def test_fit_beta_consistency_improves_with_samples():
    rng = np.random.default_rng(3)
    errs = []
    for n in (1_000, 100_000):
        w = rng.uniform(0, 1, size=n)
        y = (rng.uniform(size=n) < 1.0 - np.exp(-6.0 * w)).astype(float)
        errs.append(abs(fit_beta(w, y) - 6.0))
    assert errs[1] < errs[0]


def test_fit_beta_all_zero_scores_error():
    with pytest.raises(ValueError):
        fit_beta(np.zeros(10), np.ones(10))


# ----------------------------------------------------------------------
# apply
# ----------------------------------------------------------------------

def test_apply_zero_maps_to_zero():
    m = CalibrationModel(beta=8.0)
    w = np.zeros(121, dtype=np.float32)
    assert np.array_equal(apply_calibration(m, w), w)


def test_apply_closed_form_value():
    m = CalibrationModel(beta=8.0)
    w = np.zeros(5, dtype=np.float32)
    w[2] = 0.25
    got = apply_calibration(m, w)
    assert got[2] == pytest.approx(1.0 - np.exp(-2.0), abs=1e-6)


def test_fast_mode_min_clamp():
    m = CalibrationModel(mode="fast_approx")
    w = np.array([0.0, 0.3, 1.2, 0.9])
    got = apply_calibration(m, w)
    assert got[1] == pytest.approx(0.3)
    assert got[2] == pytest.approx(1.0)


def test_background_entry_passes_through():
    m = CalibrationModel(beta=10.0)
    w = np.full(4, 0.5, dtype=np.float32)
    got = apply_calibration(m, w)
    assert got[0] == pytest.approx(0.5)
    assert (got[1:] > 0.99).all()


@settings(max_examples=200, deadline=None)
@given(
    beta=st.floats(0.5, 50),
    a=st.floats(0, 1),
    b=st.floats(0, 1),
)
def test_apply_strictly_monotone(beta, a, b):
    m = CalibrationModel(beta=beta)
    va = m.map_scores(np.array([a]))[0]
    vb = m.map_scores(np.array([b]))[0]
    if a == b:
        assert va == vb
    else:
        if a > b:
            a, b, va, vb = b, a, vb, va
        assert va <= vb
        # strict unless the exponential saturates below float resolution
        if np.exp(-beta * a) - np.exp(-beta * b) > 1e-14:
            assert va < vb


def test_argmax_invariant_under_calibration():
    rng = np.random.default_rng(4)
    w = rng.dirichlet(np.ones(121), size=30).astype(np.float32)
    cal = apply_calibration(CalibrationModel(beta=7.3), w)
    assert np.array_equal(w[:, 1:].argmax(axis=1), cal[:, 1:].argmax(axis=1))


def test_volume_shape_passthrough():
    rng = np.random.default_rng(5)
    vol = rng.uniform(size=(6, 7, 9)).astype(np.float32)
    out = apply_calibration(CalibrationModel(beta=2.0), vol)
    assert out.shape == vol.shape
    assert np.array_equal(out[..., 0], vol[..., 0])
