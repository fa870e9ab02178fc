import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgeforest.label_space import (
    LabelSpaceConfig,
    bin_params,
    decode,
    decode_bins,
    encode,
    labels_for_orientation,
    orientation_bin_centers,
)

CFG = LabelSpaceConfig()


def test_defaults():
    assert (CFG.patch_size, CFG.n_dist_bins, CFG.n_orient_bins) == (16, 15, 8)
    assert CFG.n_labels == 120
    assert CFG.n_classes == 121


@pytest.mark.parametrize(
    "bad", [dict(patch_size=3), dict(patch_size=6, n_dist_bins=4), dict(n_orient_bins=1)]
)
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        LabelSpaceConfig(**bad)


def test_orientation_centers_vertical_and_horizontal():
    centers = np.degrees(orientation_bin_centers(CFG))
    assert centers[0] == pytest.approx(90.0)  # bin 1 in 1-based counting
    assert centers[4] == pytest.approx(0.0)  # bin 5


def test_bin_params_named_cases():
    # edge through the center, vertical
    k = bin_params(0.0, math.pi / 2, CFG)
    assert decode_bins(k, CFG) == (7, 0)
    # horizontal center edge
    k = bin_params(0.0, 0.0, CFG)
    assert decode_bins(k, CFG)[1] == 4
    # nearest-center rounding for d
    k = bin_params(7.2, math.radians(45), CFG)
    assert decode_bins(k, CFG)[0] == 14


def test_bin_params_rejects_background_distance():
    with pytest.raises(ValueError):
        bin_params(8.0, 0.0, CFG)
    with pytest.raises(ValueError):
        bin_params(-9.5, 1.0, CFG)


def test_moebius_identification_example():
    assert bin_params(3.4, math.radians(91), CFG) == bin_params(-3.4, math.radians(-89), CFG)


@settings(max_examples=1000, deadline=None)
@given(
    d=st.floats(-7.999, 7.999),
    eps=st.floats(-0.2, 0.2),
    sign=st.sampled_from([-1.0, 1.0]),
)
def test_moebius_seam_property(d, eps, sign):
    # theta near +-pi/2: wrapped and unwrapped calls must agree
    theta = sign * (math.pi / 2) + eps
    assert bin_params(d, theta, CFG) == bin_params(-d, theta - math.pi, CFG)


def test_encode_decode_bijection_exhaustive():
    seen = set()
    for k in range(1, CFG.n_labels + 1):
        d, th = decode(k, CFG)
        k2 = bin_params(d, th, CFG)
        assert k2 == k
        seen.add(k)
    assert seen == set(range(1, 121))


def test_decode_rejects_background():
    with pytest.raises(ValueError):
        decode(0, CFG)


def test_decode_named_cases():
    assert decode(encode(7, 0, CFG), CFG) == pytest.approx((0.0, math.pi / 2))
    # enumerate bin centers: (d_bin=0, theta_bin=4) -> (-7, 0 deg)
    d, th = decode(encode(0, 4, CFG), CFG)
    assert (d, th) == pytest.approx((-7.0, 0.0))


def test_boundary_theta_goes_to_lower_bin():
    # halfway between bin 0 (90 deg) and bin 1 (67.5 deg) is 78.75 deg
    k = bin_params(0.0, math.radians(78.75), CFG)
    assert decode_bins(k, CFG)[1] == 0


def test_labels_for_orientation_partition():
    all_labels = []
    for j in range(CFG.n_orient_bins):
        ls = labels_for_orientation(j, CFG)
        assert len(ls) == CFG.n_dist_bins
        all_labels.extend(ls)
    assert sorted(all_labels) == list(range(1, CFG.n_labels + 1))


def test_labels_for_orientation_small_config():
    small = LabelSpaceConfig(patch_size=8, n_dist_bins=5, n_orient_bins=4)
    assert len(labels_for_orientation(3, small)) == 5
    with pytest.raises(ValueError):
        labels_for_orientation(4, small)


def test_rounding_half_away_from_zero():
    assert decode(bin_params(0.5, math.pi / 2, CFG), CFG)[0] == 1.0
    assert decode(bin_params(-0.5, math.pi / 2, CFG), CFG)[0] == -1.0


def test_derived_nearest_center_oracle():
    # brute-force nearest center over all 15 centers, random draws
    rng = np.random.default_rng(0)
    centers = np.arange(-7, 8)
    for _ in range(500):
        d = float(rng.uniform(-7.999, 7.999))
        k = bin_params(d, math.pi / 2, CFG)
        got = decode(k, CFG)[0]
        best = centers[np.argmin(np.abs(centers - d))]
        # ties (x.5) round away from zero; otherwise match the oracle
        if abs(abs(d - math.floor(d)) - 0.5) > 1e-9:
            assert got == best
