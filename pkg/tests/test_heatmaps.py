import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wda.heatmaps import PEAK_FLOOR, build_weight_maps, extract_peaks, render_density


def _density_oracle(points, H, W, sigma):
    # independent reference: a full 2D kernel per point, cut to the 4 sigma box, scaled to unit mass
    out = np.zeros((H, W))
    rad = int(math.ceil(4 * sigma))
    rr, cc = np.mgrid[0:H, 0:W]
    for r, c in points:
        k = np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * sigma ** 2))
        k[(np.abs(rr - r) > rad) | (np.abs(cc - c) > rad)] = 0
        out += k / k.sum()
    return out


def test_single_interior_point_unit_mass():
    assert render_density([(64, 64)], 128, 128, 10).count == pytest.approx(1.0, abs=1e-3)


def test_additivity():
    pts = [(10, 10), (50, 70), (100, 20), (64, 64), (120, 127)]
    assert render_density(pts, 128, 128, 10).count == pytest.approx(len(pts), abs=len(pts) * 1e-3)


def test_corner_point_renormalized():
    d = render_density([(0, 0)], 128, 128, 10)
    assert d.count == pytest.approx(1.0, abs=1e-3)
    assert d.values[0, 0] == d.values.max()


def test_empty_points_zero_map():
    assert not render_density([], 16, 16, 2).values.any()


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        render_density([(1, 1)], 8, 8, 0)


def density_mass_trials(n=200, seed=0):
    """Worst |sum - count| / max(1, count) over random layouts (all sizes, borders included)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        H, W = rng.integers(8, 160, 2)
        k = int(rng.integers(0, 40))
        pts = list(zip(rng.integers(0, H, k), rng.integers(0, W, k)))
        sigma = float(rng.choice([2.0, 10.0, rng.uniform(0.5, 15)]))
        err = abs(render_density(pts, H, W, sigma).count - k) / max(1, k)
        worst = max(worst, err)
    return worst


def test_density_mass_conservation_random():
    assert density_mass_trials() <= 1e-3


def test_map_matches_oracle():
    pts = [(0, 5), (30, 30), (31, 30), (59, 49)]
    got = render_density(pts, 60, 50, 10).values
    assert np.abs(got - _density_oracle(pts, 60, 50, 10)).max() < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 31)), max_size=10),
       st.tuples(st.integers(0, 31), st.integers(0, 31)))
def test_adding_point_never_decreases(pts, extra):
    a = render_density(pts, 32, 32, 3).values
    b = render_density(pts + [extra], 32, 32, 3).values
    assert (b >= a - 1e-15).all()


# ---------------------------------------------------------------- weights

def test_weight_map_rules():
    fg = np.full((100, 100), 0.5)
    fg[0, 0] = 0.05
    wm = build_weight_maps([(80, 80)], fg, rho=0.1)
    assert wm.w[0, 0] == 1  # confident background
    assert wm.w[5, 20] == 0  # uncertain, beyond the 4 sigma1 support of the point
    assert wm.w[80, 80] == 1  # on a labeled point
    assert wm.beta.sum() == pytest.approx(1.0, abs=1e-3)


def test_weight_map_accepts_two_channel_prob():
    fg = np.full((16, 16), 0.5)
    two = np.stack([1 - fg, fg])
    a = build_weight_maps([(3, 3)], fg)
    b = build_weight_maps([(3, 3)], two)
    assert (a.w == b.w).all()
    with pytest.raises(ValueError):
        build_weight_maps([], np.zeros((3, 4, 4)))


def test_weight_map_rho_range():
    with pytest.raises(ValueError):
        build_weight_maps([], np.zeros((4, 4)), rho=1.0)


def test_w_support_covers_heatmap_and_idempotent():
    rng = np.random.default_rng(1)
    fg = rng.random((48, 48))
    pts = [(10, 10), (40, 20)]
    wm = build_weight_maps(pts, fg, 0.1)
    hbar = render_density(pts, 48, 48, 10).values
    assert (wm.w[hbar > 0] == 1).all()
    again = build_weight_maps(pts, fg, 0.1)
    assert (again.w == wm.w).all()


# ------------------------------------------------------------------ peaks

def test_single_point_single_peak():
    ps = extract_peaks(render_density([(20, 33)], 64, 64, 2), nms_radius=4, keep_fraction=1.0)
    assert len(ps) == 1
    r, c, s = ps.peaks[0]
    assert abs(r - 20) <= 1 and abs(c - 33) <= 1 and s > 0


def test_two_far_points_two_peaks():
    d = render_density([(40, 20), (40, 70)], 96, 96, 10)
    assert len(extract_peaks(d, nms_radius=8, keep_fraction=1.0)) == 2


def test_two_close_points_merge():
    d = render_density([(40, 40), (40, 43)], 96, 96, 10)
    assert len(extract_peaks(d, nms_radius=8, keep_fraction=1.0)) == 1


def test_all_zero_map_no_peaks():
    assert len(extract_peaks(np.zeros((16, 16)))) == 0


def test_peak_parameter_checks():
    with pytest.raises(ValueError):
        extract_peaks(np.zeros((4, 4)), keep_fraction=0)
    with pytest.raises(ValueError):
        extract_peaks(np.zeros((4, 4)), nms_radius=0.5)


def test_keep_fraction_ceil():
    pts = [(10, 10 + 15 * i) for i in range(5)]
    d = render_density(pts, 32, 96, 2)
    assert len(extract_peaks(d, 4, 0.8)) == 4  # ceil(0.8 * 5)
    assert len(extract_peaks(d, 4, 0.5)) == 3


def test_peak_recovery_random_layouts():
    rng = np.random.default_rng(5)
    sigma = 2.0
    for _ in range(12):
        pts = []
        while len(pts) < 6:
            p = tuple(int(v) for v in rng.integers(4, 124, 2))
            if all(math.dist(p, q) > 6 * sigma for q in pts):
                pts.append(p)
        ps = extract_peaks(render_density(pts, 128, 128, sigma), nms_radius=2 * sigma, keep_fraction=1.0)
        assert len(ps) == len(pts)
        for p in pts:
            assert min(math.dist(p, q) for q in ps.coords) <= 1.0


def test_peakset_invariants():
    rng = np.random.default_rng(6)
    h = rng.random((40, 40))
    ps = extract_peaks(h, nms_radius=3, keep_fraction=1.0)
    for i, (r, c, s) in enumerate(ps.peaks):
        assert s > PEAK_FLOOR
        for r2, c2, _ in ps.peaks[i + 1:]:
            assert math.dist((r, c), (r2, c2)) > 3
