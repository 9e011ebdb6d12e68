import numpy as np
import pytest
from scipy import ndimage as ndi

from wda.augment import (AugPolicy, CPAugConfig, CPWindows, GeometricDraw, apply_geometric, apply_photometric,
                         cp_aug, cp_windows, relabel_cut_points)
from wda.data import STRUCT8, ConfigError, DomainSample, SynthConfig, synth_domain_pair


def _sample(hw=(128, 128), points=(), mask=None, seed=0):
    img = np.random.default_rng(seed).random(hw).astype(np.float32)
    return DomainSample(img, mask=mask, points=list(points), domain="target", id=f"s{seed}")


# --------------------------------------------------------------- geometric

def test_hflip_point():
    s = _sample(points=[(10, 3)])
    out = apply_geometric(s, draw=GeometricDraw(flip_h=True))
    assert out.points == [(10, 124)]
    assert (out.image == s.image[:, ::-1]).all()


def test_rot180_twice_identity():
    s = _sample(hw=(40, 60), points=[(1, 2), (39, 59), (17, 30)])
    d = GeometricDraw(k=2)
    back = apply_geometric(apply_geometric(s, draw=d), draw=d)
    assert (back.image == s.image).all()
    assert back.points == s.points


def test_rot90_preserves_components_and_points():
    rng = np.random.default_rng(1)
    m = ndi.binary_opening(rng.random((30, 50)) < 0.5).astype(np.uint8)
    pts = [tuple(int(v) for v in p) for p in np.argwhere(m)[:5]]
    s = _sample(hw=(30, 50), points=pts, mask=m)
    out = apply_geometric(s, draw=GeometricDraw(k=1))
    assert out.shape == (50, 30)
    assert ndi.label(out.mask, STRUCT8)[1] == ndi.label(m, STRUCT8)[1]
    assert all(out.mask[r, c] == 1 for r, c in out.points)


def test_all_draws_keep_points_on_mask():
    rng = np.random.default_rng(2)
    m = (rng.random((20, 33)) < 0.3).astype(np.uint8)
    pts = [tuple(int(v) for v in p) for p in np.argwhere(m)]
    s = _sample(hw=(20, 33), points=pts, mask=m)
    for fv in (False, True):
        for fh in (False, True):
            for k in range(4):
                out = apply_geometric(s, draw=GeometricDraw(fv, fh, k))
                assert all(out.mask[r, c] == 1 for r, c in out.points)
                assert sorted(map(tuple, np.argwhere(out.mask))) == sorted(out.points)


def test_photometric_range_and_determinism():
    img = np.random.default_rng(3).random((32, 32)).astype(np.float32)
    pol = AugPolicy(blur_prob=1.0, noise_sigma_range=(0.0, 0.1))
    a = apply_photometric(img, pol, np.random.default_rng(4))
    b = apply_photometric(img, pol, np.random.default_rng(4))
    assert (a == b).all()
    assert a.min() >= 0 and a.max() <= 1


# ------------------------------------------------------------------ CP-Aug

def test_donor_five_points_to_empty_window():
    a_pts = [(5, 5), (10, 20), (30, 30), (50, 8), (60, 60)]
    b_pts = [(70, 70), (100, 100), (120, 90)]
    a, b = _sample(points=a_pts, seed=1), _sample(points=b_pts, seed=2)
    cfg = CPAugConfig(crop_hw=(64, 64))
    win = cp_windows(a.points, a.shape, b.points, b.shape, cfg)
    assert win.donor == (0, 0)
    out = cp_aug(a, b, cfg)
    assert len(out.points) == len(b_pts) + 5


def test_empty_donor_keeps_points():
    a = _sample(points=[], seed=1)
    b = _sample(points=[(70, 70), (100, 100)], seed=2)
    cfg = CPAugConfig(crop_hw=(32, 32))
    out = cp_aug(a, b, cfg)
    win = cp_windows([], a.shape, b.points, b.shape, cfg)
    assert sorted(out.points) == sorted(b.points)
    rr, rc = win.recipient_slice()
    keep = np.ones(b.shape, bool)
    keep[rr, rc] = False
    assert (out.image[keep] == b.image[keep]).all()
    dr, dc = win.donor_slice()
    assert (out.image[rr, rc] == a.image[dr, dc]).all()


def test_crop_too_large():
    with pytest.raises(ConfigError):
        cp_aug(_sample(hw=(32, 32)), _sample(hw=(64, 64)), CPAugConfig(crop_hw=(64, 64)))


def test_scan_ties_first_in_order():
    cfg = CPAugConfig(crop_hw=(32, 32))
    win = cp_windows([], (64, 64), [], (64, 64), cfg)
    assert win.donor == (0, 0) and win.recipient == (0, 0)


def test_boundary_relabel_inside_crop():
    # component spanning the crop edge, 60% of it outside; annotated 2 px inside the edge
    H = W = 96
    fg = np.zeros((H, W))
    fg[20:30, 54:79] = 0.9  # crop covers cols 0..63, so cols 54..63 (10 of 25) are inside
    win = CPWindows(donor=(0, 0), recipient=(0, 0), hw=(64, 64))
    inside_part = np.zeros((H, W), bool)
    inside_part[20:30, 54:64] = True
    assert (fg[:, 64:] > 0).sum() / (fg > 0).sum() == pytest.approx(0.6)
    (r, c), = relabel_cut_points([(25, 61)], fg, win)
    assert inside_part[r, c]
    # reference: in-crop centroid (24.5, 58.5) rounded half up
    rr, cc = np.nonzero(inside_part)
    assert (r, c) == (int(np.floor(rr.mean() + 0.5)), int(np.floor(cc.mean() + 0.5))) == (25, 59)
    # an unannotated cut instance and an uncut one are untouched
    fg[70:80, 10:20] = 0.9
    assert relabel_cut_points([(75, 15)], fg, win) == [(75, 15)]


def test_cp_deterministic():
    _, tr, _ = synth_domain_pair(SynthConfig(n_source=1, n_target_train=2, n_target_test=1), 0)
    cfg = CPAugConfig(crop_hw=(64, 64))
    x = cp_aug(tr[0], tr[1], cfg, seg_prob_a=tr[0].truth_mask.astype(float))
    y = cp_aug(tr[0], tr[1], cfg, seg_prob_a=tr[0].truth_mask.astype(float))
    assert x.image.tobytes() == y.image.tobytes() and x.points == y.points


def cp_invariant_trials(n=100, seed=0):
    """CP-Aug invariants over random target pairs with a noisy segmentation estimate.

    Returns (all pasted regions bit-identical, no annotation lost outside the window,
    point precision against the withheld truth).
    """
    rng = np.random.default_rng(seed)
    synth = SynthConfig(n_source=1, n_target_train=20, n_target_test=1, ratio=0.5)
    _, tr, _ = synth_domain_pair(synth, seed)
    cfg = CPAugConfig(crop_hw=(64, 64))
    identical, kept, on_truth, total = True, True, 0, 0
    for _ in range(n):
        i, j = rng.choice(len(tr), 2, replace=False)
        a = apply_geometric(tr[i], draw=GeometricDraw.sample(rng, AugPolicy()))
        b = apply_geometric(tr[j], draw=GeometricDraw.sample(rng, AugPolicy()))
        # stand-in for the segmentation head: blurred truth plus noise
        est = np.clip(ndi.gaussian_filter(a.truth_mask.astype(float), 1.5) + rng.normal(0, 0.15, a.shape), 0, 1)
        win = cp_windows(a.points, a.shape, b.points, b.shape, cfg)
        out = cp_aug(a, b, cfg, seg_prob_a=est)
        dr, dc = win.donor_slice()
        rr, rc = win.recipient_slice()
        identical &= out.image[rr, rc].tobytes() == a.image[dr, dc].tobytes()
        outside = [(r, c) for r, c in b.points if not (rr.start <= r < rr.stop and rc.start <= c < rc.stop)]
        kept &= set(outside) <= set(out.points) and len(out.points) >= len(outside)
        for r, c in out.points:
            total += 1
            on_truth += int(out.truth_mask[r, c] == 1)
    return identical, kept, on_truth / max(1, total)


def test_cp_invariants_small():
    identical, kept, precision = cp_invariant_trials(20, seed=1)
    assert identical and kept
    assert precision >= 0.95
