import numpy as np
import pytest
from scipy import ndimage as ndi

from wda.data import STRUCT8, DomainSample, SynthConfig, synth_domain_pair
from wda.sar import SARConfig, edge_stopping_map, refine_sample, refine_source_mask

H = W = 96
RR, CC = np.mgrid[0:H, 0:W]
D = np.hypot(RR - 48, CC - 48)


def _boundary(m):
    return m & ~ndi.binary_erosion(m)


def _ncomp(m):
    return ndi.label(m, structure=STRUCT8)[1]


def test_edge_map_range():
    g = edge_stopping_map(np.where(D <= 20, 0.2, 0.7))
    assert g.max() <= 1.0 and g.min() > 0
    assert g[48, 48] == pytest.approx(1.0)
    assert g[48, 68] < 0.5  # on the step edge


def test_mask_on_sharp_edge_is_stable():
    img = np.where(D <= 20, 0.2, 0.7)
    m = D <= 20
    out = refine_source_mask(img, m).astype(bool)
    assert (out & m).sum() / (out | m).sum() >= 0.95


def test_edgeless_image_stays_in_band():
    cfg = SARConfig(band_px=4)
    m = (D <= 15)
    out = refine_source_mask(np.full((H, W), 0.5), m, cfg).astype(bool)
    dist_out = ndi.distance_transform_edt(~m)
    dist_in = ndi.distance_transform_edt(m)
    assert dist_out[out].max(initial=0) <= cfg.band_px
    assert dist_in[m & ~out].max(initial=0) <= cfg.band_px + 1


def test_ring_phantom_moves_toward_edge():
    # dark membrane ring at radius 18..20, mask annotated 3 px inside the outer edge
    img = np.where(D <= 18, 0.45, 0.7)
    img = np.where((D > 18) & (D <= 20), 0.15, img)
    m = D <= 17
    out = refine_source_mask(img, m).astype(bool)
    before = np.abs(D[_boundary(m)] - 20).mean()
    after = np.abs(D[_boundary(out)] - 20).mean()
    assert after < before


def test_component_count_and_idempotence():
    src, _, _ = synth_domain_pair(SynthConfig(n_source=3, n_target_train=1, n_target_test=1), 0)
    for s in src:
        out = refine_source_mask(s.image, s.mask)
        assert _ncomp(out) == _ncomp(s.mask)
        again = refine_source_mask(s.image, out)
        assert (again != out).mean() < 0.01


def test_empty_mask():
    assert not refine_source_mask(np.random.default_rng(0).random((32, 32)), np.zeros((32, 32))).any()


def test_shape_and_domain_checks():
    with pytest.raises(ValueError):
        refine_source_mask(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        SARConfig(band_px=-1)
    tgt = DomainSample(np.zeros((8, 8)), mask=np.zeros((8, 8)), domain="target")
    with pytest.raises(ValueError):
        refine_sample(tgt)
    with pytest.raises(ValueError):
        refine_sample(DomainSample(np.zeros((8, 8))))


def test_touching_neighbours_not_merged():
    m = np.zeros((H, W), np.uint8)
    m[20:40, 20:40] = 1
    m[20:40, 42:62] = 1  # two squares two pixels apart
    img = np.full((H, W), 0.5)
    img[m == 1] = 0.3
    out = refine_source_mask(img, m, SARConfig(balloon=1.0))
    assert _ncomp(out) == 2
