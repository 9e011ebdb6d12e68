import numpy as np
import pytest
import torch
from PIL import Image

from conftest import tiny_cfg
from wda import train as T
from wda.data import ConfigError, DomainSample
from wda.evaluate import (BLUE, GREEN, RED, evaluate, ground_truth, overlay, report_json, sliding_predict,
                          true_count)
from wda.networks import BackboneConfig, build_g1, predict_g1


def test_overlay_palette():
    G = np.zeros((40, 40), np.uint8)
    G[2:10, 2:10] = 1  # matched
    G[20:28, 20:28] = 1  # missed
    S = np.zeros((40, 40), np.uint8)
    S[2:10, 3:10] = 1
    S[30:36, 2:8] = 1  # spurious
    rgb = overlay(S, G)
    colours = {tuple(int(v) for v in c) for c in rgb.reshape(-1, 3)}
    assert colours == {GREEN, RED, BLUE, (0, 0, 0)}
    assert tuple(rgb[5, 5]) == GREEN and tuple(rgb[32, 4]) == RED and tuple(rgb[24, 24]) == BLUE


def test_sliding_window_matches_single_pass():
    torch.manual_seed(0)
    g = build_g1(BackboneConfig(depth=3, base_channels=8)).eval()
    img = np.random.default_rng(0).random((64, 64)).astype(np.float32)
    whole = sliding_predict(g, img, (128, 128), 64)
    ref = predict_g1(g, torch.from_numpy(img)[None, None])
    assert np.allclose(whole.fg_prob, ref.seg_prob[0, 1].numpy(), atol=1e-6)
    tiled = sliding_predict(g, img, (32, 32), 16)
    assert tiled.fg_prob.shape == (64, 64) and np.isfinite(tiled.heat).all()


def test_ground_truth_required():
    s = DomainSample(np.zeros((8, 8)), points=[(1, 1)])
    with pytest.raises(ConfigError):
        ground_truth(s)
    m = np.zeros((8, 8))
    m[1:3, 1:3] = 1
    m[5:7, 5:7] = 1
    assert true_count(DomainSample(np.zeros((8, 8)), truth_mask=m)) == 2


def test_evaluate_twice_identical_and_files(tmp_path, tiny_data, tiny_ckpts):
    cfg, src, _ = tiny_ckpts
    cfg = cfg.replace(**{"eval.overlays": True})
    g1 = T.load_g1(src)
    r1, c1 = evaluate(g1, tiny_data[2], cfg, tmp_path / "a", "test")
    r2, c2 = evaluate(T.load_g1(src), tiny_data[2], cfg, tmp_path / "b", "test")
    assert report_json(r1, cfg, c1) == report_json(r2, cfg, c2)
    assert (tmp_path / "a" / "test.json").read_bytes() == (tmp_path / "b" / "test.json").read_bytes()
    assert (tmp_path / "a" / "test.csv").exists()
    png = next((tmp_path / "a" / "test_overlays").glob("*.png"))
    colours = {tuple(c) for c in np.array(Image.open(png)).reshape(-1, 3)}
    assert colours <= {GREEN, RED, BLUE, (0, 0, 0)}


def test_evaluate_missing_truth(tiny_ckpts):
    cfg, src, _ = tiny_ckpts
    with pytest.raises(ConfigError):
        evaluate(T.load_g1(src), [DomainSample(np.zeros((64, 64)), points=[])], cfg)
