import numpy as np
import pytest
import torch

from wda import losses as L
from wda.heatmaps import render_density
from wda.networks import (BackboneConfig, BuildError, CheckpointMismatch, DiscriminatorConfig, build_discriminator,
                          build_g1, build_g2, integrate, load_checkpoint, param_count, predict_density_multiscale,
                          predict_g1, save_checkpoint)

SMALL = BackboneConfig(depth=3, base_channels=8)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.mark.parametrize("block", ["hdd-lite", "plain-conv"])
def test_g1_shapes(block):
    g = build_g1(BackboneConfig(depth=3, base_channels=8, block=block)).eval()
    out = g(torch.rand(2, 1, 128, 128))
    assert out.seg_prob.shape == (2, 2, 128, 128)
    assert out.det_heat.shape == (2, 1, 128, 128)
    assert out.count_hat.shape == (2,)
    assert torch.allclose(out.seg_prob.sum(1), torch.ones(2, 128, 128), atol=1e-5)
    assert (out.det_heat >= 0).all()
    assert torch.allclose(out.count_hat, out.count_map.sum(dim=(1, 2, 3)))


def test_hdd_smaller_than_plain():
    for depth in (2, 3, 4):
        h = param_count(build_g1(BackboneConfig(depth=depth, base_channels=16, block="hdd-lite")))
        p = param_count(build_g1(BackboneConfig(depth=depth, base_channels=16, block="plain-conv")))
        assert h < p


def test_zero_input_finite():
    g = build_g1(SMALL).eval()
    out = g(torch.zeros(2, 1, 64, 64))
    for t in out:
        assert torch.isfinite(t).all()
    # outputs depend only on biases and zero padding, so both images agree
    assert torch.equal(out.seg_prob[0], out.seg_prob[1])


def test_bad_configs():
    with pytest.raises(BuildError):
        build_g1(BackboneConfig(block="resnet"))
    with pytest.raises(BuildError):
        build_g1(BackboneConfig(depth=0))
    with pytest.raises(BuildError):
        build_g1(BackboneConfig(base_channels=7))


def test_padding_crops_back():
    g = build_g1(SMALL).eval()
    out = predict_g1(g, torch.rand(1, 1, 50, 77))
    assert out.seg_prob.shape == (1, 2, 50, 77)
    assert out.det_heat.shape == (1, 1, 50, 77)


def test_g1_eval_deterministic():
    g = build_g1(SMALL).eval()
    x = torch.rand(1, 1, 64, 64)
    a, b = g(x), g(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_trunk_gradient_flow():
    g = build_g1(SMALL).train()
    rng = np.random.default_rng(0)
    x = torch.rand(2, 1, 64, 64)
    m = torch.as_tensor(rng.random((2, 64, 64)) < 0.3).float()
    y = torch.stack([1 - m, m], 1)
    h = torch.as_tensor(render_density([(20, 20), (40, 50)], 64, 64, 2).values, dtype=torch.float32)
    h = h.expand(2, 1, 64, 64) * g.cfg.heat_scale
    out = g(x)
    loss = L.seg_loss(out.seg_prob, y) + L.detection_loss(out.det_heat * g.cfg.heat_scale, h, torch.ones_like(h))
    loss.backward()
    for name, p in g.trunk.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


# ---------------------------------------------------------------------- G2

def test_g2_init_copies_trunk():
    g1 = build_g1(SMALL)
    g2 = build_g2(SMALL, init_from=g1)
    s1, s2 = g1.state_dict(), g2.state_dict()
    for k, v in s2.items():
        if k.startswith("trunk."):
            assert torch.equal(v, s1[k])
    # the density head starts from the detection head of the same layout
    assert torch.equal(s2["density_head.2.weight"], s1["det_head.2.weight"])


def test_g2_init_mismatch_reported(tmp_path):
    g1 = build_g1(BackboneConfig(depth=3, base_channels=16))
    with pytest.raises(CheckpointMismatch, match="trunk"):
        build_g2(SMALL, init_from=g1)
    with pytest.raises(CheckpointMismatch, match="missing"):
        build_g2(SMALL, init_from={"seg_head.1.weight": torch.zeros(2, 8, 1, 1)})


def test_integration_uniform():
    v, H, W = 0.37, 30, 41
    d = torch.full((1, 1, H, W), v, dtype=torch.float64)
    assert integrate(d).item() == pytest.approx(v * H * W, abs=1e-4)


def test_multiscale_three_predictions():
    g2 = build_g2(SMALL).eval()
    dens, counts = predict_density_multiscale(g2, torch.rand(2, 1, 64, 64), ((32, 32), (48, 48), (64, 64)))
    assert counts.shape == (3, 2)
    assert dens.shape == (2, 1, 64, 64)
    assert torch.allclose(integrate(dens), counts.mean(0), rtol=1e-4)


# ------------------------------------------------------------ discriminator

def test_discriminator_shape_and_determinism():
    d = build_discriminator().eval()
    p = torch.softmax(torch.randn(1, 2, 128, 128), 1)
    out = d(p)
    assert out.shape == (1, 1, 4, 4)
    assert torch.isfinite(out).all()
    assert torch.equal(out, d(p))
    convs = [m for m in d.modules() if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == DiscriminatorConfig().channels
    assert sum(isinstance(m, torch.nn.LeakyReLU) for m in d.modules()) == 4


# -------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    g = build_g1(SMALL)
    p = save_checkpoint(tmp_path / "m.pt", {"g1": g}, SMALL, config={"a": 1})
    ck = load_checkpoint(p)
    g2 = build_g1(BackboneConfig(**ck["backbone"]))
    g2.load_state_dict(ck["models"]["g1"])
    assert all(torch.equal(a, b) for a, b in zip(g.state_dict().values(), g2.state_dict().values()))
    torch.save({"nope": 1}, tmp_path / "bad.pt")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "bad.pt")
