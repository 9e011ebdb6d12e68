"""Multi-head segmentation/detection/counting network, source counter and discriminator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CKPT_FORMAT = "wda-checkpoint"
CKPT_VERSION = 1
BLOCKS = ("hdd-lite", "plain-conv")


class BuildError(ValueError):
    pass


class CheckpointMismatch(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    depth: int = 4
    base_channels: int = 16
    block: str = "hdd-lite"
    in_channels: int = 1
    # detection maps are regressed in units where a sigma1 Gaussian peaks at 1
    heat_scale: float = 2 * math.pi * 10.0 ** 2

    def validate(self):
        if self.block not in BLOCKS:
            raise BuildError(f"unknown block {self.block!r}; expected one of {BLOCKS}")
        if self.depth < 1 or self.base_channels < 2 or self.base_channels % 2:
            raise BuildError(f"bad depth/channels: depth={self.depth}, base={self.base_channels}")
        if self.heat_scale <= 0:
            raise BuildError("heat_scale must be positive")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth


@dataclass
class DiscriminatorConfig:
    channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1])
    in_channels: int = 2
    kernel: int = 4
    stride: int = 2
    slope: float = 0.2


class HDDLite(nn.Module):
    """Factorized (1x3, 3x1) branch and dilated depthwise branch, fused 1x1 with a residual."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        half = cout // 2
        self.proj = nn.Conv2d(cin, cout, 1, bias=False) if cin != cout else nn.Identity()
        self.factorized = nn.Sequential(
            nn.Conv2d(cout, half, (1, 3), padding=(0, 1)),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, half, (3, 1), padding=(1, 0)),
        )
        self.dilated = nn.Sequential(
            nn.Conv2d(cout, cout, 3, padding=2, dilation=2, groups=cout),
            nn.Conv2d(cout, cout - half, 1),
        )
        self.fuse = nn.Conv2d(cout, cout, 1)
        self.norm = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = self.proj(x)
        y = self.fuse(torch.cat([self.factorized(x), self.dilated(x)], dim=1))
        return F.relu(self.norm(x + y))


class PlainConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


def make_block(kind: str, cin: int, cout: int) -> nn.Module:
    return HDDLite(cin, cout) if kind == "hdd-lite" else PlainConv(cin, cout)


class Trunk(nn.Module):
    """U-shaped encoder-decoder shared by the heads; output has base_channels at input resolution."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.stem = make_block(cfg.block, cfg.in_channels, ch[0])
        self.down = nn.ModuleList(make_block(cfg.block, ch[i], ch[i + 1]) for i in range(cfg.depth))
        self.up = nn.ModuleList(
            make_block(cfg.block, ch[i + 1] + ch[i], ch[i]) for i in reversed(range(cfg.depth))
        )
        self.out_channels = ch[0]

    def forward(self, x):
        x = self.stem(x)
        skips = [x]
        for blk in self.down:
            x = blk(F.max_pool2d(x, 2))
            skips.append(x)
        skips.pop()
        for blk in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = blk(torch.cat([x, skip], dim=1))
        return x


class G1Outputs(NamedTuple):
    seg_logits: torch.Tensor
    seg_prob: torch.Tensor
    det_heat: torch.Tensor  # B x 1 x H x W, density units
    count_map: torch.Tensor
    count_hat: torch.Tensor  # B


class G1(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.base_channels
        self.trunk = Trunk(cfg)
        self.seg_head = nn.Sequential(make_block(cfg.block, c, c), nn.Conv2d(c, 2, 1))
        self.det_head = nn.Sequential(make_block(cfg.block, c, c), make_block(cfg.block, c, c),
                                      nn.Conv2d(c, 1, 1))
        self.count_head = nn.Sequential(make_block(cfg.block, 1, c), nn.Conv2d(c, 1, 1))

    def forward(self, x) -> G1Outputs:
        s = self.cfg.heat_scale
        feats = self.trunk(x)
        logits = self.seg_head(feats)
        heat = F.softplus(self.det_head(feats)) / s
        cmap = F.softplus(self.count_head(heat * s)) / s
        return G1Outputs(logits, torch.softmax(logits, dim=1), heat, cmap, cmap.sum(dim=(1, 2, 3)))


class G2(nn.Module):
    """Source-trained counter: trunk, single-channel density output and an integration layer."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.base_channels
        self.trunk = Trunk(cfg)
        # same layout as the G1 detection head so it can start from the source detector
        self.density_head = nn.Sequential(make_block(cfg.block, c, c), make_block(cfg.block, c, c),
                                          nn.Conv2d(c, 1, 1))

    def density(self, x):
        return F.softplus(self.density_head(self.trunk(x))) / self.cfg.heat_scale

    def forward(self, x):
        return integrate(self.density(x))


def integrate(density: torch.Tensor) -> torch.Tensor:
    """Integration layer: total mass per image (unit pixel area)."""
    return density.sum(dim=tuple(range(1, density.ndim)))


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        layers: list[nn.Module] = []
        cin = cfg.in_channels
        for i, cout in enumerate(cfg.channels):
            layers.append(nn.Conv2d(cin, cout, cfg.kernel, stride=cfg.stride, padding=1))
            if i < len(cfg.channels) - 1:
                layers.append(nn.LeakyReLU(cfg.slope, inplace=True))
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, p):
        return self.net(p)


def build_g1(cfg: BackboneConfig | None = None) -> G1:
    return G1(cfg or BackboneConfig())


def build_discriminator(cfg: DiscriminatorConfig | None = None) -> Discriminator:
    return Discriminator(cfg)


def build_g2(cfg: BackboneConfig | None = None, init_from=None) -> G2:
    """Build the counter, copying every trunk tensor from ``init_from`` when given.

    ``init_from`` may be a G1/G2 module, a state dict or a checkpoint path. Any
    missing or differently shaped trunk tensor raises CheckpointMismatch. The
    density head is copied as well when the source holds a detection head (or
    a density head) of the same shape; otherwise it keeps its fresh init.
    """
    g2 = G2(cfg or BackboneConfig())
    if init_from is None:
        return g2
    if isinstance(init_from, nn.Module):
        state = init_from.state_dict()
    elif isinstance(init_from, (str, Path)):
        state = load_checkpoint(init_from)["state"]
    else:
        state = init_from
    own = g2.state_dict()
    trunk_keys = [k for k in own if k.startswith("trunk.")]
    problems = []
    for k in trunk_keys:
        if k not in state:
            problems.append(f"missing {k}")
        elif state[k].shape != own[k].shape:
            problems.append(f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(own[k].shape)}")
    if problems:
        raise CheckpointMismatch("trunk mismatch:\n  " + "\n  ".join(problems))
    head = {}
    for k in own:
        if k.startswith("density_head."):
            for src in (k, "det_head." + k[len("density_head."):]):
                if src in state and state[src].shape == own[k].shape:
                    head[k] = state[src]
                    break
    heads_ok = len(head) == sum(k.startswith("density_head.") for k in own)
    with torch.no_grad():
        for k in trunk_keys:
            own[k].copy_(state[k])
        if heads_ok:
            for k, v in head.items():
                own[k].copy_(v)
    return g2


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def pad_to_multiple(x: torch.Tensor, m: int):
    """Reflect-pad the last two dims up to a multiple of m; returns (padded, (h, w))."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


@torch.no_grad()
def predict_g1(model: G1, x: torch.Tensor) -> G1Outputs:
    """Eval-mode forward at arbitrary H, W (padded, then cropped back)."""
    xp, (h, w) = pad_to_multiple(x, model.cfg.multiple)
    out = model(xp)
    heat = out.det_heat[..., :h, :w]
    cmap = out.count_map[..., :h, :w]
    logits = out.seg_logits[..., :h, :w]
    return G1Outputs(logits, torch.softmax(logits, dim=1), heat, cmap, cmap.sum(dim=(1, 2, 3)))


def window_starts(n: int, tile: int, stride: int) -> list[int]:
    """Tile origins along one axis; the last tile is flush with the border."""
    if n <= tile:
        return [0]
    pos = list(range(0, n - tile + 1, stride))
    if pos[-1] != n - tile:
        pos.append(n - tile)
    return pos


@torch.no_grad()
def predict_density_multiscale(model: G2, x: torch.Tensor, sizes=((64, 64), (96, 96), (128, 128))):
    """Counter density from input windows of several sizes at native resolution.

    For each window size the image is tiled with half-window stride and the
    densities of overlapping tiles are averaged, so every size yields a full
    density map. Returns (mean density over sizes B x 1 x H x W, per-size counts S x B).
    """
    h, w = x.shape[-2:]
    maps, counts = [], []
    for th, tw in sizes:
        th, tw = min(int(th), h), min(int(tw), w)
        acc = x.new_zeros(x.shape[0], 1, h, w)
        hits = x.new_zeros(1, 1, h, w)
        for r0 in window_starts(h, th, max(1, th // 2)):
            for c0 in window_starts(w, tw, max(1, tw // 2)):
                xp, _ = pad_to_multiple(x[..., r0:r0 + th, c0:c0 + tw], model.cfg.multiple)
                acc[..., r0:r0 + th, c0:c0 + tw] += model.density(xp)[..., :th, :tw]
                hits[..., r0:r0 + th, c0:c0 + tw] += 1
        d = acc / hits
        maps.append(d)
        counts.append(integrate(d))
    return torch.stack(maps).mean(0), torch.stack(counts)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, models: dict, backbone: BackboneConfig, config: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "backbone": asdict(backbone),
        "models": {k: m.state_dict() if isinstance(m, nn.Module) else m for k, m in models.items()},
        "config": config or {},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CKPT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a {CKPT_FORMAT} file")
    if ckpt["version"] > CKPT_VERSION:
        raise CheckpointMismatch(f"{path}: checkpoint version {ckpt['version']} is newer than supported")
    # convenience alias used by build_g2
    first = next(iter(ckpt["models"].values()), {})
    ckpt.setdefault("state", ckpt["models"].get("g1", first))
    return ckpt


def backbone_from(ckpt: dict) -> BackboneConfig:
    return BackboneConfig(**ckpt["backbone"])
