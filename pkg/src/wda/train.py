"""Training phases: source G1, source counter G2, and weakly-supervised adaptation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .augment import (GeometricDraw, _transfer_points, apply_photometric, cp_windows, geometric_array,
                      geometric_points, paste, relabel_cut_points)
from .config import RunConfig
from .data import ConfigError
from .heatmaps import render_density
from .networks import (G1, G2, backbone_from, build_discriminator, build_g1, build_g2, load_checkpoint,
                       predict_density_multiscale, predict_g1, save_checkpoint)
from .pseudo import IGNORE, compute_thresholds, generate_pseudo_labels

log = logging.getLogger(__name__)

PHASE_IDS = {"source": 1, "counter": 2, "adapt": 3}


class TrainingAborted(RuntimeError):
    pass


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def iter_rng(seed: int, phase: str, z: int) -> np.random.Generator:
    # one generator per (run seed, phase, iteration) so resuming never replays RNG state
    return np.random.default_rng([seed, PHASE_IDS[phase], z])


def poly_lr(base: float, z: int, max_iters: int, power: float) -> float:
    return base * (1.0 - min(z, max_iters) / max_iters) ** power


def onehot(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask) != 0
    return np.stack([~m, m]).astype(np.float32)


def pseudo_onehot(idx: np.ndarray) -> np.ndarray:
    return np.stack([idx == 0, idx == 1]).astype(np.float32)


def _num(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _t(x) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def _crop_origin(rng, shape, hw):
    return int(rng.integers(0, shape[0] - hw[0] + 1)), int(rng.integers(0, shape[1] - hw[1] + 1))


def _points_in(points, r0, c0, hw):
    return [(r - r0, c - c0) for r, c in points or [] if r0 <= r < r0 + hw[0] and c0 <= c < c0 + hw[1]]


class JsonlLog:
    def __init__(self, path: Path | None, append: bool = False):
        self.fh = open(path, "a" if append else "w") if path else None

    def write(self, row: dict):
        if self.fh:
            self.fh.write(json.dumps(row) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


# ---------------------------------------------------------------------------
# Batches


@dataclass
class LabeledItem:
    image: np.ndarray
    y: np.ndarray  # 2 x H x W one-hot
    h: np.ndarray  # sigma1 density
    beta: np.ndarray  # sigma2 density


def prepare_labeled(samples, cfg: RunConfig) -> list[LabeledItem]:
    out = []
    for s in samples:
        if s.mask is None:
            raise ConfigError(f"sample {s.id} has no dense mask")
        H, W = s.shape
        pts = s.points if s.points is not None else []
        out.append(LabeledItem(
            s.image, onehot(s.mask),
            render_density(pts, H, W, cfg.losses.sigma1).values.astype(np.float32),
            render_density(pts, H, W, cfg.losses.sigma2).values.astype(np.float32),
        ))
    return out


def labeled_batch(items, cfg: RunConfig, rng: np.random.Generator):
    hw = cfg.optim.patch_hw
    xs, ys, hs, bs = [], [], [], []
    for i in rng.integers(0, len(items), cfg.optim.batch_size):
        it = items[int(i)]
        r0, c0 = _crop_origin(rng, it.image.shape, hw)
        sl = (slice(r0, r0 + hw[0]), slice(c0, c0 + hw[1]))
        stack = np.concatenate([it.image[None][(slice(None),) + sl], it.y[(slice(None),) + sl],
                                it.h[None][(slice(None),) + sl], it.beta[None][(slice(None),) + sl]])
        stack = geometric_array(stack, GeometricDraw.sample(rng, cfg.augment.policy))
        xs.append(apply_photometric(stack[0], cfg.augment.policy, rng))
        ys.append(stack[1:3])
        hs.append(stack[3])
        bs.append(stack[4])
    return _t(np.stack(xs))[:, None], _t(np.stack(ys)), _t(np.stack(hs))[:, None], _t(np.stack(bs))[:, None]


@dataclass
class TargetItem:
    image: np.ndarray
    points: list
    pseudo: np.ndarray  # uint8 0/1/IGNORE
    fg: np.ndarray  # foreground probability from the last refresh
    prior: np.ndarray  # counter density on the image grid


def target_batch(items, cfg: RunConfig, rng: np.random.Generator, use_cp: bool):
    """Target patches with CP-Aug, geometric and photometric augmentation.

    Returns image, pseudo-label one-hot, sparse heatmap, focus map, count prior
    per patch and the number of CP-Aug pastes.
    """
    hw = cfg.optim.patch_hw
    s1, s2 = cfg.losses.sigma1, cfg.losses.sigma2
    n_cp = 0

    def patch(k):
        it = items[k]
        r0, c0 = _crop_origin(rng, it.image.shape, hw)
        sl = (slice(r0, r0 + hw[0]), slice(c0, c0 + hw[1]))
        arr = np.stack([it.image[sl], it.pseudo[sl].astype(np.float32), it.prior[sl], it.fg[sl]])
        return arr, _points_in(it.points, r0, c0, hw)

    xs, ys, hb, bt, tt = [], [], [], [], []
    for i in rng.integers(0, len(items), cfg.optim.batch_size):
        arr, pts = patch(int(i))
        if use_cp and len(items) > 1 and rng.random() < cfg.augment.cp.prob:
            j = int(rng.integers(0, len(items) - 1))
            j = j + 1 if j >= int(i) else j
            donor, dpts = patch(j)
            win = cp_windows(dpts, hw, pts, hw, cfg.augment.cp)
            if cfg.augment.cp.boundary_relabel and dpts:
                dpts = relabel_cut_points(dpts, donor[3], win)
            pts = _transfer_points(dpts, pts, win)
            arr = paste(arr, donor, win)
            n_cp += 1
        draw = GeometricDraw.sample(rng, cfg.augment.policy)
        arr = geometric_array(arr, draw)
        pts = geometric_points(pts, hw, draw)
        xs.append(apply_photometric(arr[0], cfg.augment.policy, rng))
        ys.append(pseudo_onehot(np.rint(arr[1]).astype(np.int64)))
        hb.append(render_density(pts, hw[0], hw[1], s1).values)
        bt.append(render_density(pts, hw[0], hw[1], s2).values)
        tt.append(float(arr[2].sum()))
    return (_t(np.stack(xs))[:, None], _t(np.stack(ys)), _t(np.stack(hb))[:, None],
            _t(np.stack(bt))[:, None], torch.tensor(tt, dtype=torch.float32), n_cp)


# ---------------------------------------------------------------------------
# Phase 1: source G1


def _resume_or_init(resume, builders: dict):
    if resume is None:
        return None
    ckpt = load_checkpoint(resume)
    for k, m in builders.items():
        m.load_state_dict(ckpt["models"][k])
    return ckpt


def train_source(cfg: RunConfig, samples, out_dir, name: str = "source", resume=None,
                 stop_at: int | None = None) -> Path:
    """Train G1 on densely labeled samples with segmentation and detection losses.

    The counting subnet is fitted to the heatmap mass on the same patches
    (its input is detached, so it does not steer the trunk).
    """
    set_determinism(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = prepare_labeled(samples, cfg)
    g1 = build_g1(cfg.model.backbone)
    opt = torch.optim.Adam(g1.parameters(), lr=cfg.optim.lr_source)
    z0 = 0
    ckpt = _resume_or_init(resume, {"g1": g1})
    if ckpt is not None:
        opt.load_state_dict(ckpt["extra"]["opt"])
        z0 = int(ckpt["extra"]["z"])
    scale = cfg.model.backbone.heat_scale
    w = cfg.losses.weights
    n_iters = cfg.optim.source_iters
    logf = JsonlLog(out_dir / f"{name}_log.jsonl", append=ckpt is not None)
    g1.train()
    t0 = time.time()
    end = n_iters if stop_at is None else min(stop_at, n_iters)
    for z in range(z0, end):
        rng = iter_rng(cfg.seed, "source", z)
        x, y, h, beta = labeled_batch(items, cfg, rng)
        feats = g1.trunk(x)
        logits = g1.seg_head(feats)
        heat = F.softplus(g1.det_head(feats))  # in scaled units
        cmap = F.softplus(g1.count_head(heat.detach())) / scale
        l_seg = L.seg_loss(torch.softmax(logits, 1), y)
        l_det = L.detection_loss(heat, h * scale, beta, lambda_focus=w.lambda_focus)
        l_cnt = (cmap.sum(dim=(1, 2, 3)) - h.sum(dim=(1, 2, 3))).abs().mean()
        loss = l_seg + w.lambda_d * l_det + l_cnt
        if not torch.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at iteration {z}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        logf.write({"iter": z, "L_seg": l_seg.item(), "L_det": l_det.item(), "L_count": l_cnt.item()})
        if cfg.optim.ckpt_every and (z + 1) % cfg.optim.ckpt_every == 0 and z + 1 < n_iters:
            _save_phase(out_dir / f"{name}_{z + 1:06d}.pt", cfg, {"g1": g1}, opt, z + 1, name)
    logf.close()
    log.info("%s: %d iterations in %.1fs", name, end - z0, time.time() - t0)
    path = out_dir / (f"{name}.pt" if end == n_iters else f"{name}_{end:06d}.pt")
    return _save_phase(path, cfg, {"g1": g1}, opt, end, name)


def _save_phase(path, cfg, models, opt, z, phase, extra=None):
    ex = {"z": z, "phase": phase, "fingerprint": cfg.fingerprint()}
    if opt is not None:
        ex["opt"] = opt.state_dict()
    ex.update(extra or {})
    return save_checkpoint(path, models, cfg.model.backbone, cfg.to_dict(), ex)


# ---------------------------------------------------------------------------
# Phase 2: source counter G2


def counter_window(cfg: RunConfig, s: float) -> tuple[int, int]:
    """Counter input window for scale s: patch side x s, rounded to the network multiple."""
    m = cfg.model.backbone.multiple
    return tuple(max(m, int(round(p * s / m)) * m) for p in cfg.optim.patch_hw)


def counter_batch(items, cfg: RunConfig, rng: np.random.Generator):
    """Native-resolution source crops of side patch x s (s from ``counter.scales``) with count targets."""
    s = float(rng.choice(cfg.counter.scales))
    H, W = items[0].image.shape
    ih, iw = counter_window(cfg, s)
    m = cfg.model.backbone.multiple
    # images smaller than the window: largest crop the network accepts, never padded
    ch, cw = max(m, min(H, ih) // m * m), max(m, min(W, iw) // m * m)
    xs, ts = [], []
    for i in rng.integers(0, len(items), cfg.counter.batch_size):
        it = items[int(i)]
        r0, c0 = _crop_origin(rng, it.image.shape, (ch, cw))
        sl = (slice(r0, r0 + ch), slice(c0, c0 + cw))
        draw = GeometricDraw.sample(rng, cfg.counter.policy)
        xs.append(apply_photometric(geometric_array(it.image[sl], draw), cfg.counter.policy, rng))
        ts.append(float(it.beta[sl].sum()))
    return _t(np.stack(xs))[:, None], torch.tensor(ts, dtype=torch.float32)


def train_counter(cfg: RunConfig, samples, init_ckpt, out_dir, name: str = "counter") -> Path:
    """Train G2 (trunk initialised from the source G1) with a squared count error."""
    set_determinism(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = prepare_labeled(samples, cfg)
    g2 = build_g2(cfg.model.backbone, init_from=load_checkpoint(init_ckpt)["models"]["g1"])
    opt = torch.optim.Adam(g2.parameters(), lr=cfg.optim.lr_counter)
    logf = JsonlLog(out_dir / f"{name}_log.jsonl")
    g2.train()
    for z in range(cfg.optim.counter_iters):
        rng = iter_rng(cfg.seed, "counter", z)
        for g in opt.param_groups:
            g["lr"] = poly_lr(cfg.optim.lr_counter, z, cfg.optim.counter_iters, cfg.optim.power)
        x, t = counter_batch(items, cfg, rng)
        loss = F.mse_loss(g2(x), t)
        opt.zero_grad()
        loss.backward()
        opt.step()
        logf.write({"iter": z, "L_count": loss.item()})
    logf.close()
    return _save_phase(out_dir / f"{name}.pt", cfg, {"g2": g2}, None, cfg.optim.counter_iters, name)


def load_g1(path) -> G1:
    ckpt = load_checkpoint(path)
    g1 = build_g1(backbone_from(ckpt))
    g1.load_state_dict(ckpt["models"]["g1"])
    return g1.eval()


def load_g2(path) -> G2:
    ckpt = load_checkpoint(path)
    g2 = build_g2(backbone_from(ckpt))
    g2.load_state_dict(ckpt["models"]["g2"])
    return g2.eval()


@torch.no_grad()
def counter_density(g2: G2, images, cfg: RunConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Counter density averaged over the configured window sizes, plus the per-size counts."""
    g2.eval()
    sizes = [counter_window(cfg, s) for s in cfg.counter.scales]
    dens, counts = [], []
    for im in images:
        d, c = predict_density_multiscale(g2, _t(im)[None, None], sizes)
        dens.append(d[0, 0].numpy())
        counts.append(c[:, 0].numpy())
    return dens, counts


# ---------------------------------------------------------------------------
# Phase 3: adaptation


@torch.no_grad()
def predict_probs(g1: G1, images, batch: int = 8) -> list[np.ndarray]:
    was = g1.training
    g1.eval()
    out = []
    for k in range(0, len(images), batch):
        x = _t(np.stack(images[k:k + batch]))[:, None]
        out.extend(predict_g1(g1, x).seg_prob.numpy())
    g1.train(was)
    return out


def refresh_pseudo(g1: G1, items: list[TargetItem], cfg: RunConfig):
    probs = predict_probs(g1, [it.image for it in items])
    th = compute_thresholds(probs, cfg.losses.K)
    for it, p in zip(items, probs):
        it.pseudo = generate_pseudo_labels(p, th).index_map()
        it.fg = p[1].astype(np.float32)
    return th


def adapt(cfg: RunConfig, source, target_train, g1_init, g2_ckpt=None, out_dir=".", name: str = "adapt",
          resume=None, stop_at: int | None = None) -> Path:
    """Alternating discriminator / G1 updates on source + sparsely annotated target data."""
    set_determinism(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lc = cfg.losses
    w = lc.weights
    o = cfg.optim
    scale = cfg.model.backbone.heat_scale
    src_items = prepare_labeled(source, cfg)

    g1 = build_g1(cfg.model.backbone)
    g1.load_state_dict(load_checkpoint(g1_init)["models"]["g1"])
    disc = build_discriminator(cfg.model.discriminator)
    opt_g = torch.optim.SGD(g1.parameters(), lr=o.lr_g, momentum=o.momentum, weight_decay=o.weight_decay)
    opt_d = torch.optim.Adam(disc.parameters(), lr=o.lr_d, betas=tuple(o.betas_d))

    images = [s.image for s in target_train]
    if lc.counting:
        if g2_ckpt is None:
            raise ConfigError("counting prior enabled but no counter checkpoint given")
        g2 = load_g2(g2_ckpt)
        priors, _ = counter_density(g2, images, cfg)
        del g2
    else:
        priors = [np.zeros_like(im) for im in images]
    items = [TargetItem(s.image, list(s.points or []), np.full(s.shape, IGNORE, np.uint8),
                        np.zeros(s.shape, np.float32), pr) for s, pr in zip(target_train, priors)]

    z0 = 0
    counts = {"d_updates": 0, "g_updates": 0}
    if resume is not None:
        ckpt = load_checkpoint(resume)
        g1.load_state_dict(ckpt["models"]["g1"])
        disc.load_state_dict(ckpt["models"]["d"])
        ex = ckpt["extra"]
        opt_g.load_state_dict(ex["opt"])
        opt_d.load_state_dict(ex["opt_d"])
        z0 = int(ex["z"])
        counts.update(ex.get("counts", {}))
        for it, p, f in zip(items, ex["pseudo"], ex["fg"]):
            it.pseudo = p.numpy()
            it.fg = f.numpy()

    logf = JsonlLog(out_dir / f"{name}_log.jsonl", append=resume is not None)
    R = o.refresh_period
    end = o.max_iters if stop_at is None else min(stop_at, o.max_iters)
    g1.train()
    disc.train()
    t0 = time.time()
    for z in range(z0, end):
        if (lc.pseudo or (cfg.augment.cp_aug and cfg.augment.cp.boundary_relabel)) and z % R == 0:
            th = refresh_pseudo(g1, items, cfg)
            log.debug("z=%d pseudo thresholds %s", z, th.v)
        rng = iter_rng(cfg.seed, "adapt", z)
        xs, ys, hs, bs = labeled_batch(src_items, cfg, rng)
        xt, yt, hbt, btt, prior_t, n_cp = target_batch(items, cfg, rng, cfg.augment.cp_aug)
        for g in opt_g.param_groups:
            g["lr"] = poly_lr(o.lr_g, z, o.max_iters, o.power)

        out = g1(torch.cat([xs, xt]))
        nb = xs.shape[0]
        p_s, p_t = out.seg_prob[:nb], out.seg_prob[nb:]

        # (1) discriminator on detached segmentation outputs
        l_d = torch.zeros(())
        if lc.adversarial:
            d_s = torch.sigmoid(disc(p_s.detach()))
            d_t = torch.sigmoid(disc(p_t.detach()))
            l_d = L.discriminator_loss(d_s, d_t)
            opt_d.zero_grad()
            l_d.backward()
            opt_d.step()
            counts["d_updates"] += 1

        # (2) generator
        parts = {"seg": L.seg_loss(p_s, ys, p_t, yt if lc.pseudo else None)}
        if lc.adversarial:
            for prm in disc.parameters():
                prm.requires_grad_(False)
            parts["adv"] = L.adversarial_loss(torch.sigmoid(disc(p_t)))
        if lc.detection:
            heat = out.det_heat * scale
            w_t = ((p_t[:, 1:2].detach() < w.rho) | (hbt > 1e-8)).float()
            parts["det"] = L.detection_loss(heat[:nb], hs * scale, bs, heat[nb:], hbt * scale, w_t, btt,
                                            w.lambda_focus)
        if lc.counting:
            parts["cons"] = L.counting_consistency(out.count_hat[nb:], prior_t, w.epsilon)
        loss = L.total_generator_loss(parts, w, z, o.z_max)
        if not torch.isfinite(loss):
            _save_phase(out_dir / f"{name}_abort_{z:06d}.pt", cfg, {"g1": g1, "d": disc}, opt_g, z, name)
            raise TrainingAborted(f"non-finite generator loss at iteration {z}; state dumped")
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        counts["g_updates"] += 1
        if lc.adversarial:
            for prm in disc.parameters():
                prm.requires_grad_(True)

        logf.write({
            "iter": z,
            "L_seg": _num(parts["seg"]),
            "L_adv": _num(parts.get("adv", 0.0)),
            "L_det": _num(parts.get("det", 0.0)),
            "L_cons": _num(parts.get("cons", 0.0)),
            "L_D": _num(l_d),
            "lambda_c": L.lambda_c(z, o.z_max),
            "lr_g": opt_g.param_groups[0]["lr"],
            "cp_aug": n_cp,
            "d_updates": counts["d_updates"],
            "g_updates": counts["g_updates"],
        })
        if o.ckpt_every and (z + 1) % o.ckpt_every == 0 and z + 1 < o.max_iters:
            _save_adapt(out_dir / f"{name}_{z + 1:06d}.pt", cfg, g1, disc, opt_g, opt_d, z + 1, items, counts)
    logf.close()
    log.info("%s: %d iterations in %.1fs", name, end - z0, time.time() - t0)
    path = out_dir / (f"{name}.pt" if end == o.max_iters else f"{name}_{end:06d}.pt")
    return _save_adapt(path, cfg, g1, disc, opt_g, opt_d, end, items, counts)


def _save_adapt(path, cfg, g1, disc, opt_g, opt_d, z, items, counts):
    extra = {
        "opt_d": opt_d.state_dict(),
        "counts": dict(counts),
        "pseudo": [torch.from_numpy(it.pseudo.copy()) for it in items],
        "fg": [torch.from_numpy(it.fg.copy()) for it in items],
    }
    return _save_phase(path, cfg, {"g1": g1, "d": disc}, opt_g, z, "adapt", extra)
