"""Geometric/photometric augmentation and cross-position cut-and-paste (CP-Aug)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage as ndi

from .data import STRUCT8, ConfigError, DomainSample


@dataclass
class AugPolicy:
    flips: bool = True
    rotations: bool = True  # multiples of 90 degrees
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    blur_prob: float = 0.3
    brightness: tuple[float, float] = (-0.08, 0.08)
    contrast: tuple[float, float] = (0.85, 1.15)
    gamma: tuple[float, float] = (0.8, 1.25)
    noise_sigma_range: tuple[float, float] = (0.0, 0.0)  # additive Gaussian noise
    seed: int = 0


@dataclass(frozen=True)
class GeometricDraw:
    flip_v: bool = False
    flip_h: bool = False
    k: int = 0  # counter-clockwise quarter turns

    @classmethod
    def sample(cls, rng: np.random.Generator, policy: AugPolicy) -> "GeometricDraw":
        fv, fh = (bool(rng.integers(2)), bool(rng.integers(2))) if policy.flips else (False, False)
        k = int(rng.integers(4)) if policy.rotations else 0
        return cls(fv, fh, k)


def geometric_array(a: np.ndarray, draw: GeometricDraw) -> np.ndarray:
    """Apply the draw to the last two axes of an array."""
    if draw.flip_v:
        a = a[..., ::-1, :]
    if draw.flip_h:
        a = a[..., :, ::-1]
    if draw.k:
        a = np.rot90(a, draw.k, axes=(-2, -1))
    return np.ascontiguousarray(a)


def geometric_points(points, shape, draw: GeometricDraw):
    if points is None:
        return None
    h, w = shape
    out = []
    for r, c in points:
        if draw.flip_v:
            r = h - 1 - r
        if draw.flip_h:
            c = w - 1 - c
        hh, ww = h, w
        for _ in range(draw.k % 4):
            r, c = ww - 1 - c, r
            hh, ww = ww, hh
        out.append((int(r), int(c)))
    return out


def apply_geometric(sample: DomainSample, policy: AugPolicy | None = None, draw=None) -> DomainSample:
    """Transform image, masks and points identically.

    ``draw`` is a GeometricDraw or a numpy Generator used to sample one.
    """
    policy = policy or AugPolicy()
    if draw is None or isinstance(draw, np.random.Generator):
        draw = GeometricDraw.sample(draw or np.random.default_rng(policy.seed), policy)
    shape = sample.shape
    return replace(
        sample,
        image=geometric_array(sample.image, draw),
        mask=None if sample.mask is None else geometric_array(sample.mask, draw),
        points=geometric_points(sample.points, shape, draw),
        truth_mask=None if sample.truth_mask is None else geometric_array(sample.truth_mask, draw),
        truth_points=geometric_points(sample.truth_points, shape, draw),
    )


def apply_photometric(image: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Blur, noise and brightness/contrast/gamma jitter; the result stays in [0, 1]."""
    x = image.astype(np.float32)
    if rng.random() < policy.blur_prob:
        s = rng.uniform(*policy.blur_sigma_range)
        if s > 0:
            x = ndi.gaussian_filter(x, s)
    if policy.noise_sigma_range[1] > 0:
        x = x + rng.normal(0.0, rng.uniform(*policy.noise_sigma_range), x.shape).astype(np.float32)
    m = float(x.mean())
    x = (x - m) * rng.uniform(*policy.contrast) + m + rng.uniform(*policy.brightness)
    x = np.clip(x, 0.0, 1.0) ** rng.uniform(*policy.gamma)
    return x.astype(np.float32)


# ---------------------------------------------------------------------------
# CP-Aug


@dataclass
class CPAugConfig:
    crop_hw: tuple[int, int] = (64, 64)
    stride: tuple[int, int] | None = None  # defaults to crop/4
    boundary_relabel: bool = True
    prob: float = 0.5

    def strides(self) -> tuple[int, int]:
        if self.stride is not None:
            return self.stride
        return max(1, self.crop_hw[0] // 4), max(1, self.crop_hw[1] // 4)


@dataclass(frozen=True)
class CPWindows:
    donor: tuple[int, int]
    recipient: tuple[int, int]
    hw: tuple[int, int]

    def donor_slice(self):
        (r, c), (h, w) = self.donor, self.hw
        return slice(r, r + h), slice(c, c + w)

    def recipient_slice(self):
        (r, c), (h, w) = self.recipient, self.hw
        return slice(r, r + h), slice(c, c + w)


def _positions(n: int, crop: int, stride: int) -> list[int]:
    pos = list(range(0, n - crop + 1, stride))
    if pos[-1] != n - crop:
        pos.append(n - crop)
    return pos


def _count_in(points, r0, c0, hw) -> int:
    h, w = hw
    return sum(1 for r, c in points if r0 <= r < r0 + h and c0 <= c < c0 + w)


def _scan(points, shape, hw, strides, best):
    top = None
    for r0 in _positions(shape[0], hw[0], strides[0]):
        for c0 in _positions(shape[1], hw[1], strides[1]):
            n = _count_in(points, r0, c0, hw)
            if top is None or best(n, top[0]):
                top = (n, (r0, c0))
    return top[1]


def cp_windows(a_points, a_shape, b_points, b_shape, cfg: CPAugConfig) -> CPWindows:
    """Donor window with the most points in a, recipient window with the fewest in b."""
    hw = tuple(cfg.crop_hw)
    for shape in (a_shape, b_shape):
        if hw[0] > shape[0] or hw[1] > shape[1]:
            raise ConfigError(f"crop {hw} larger than image {shape}")
    strides = cfg.strides()
    donor = _scan(a_points or [], a_shape, hw, strides, lambda n, m: n > m)
    recip = _scan(b_points or [], b_shape, hw, strides, lambda n, m: n < m)
    return CPWindows(donor, recip, hw)


def paste(dst: np.ndarray, src: np.ndarray, win: CPWindows) -> np.ndarray:
    """Copy the donor window of src into the recipient window of dst (last two axes)."""
    out = np.array(dst, copy=True)
    dr, dc = win.donor_slice()
    rr, rc = win.recipient_slice()
    out[..., rr, rc] = src[..., dr, dc]
    return out


def _fg_prob(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p[1] if p.ndim == 3 else p


def relabel_cut_points(points, seg_prob, win: CPWindows):
    """Move annotated donor points whose predicted instance the crop cuts to the in-crop centroid.

    Points are given and returned in donor-image coordinates.
    """
    fg = _fg_prob(seg_prob) > 0.5
    labels, _ = ndi.label(fg, structure=STRUCT8)
    dr, dc = win.donor_slice()
    inside = np.zeros(fg.shape, dtype=bool)
    inside[dr, dc] = True
    out = []
    for r, c in points:
        k = labels[r, c]
        if k == 0:
            out.append((r, c))
            continue
        comp = labels == k
        if not (comp & ~inside).any() or not (comp & inside).any():
            out.append((r, c))
            continue
        rr, cc = np.nonzero(comp & inside)
        cr, ccen = rr.mean(), cc.mean()
        nr, nc = int(math.floor(cr + 0.5)), int(math.floor(ccen + 0.5))
        if not (comp & inside)[nr, nc]:
            j = int(np.argmin((rr - cr) ** 2 + (cc - ccen) ** 2))
            nr, nc = int(rr[j]), int(cc[j])
        out.append((nr, nc))
    return out


def _transfer_points(a_points, b_points, win: CPWindows):
    (dr0, dc0), (rr0, rc0), hw = win.donor, win.recipient, win.hw
    keep_b = [(r, c) for r, c in b_points or [] if not (rr0 <= r < rr0 + hw[0] and rc0 <= c < rc0 + hw[1])]
    moved = [(r - dr0 + rr0, c - dc0 + rc0) for r, c in a_points or []
             if dr0 <= r < dr0 + hw[0] and dc0 <= c < dc0 + hw[1]]
    return keep_b + moved


def cp_aug(a: DomainSample, b: DomainSample, cfg: CPAugConfig | None = None, seg_prob_a=None,
           windows: CPWindows | None = None) -> DomainSample:
    """Paste the most-annotated crop of ``a`` over the least-annotated window of ``b``.

    Annotations of ``b`` outside the recipient window survive; annotations of
    ``a`` inside the crop move with it. When ``seg_prob_a`` is given and
    boundary relabeling is on, donor points whose predicted instance is cut by
    the crop are recomputed from the in-crop part of that instance.
    """
    cfg = cfg or CPAugConfig()
    win = windows or cp_windows(a.points, a.shape, b.points, b.shape, cfg)
    a_pts = list(a.points or [])
    if cfg.boundary_relabel and seg_prob_a is not None and a_pts:
        a_pts = relabel_cut_points(a_pts, seg_prob_a, win)

    def both(x, y):
        return None if x is None or y is None else paste(y, x, win)

    truth_points = None
    if a.truth_points is not None and b.truth_points is not None:
        truth_points = _transfer_points(a.truth_points, b.truth_points, win)
    return DomainSample(
        image=paste(b.image, a.image, win),
        mask=both(a.mask, b.mask),
        points=_transfer_points(a_pts, b.points, win),
        domain=b.domain,
        id=f"{b.id}+{a.id}",
        truth_mask=both(a.truth_mask, b.truth_mask),
        truth_points=truth_points,
    )
