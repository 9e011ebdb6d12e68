"""Domain samples, dataset I/O, sparse point sampling and the synthetic two-domain generator."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

log = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

# 8-connectivity everywhere instances are labeled
STRUCT8 = np.ones((3, 3), dtype=bool)


class ConfigError(ValueError):
    pass


class LoadError(IOError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class DomainSample:
    image: np.ndarray
    mask: np.ndarray | None = None
    points: list[tuple[int, int]] | None = None
    domain: str = SOURCE
    id: str = ""
    # withheld ground truth for synthetic target data; never read by training code
    truth_mask: np.ndarray | None = None
    truth_points: list[tuple[int, int]] | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}")
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2:
            raise ShapeError(f"image must be 2D, got shape {self.image.shape}")
        h, w = self.image.shape
        if self.mask is not None:
            self.mask = (np.asarray(self.mask) != 0).astype(np.uint8)
            if self.mask.shape != (h, w):
                raise ShapeError(f"mask shape {self.mask.shape} != image shape {(h, w)}")
        if self.points is not None:
            self.points = [(int(r), int(c)) for r, c in self.points]
            for r, c in self.points:
                if not (0 <= r < h and 0 <= c < w):
                    raise ShapeError(f"point {(r, c)} outside image {(h, w)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass
class InstanceLabelMap:
    labels: np.ndarray
    count: int

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "InstanceLabelMap":
        labels, n = ndi.label(np.asarray(mask) != 0, structure=STRUCT8)
        return cls(labels.astype(np.int32), int(n))

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "InstanceLabelMap":
        """Relabel an arbitrary id map to contiguous ids 1..count."""
        labels = np.asarray(labels)
        ids = np.unique(labels)
        ids = ids[ids != 0]
        out = np.zeros(labels.shape, dtype=np.int32)
        for k, i in enumerate(ids, start=1):
            out[labels == i] = k
        return cls(out, len(ids))


@dataclass(frozen=True)
class SparsePointBudget:
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ConfigError(f"sparse ratio must lie in (0, 1], got {self.ratio}")

    def n_keep(self, n: int) -> int:
        if n <= 0:
            return 0
        return max(1, int(math.floor(self.ratio * n + 0.5)))


def centers_from_mask(mask: np.ndarray) -> list[tuple[int, int]]:
    """One center per 8-connected component, snapped inside the component when the centroid is not."""
    labels, n = ndi.label(np.asarray(mask) != 0, structure=STRUCT8)
    if n == 0:
        return []
    centroids = ndi.center_of_mass(np.ones_like(labels), labels, range(1, n + 1))
    objects = ndi.find_objects(labels)
    points = []
    for k, ((cr, cc), sl) in enumerate(zip(centroids, objects), start=1):
        r, c = int(math.floor(cr + 0.5)), int(math.floor(cc + 0.5))
        if labels[r, c] != k:
            rr, ccs = np.nonzero(labels[sl] == k)
            rr = rr + sl[0].start
            ccs = ccs + sl[1].start
            j = int(np.argmin((rr - cr) ** 2 + (ccs - cc) ** 2))
            r, c = int(rr[j]), int(ccs[j])
        points.append((r, c))
    return points


def sample_sparse_points(points, budget: SparsePointBudget) -> list[tuple[int, int]]:
    """Uniform sample without replacement of round(ratio * N) points, at least one.

    The sample is a prefix of a seeded permutation, so for one seed a smaller
    ratio always yields a subset of a larger one.
    """
    points = list(points)
    k = budget.n_keep(len(points))
    if k == 0:
        return []
    order = np.random.default_rng(budget.seed).permutation(len(points))[:k]
    return [tuple(points[i]) for i in sorted(order)]


# ---------------------------------------------------------------------------
# Dataset I/O


def _to_unit(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.uint32, np.int64) or arr.dtype.kind in "iu":
        if arr.max(initial=0) > 255 or arr.dtype == np.uint16:
            return (arr.astype(np.float64) / 65535.0).clip(0, 1).astype(np.float32)
        return arr.astype(np.float32) / 255.0
    if arr.dtype == bool:
        return arr.astype(np.float32)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA"):
            im = im.convert("L")
        arr = np.array(im)
    if arr.ndim != 2:
        raise ShapeError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr


def _read_tiff(path: Path) -> np.ndarray:
    import tifffile

    arr = tifffile.imread(path)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{path}: expected a page stack, got shape {arr.shape}")
    return arr


def read_points_csv(path: Path) -> dict[int, list[tuple[int, int]]]:
    out: dict[int, list[tuple[int, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"slice", "row", "col"} <= set(reader.fieldnames):
            raise LoadError(f"{path}: header must be slice,row,col")
        for row in reader:
            out.setdefault(int(row["slice"]), []).append((int(row["row"]), int(row["col"])))
    return out


def write_points_csv(path: Path, points_per_slice) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["slice", "row", "col"])
        for s, pts in enumerate(points_per_slice):
            for r, c in pts or ():
                wr.writerow([s, r, c])


def _slice_images(root: Path, layout: str) -> tuple[list[np.ndarray], list[str], Path]:
    if layout == "png-slices":
        d = root / "images" if (root / "images").is_dir() else root
        files = sorted(d.glob("*.png"))
        if not files:
            raise LoadError(f"no PNG slices in {d}")
        return [_read_png(f) for f in files], [f.stem for f in files], d
    if layout == "multipage-tiff":
        if root.is_file():
            f = root
        else:
            cands = sorted((root / "images").glob("*.tif*")) if (root / "images").is_dir() else sorted(root.glob("*.tif*"))
            if not cands:
                raise LoadError(f"no TIFF stack under {root}")
            f = cands[0]
        pages = _read_tiff(f)
        return list(pages), [f"{f.stem}_{i:04d}" for i in range(len(pages))], f.parent
    raise ConfigError(f"unknown layout {layout!r}")


def load_stack(path, layout: str = "png-slices", domain: str = SOURCE) -> list[DomainSample]:
    """Load a slice stack (and optional masks/points.csv) as DomainSamples.

    ``path`` is either a dataset root (``images/``, optional ``masks/`` and
    ``points.csv``), a directory of PNG slices, or a multipage TIFF file.
    """
    root = Path(path)
    if not root.exists():
        raise LoadError(f"{root} does not exist")
    images, ids, img_dir = _slice_images(root, layout)
    shape = images[0].shape
    for i, im in zip(ids, images):
        if im.shape != shape:
            raise ShapeError(f"slice {i} has shape {im.shape}, expected {shape}")

    base = root if root.is_dir() else root.parent
    if img_dir.name == "images":
        base = img_dir.parent
    masks: list[np.ndarray | None] = [None] * len(images)
    mdir = base / "masks"
    if mdir.is_dir():
        if layout == "png-slices":
            for k, i in enumerate(ids):
                f = mdir / f"{i}.png"
                if f.exists():
                    masks[k] = _read_png(f)
        else:
            cands = sorted(mdir.glob("*.tif*"))
            if cands:
                pages = _read_tiff(cands[0])
                if len(pages) != len(images):
                    raise ShapeError(f"mask stack has {len(pages)} pages, image stack {len(images)}")
                masks = list(pages)
        for i, m in zip(ids, masks):
            if m is not None and m.shape != shape:
                raise ShapeError(f"mask {i} has shape {m.shape}, expected {shape}")

    points: dict[int, list[tuple[int, int]]] = {}
    if (base / "points.csv").exists():
        points = read_points_csv(base / "points.csv")

    return [
        DomainSample(
            image=_to_unit(im),
            mask=None if m is None else (m != 0).astype(np.uint8),
            points=points.get(k, []) if points else None,
            domain=domain,
            id=i,
        )
        for k, (im, m, i) in enumerate(zip(images, masks, ids))
    ]


def save_stack(samples, root, layout: str = "png-slices") -> Path:
    """Write samples in the layout read by :func:`load_stack` (16-bit images)."""
    import tifffile

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    imgs = [np.round(np.clip(s.image, 0, 1) * 65535.0).astype(np.uint16) for s in samples]
    has_mask = any(s.mask is not None for s in samples)
    if has_mask:
        (root / "masks").mkdir(exist_ok=True)
    if layout == "png-slices":
        for k, (s, im) in enumerate(zip(samples, imgs)):
            name = s.id or f"slice_{k:04d}"
            Image.fromarray(im).save(root / "images" / f"{name}.png")
            if s.mask is not None:
                Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "masks" / f"{name}.png")
    elif layout == "multipage-tiff":
        tifffile.imwrite(root / "images" / "stack.tif", np.stack(imgs), photometric="minisblack")
        if has_mask:
            ms = [s.mask if s.mask is not None else np.zeros(s.shape, np.uint8) for s in samples]
            tifffile.imwrite(root / "masks" / "stack.tif", (np.stack(ms) * 255).astype(np.uint8), photometric="minisblack")
    else:
        raise ConfigError(f"unknown layout {layout!r}")
    if any(s.points is not None for s in samples):
        write_points_csv(root / "points.csv", [s.points for s in samples])
    return root


# ---------------------------------------------------------------------------
# Synthetic two-domain generator


@dataclass
class DomainStyle:
    """Appearance knobs of one synthetic domain."""

    texture_freq: float = 0.05  # cycles/px of the background texture
    texture_amp: float = 0.10
    gamma: float = 1.0
    contrast: float = 1.0
    density_mult: float = 1.0
    noise_sigma: float = 0.03
    size_scale: float = 1.0


def _default_target_style() -> DomainStyle:
    return DomainStyle(texture_freq=0.12, texture_amp=0.12, gamma=1.3, contrast=0.75,
                       density_mult=1.3, noise_sigma=0.06, size_scale=0.9)


@dataclass
class SynthConfig:
    hw: tuple[int, int] = (128, 128)
    instances: tuple[int, int] = (3, 12)
    n_source: int = 40
    n_target_train: int = 40
    n_target_test: int = 20
    ratio: float = 0.15
    semi_axes: tuple[float, float] = (5.0, 11.0)
    min_gap: int = 3
    distractors: tuple[int, int] = (2, 8)
    source: DomainStyle = field(default_factory=DomainStyle)
    target: DomainStyle = field(default_factory=_default_target_style)

    def validate(self) -> None:
        lo, hi = self.instances
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad instance range {self.instances}")
        if hi == 0:
            raise ConfigError("instance range allows no instances at all")
        if min(self.hw) < 16:
            raise ConfigError(f"image size {self.hw} too small")
        if self.semi_axes[0] <= 1 or self.semi_axes[1] < self.semi_axes[0]:
            raise ConfigError(f"bad semi-axis range {self.semi_axes}")
        if 2 * self.semi_axes[1] + 4 >= min(self.hw):
            raise ConfigError("instances do not fit inside the image")
        if min(self.n_source, self.n_target_train, self.n_target_test) < 1:
            raise ConfigError("every split needs at least one image")
        SparsePointBudget(self.ratio)
        for st in (self.source, self.target):
            if st.gamma <= 0 or st.contrast <= 0 or st.density_mult <= 0 or st.noise_sigma < 0:
                raise ConfigError(f"bad domain style {st}")


def _texture(rng, hw, freq):
    noise = rng.standard_normal(hw)
    t = ndi.gaussian_filter(noise, sigma=max(0.5, 1.0 / (2 * math.pi * freq)), mode="wrap")
    return t / (t.std() + 1e-8)


def _place_ellipses(rng, hw, n, axes, scale, gap):
    h, w = hw
    occupied = np.zeros(hw, dtype=bool)
    mask = np.zeros(hw, dtype=np.int32)
    rr, cc = np.mgrid[0:h, 0:w]
    params = []
    for _ in range(n):
        for _try in range(60):
            a = rng.uniform(*axes) * scale
            b = rng.uniform(axes[0], max(axes[0], a)) * scale
            b = max(b, axes[0] * 0.8)
            th = rng.uniform(0, math.pi)
            m = int(math.ceil(max(a, b))) + 2
            r0 = rng.uniform(m, h - 1 - m)
            c0 = rng.uniform(m, w - 1 - m)
            y, x = rr - r0, cc - c0
            u = (x * math.cos(th) + y * math.sin(th)) / a
            v = (-x * math.sin(th) + y * math.cos(th)) / b
            rho = np.sqrt(u * u + v * v)
            inside = rho <= 1.0
            if inside.sum() < 12:
                continue
            grown = ndi.binary_dilation(inside, iterations=gap)
            if (grown & occupied).any():
                continue
            occupied |= inside
            mask[inside] = len(params) + 1
            params.append((rho, min(a, b)))
            break
    return mask, params


def render_synthetic_image(rng, cfg: SynthConfig, style: DomainStyle):
    """Render one image; returns (image in [0,1], binary mask)."""
    h, w = cfg.hw
    lo, hi = cfg.instances
    n = int(rng.integers(lo, hi + 1))
    n = int(round(n * style.density_mult))
    img = 0.58 + style.texture_amp * _texture(rng, cfg.hw, style.texture_freq)
    labels, params = _place_ellipses(rng, cfg.hw, n, cfg.semi_axes, style.size_scale, cfg.min_gap)
    # double membrane: dark outer ring, light gap, dark inner ring, textured matrix
    matrix_tex = _texture(rng, cfg.hw, 0.25)
    for k, (rho, rmin) in enumerate(params, start=1):
        inside = labels == k
        depth = (1.0 - rho) * rmin  # approx. distance to the boundary in px
        val = np.where(depth < 1.2, 0.14, np.where(depth < 2.2, 0.52, np.where(depth < 3.2, 0.20, 0.40)))
        val = val + np.where(depth >= 3.2, 0.05 * matrix_tex, 0.0)
        img = np.where(inside, val, img)
    # unlabeled dark vesicles
    occupied = ndi.binary_dilation(labels > 0, iterations=cfg.min_gap)
    rr, cc = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))):
        rad = rng.uniform(1.5, 3.0)
        r0, c0 = rng.uniform(4, h - 5), rng.uniform(4, w - 5)
        disk = (rr - r0) ** 2 + (cc - c0) ** 2 <= rad * rad
        if (disk & occupied).any():
            continue
        img = np.where(disk, 0.22, img)
    img = ndi.gaussian_filter(img, 0.7)
    img = 0.5 + style.contrast * (img - 0.5)
    img = img + style.noise_sigma * rng.standard_normal(cfg.hw)
    img = np.clip(img, 0.0, 1.0) ** style.gamma
    return img.astype(np.float32), (labels > 0).astype(np.uint8)


def synth_domain_pair(cfg: SynthConfig | None = None, seed: int = 0):
    """Generate (source, target_train, target_test) synthetic splits.

    Source samples carry dense masks and full centers. Target training samples
    carry only sparse centers; their dense truth is kept in ``truth_mask`` for
    evaluation-only checks. Target test samples carry dense masks.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    ss = np.random.SeedSequence(seed)
    s_src, s_tt, s_te, s_pts = ss.spawn(4)

    def split(seq, n, style, domain, prefix):
        out = []
        for i, child in enumerate(seq.spawn(n)):
            img, mask = render_synthetic_image(np.random.default_rng(child), cfg, style)
            out.append((f"{prefix}_{i:04d}", img, mask))
        return out

    source = [
        DomainSample(img, mask=m, points=centers_from_mask(m), domain=SOURCE, id=i)
        for i, img, m in split(s_src, cfg.n_source, cfg.source, SOURCE, "src")
    ]
    point_seeds = s_pts.generate_state(cfg.n_target_train)
    target_train = []
    for (i, img, m), ps in zip(split(s_tt, cfg.n_target_train, cfg.target, TARGET, "tgt"), point_seeds):
        full = centers_from_mask(m)
        sparse = sample_sparse_points(full, SparsePointBudget(cfg.ratio, int(ps)))
        target_train.append(DomainSample(img, mask=None, points=sparse, domain=TARGET, id=i,
                                         truth_mask=m, truth_points=full))
    target_test = [
        DomainSample(img, mask=m, points=centers_from_mask(m), domain=TARGET, id=i)
        for i, img, m in split(s_te, cfg.n_target_test, cfg.target, TARGET, "tgt_test")
    ]
    return source, target_train, target_test


def resample_points(samples, ratio: float, seed: int) -> list[DomainSample]:
    """Redraw the sparse annotation of synthetic target samples at another ratio/seed."""
    out = []
    seeds = np.random.SeedSequence(seed).generate_state(len(samples))
    for s, ps in zip(samples, seeds):
        if s.truth_points is None:
            raise ConfigError(f"sample {s.id} has no withheld centers to resample from")
        pts = sample_sparse_points(s.truth_points, SparsePointBudget(ratio, int(ps)))
        out.append(DomainSample(s.image, mask=s.mask, points=pts, domain=s.domain, id=s.id,
                                truth_mask=s.truth_mask, truth_points=s.truth_points))
    return out
