"""Post-processing of segmentations and Dice / AJI / PQ evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage as ndi

from .data import STRUCT8, InstanceLabelMap
from .heatmaps import PeakSet

CROSS = ndi.generate_binary_structure(2, 1)  # disk of radius 1


def filter_segmentation(seg_mask, peaks, min_area: int = 64) -> np.ndarray:
    """Drop noise blobs and unconfirmed small components.

    Opening by reconstruction (radius-1 disk) removes components that do not
    survive the opening, without reshaping or splitting the others. A
    remaining 8-connected component is kept if it contains a peak or has at
    least ``min_area`` pixels.
    """
    mask = np.asarray(seg_mask) != 0
    opened = ndi.binary_opening(mask, structure=CROSS)
    labels, n = ndi.label(mask, structure=STRUCT8)
    if n == 0:
        return np.zeros(mask.shape, dtype=np.uint8)
    survives = np.zeros(n + 1, dtype=bool)
    survives[np.unique(labels[opened])] = True
    area = np.bincount(labels.ravel(), minlength=n + 1)
    has_peak = np.zeros(n + 1, dtype=bool)
    coords = peaks.coords if isinstance(peaks, PeakSet) else [(int(p[0]), int(p[1])) for p in peaks]
    for r, c in coords:
        has_peak[labels[r, c]] = True
    keep = survives & (has_peak | (area >= min_area))
    keep[0] = False
    return keep[labels].astype(np.uint8)


def scaled_min_area(base: int, shape, ref: int = 128) -> int:
    return int(round(base * (shape[0] * shape[1]) / (ref * ref)))


def dice(S, G) -> float:
    S = np.asarray(S) != 0
    G = np.asarray(G) != 0
    if S.shape != G.shape:
        raise ValueError(f"shape mismatch {S.shape} vs {G.shape}")
    den = int(S.sum()) + int(G.sum())
    if den == 0:
        return 1.0
    return 2.0 * int((S & G).sum()) / den


def _labels(x) -> np.ndarray:
    if isinstance(x, InstanceLabelMap):
        return x.labels
    return np.asarray(x)


def contingency(S, G):
    """Overlap table (n_G+1) x (n_S+1) over contiguous ids, plus the instance areas."""
    s = InstanceLabelMap.from_labels(_labels(S)) if not isinstance(S, InstanceLabelMap) else S
    g = InstanceLabelMap.from_labels(_labels(G)) if not isinstance(G, InstanceLabelMap) else G
    ns, ng = s.count, g.count
    table = np.bincount(g.labels.ravel().astype(np.int64) * (ns + 1) + s.labels.ravel(),
                        minlength=(ng + 1) * (ns + 1)).reshape(ng + 1, ns + 1)
    return table, table.sum(axis=0), table.sum(axis=1)


def aji_counts(S, G) -> tuple[int, int]:
    """Numerator and denominator of the aggregated Jaccard index.

    Ground-truth instances are matched one-to-one to predictions greedily in
    descending overlap (ties: larger IoU, then smaller prediction id, then
    smaller ground-truth id). Unmatched ground truth adds its area to the
    denominator; unmatched predictions are false positives and add theirs.
    """
    table, s_area, g_area = contingency(S, G)
    ng, ns = table.shape[0] - 1, table.shape[1] - 1
    edges = []
    for j in range(1, ng + 1):
        for k in range(1, ns + 1):
            inter = int(table[j, k])
            if inter:
                union = int(g_area[j] + s_area[k] - inter)
                edges.append((-inter, -inter / union, k, j))
    edges.sort()
    used_g, used_s = set(), set()
    num = den = 0
    for neg_inter, _, k, j in edges:
        if j in used_g or k in used_s:
            continue
        used_g.add(j)
        used_s.add(k)
        num += -neg_inter
        den += int(g_area[j] + s_area[k] + neg_inter)
    den += sum(int(g_area[j]) for j in range(1, ng + 1) if j not in used_g)
    den += sum(int(s_area[k]) for k in range(1, ns + 1) if k not in used_s)
    return num, den


def aji(S, G) -> float:
    num, den = aji_counts(S, G)
    if den == 0:
        return 1.0
    return num / den


@dataclass
class PQStats:
    iou_sum: Fraction
    tp: int
    fp: int
    fn: int

    def values(self) -> tuple[float, float, float]:
        if self.tp == 0:
            return (1.0, 1.0, 1.0) if self.fp == 0 and self.fn == 0 else (0.0, 0.0, 0.0)
        sq = self.iou_sum / self.tp
        dq = Fraction(self.tp) / (self.tp + Fraction(self.fp + self.fn, 2))
        return float(sq * dq), float(sq), float(dq)

    def __add__(self, other: "PQStats") -> "PQStats":
        return PQStats(self.iou_sum + other.iou_sum, self.tp + other.tp, self.fp + other.fp,
                       self.fn + other.fn)


def pq_stats(S, G, iou_thresh: float = 0.5) -> PQStats:
    table, s_area, g_area = contingency(S, G)
    ng, ns = table.shape[0] - 1, table.shape[1] - 1
    iou_sum = Fraction(0)
    tp = 0
    for j, k in zip(*np.nonzero(table[1:, 1:])):
        inter = int(table[j + 1, k + 1])
        union = int(g_area[j + 1] + s_area[k + 1] - inter)
        iou = Fraction(inter, union)
        if iou > iou_thresh:
            iou_sum += iou
            tp += 1
    return PQStats(iou_sum, tp, ns - tp, ng - tp)


def pq(S, G, iou_thresh: float = 0.5):
    """Returns (pq, sq, dq, tp, fp, fn); matches are pairs with IoU above the threshold."""
    st = pq_stats(S, G, iou_thresh)
    p, s, d = st.values()
    return p, s, d, st.tp, st.fp, st.fn


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ImageScores:
    id: str
    dice: float
    aji: float
    pq: float
    sq: float
    dq: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    dice: float
    aji: float
    pq: float
    sq: float
    dq: float
    tp: int
    fp: int
    fn: int
    per_image: list[ImageScores] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_masks(preds, truths, ids=None) -> EvalReport:
    """Per-image scores and dataset-pooled aggregates (pooled Dice/AJI sums and PQ counts)."""
    ids = ids or [str(i) for i in range(len(preds))]
    rows = []
    inter = tot = 0
    a_num = a_den = 0
    total = PQStats(Fraction(0), 0, 0, 0)
    for i, s, g in zip(ids, preds, truths):
        s = np.asarray(s) != 0
        g = np.asarray(g) != 0
        S, G = InstanceLabelMap.from_mask(s), InstanceLabelMap.from_mask(g)
        num, den = aji_counts(S, G)
        st = pq_stats(S, G)
        p, sq_, dq_ = st.values()
        rows.append(ImageScores(i, dice(s, g), num / den if den else 1.0, p, sq_, dq_, st.tp, st.fp, st.fn))
        inter += int((s & g).sum())
        tot += int(s.sum()) + int(g.sum())
        a_num += num
        a_den += den
        total = total + st
    p, sq_, dq_ = total.values()
    return EvalReport(
        dice=2 * inter / tot if tot else 1.0,
        aji=a_num / a_den if a_den else 1.0,
        pq=p, sq=sq_, dq=dq_, tp=total.tp, fp=total.fp, fn=total.fn, per_image=rows,
    )
