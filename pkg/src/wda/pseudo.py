"""Entropy-gated pseudo-labels for the unlabeled target pixels."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IGNORE = 255
SUBSAMPLE_ABOVE = 10_000_000
SUBSAMPLE_STEP = 4


@dataclass
class PseudoLabelMask:
    onehot: np.ndarray  # H x W x L, all-zero rows are ignored pixels

    @property
    def coverage(self) -> float:
        return float(self.onehot.any(axis=-1).mean()) if self.onehot.size else 0.0

    def index_map(self) -> np.ndarray:
        """0/1 class ids with IGNORE for unlabeled pixels (the PNG dump encoding)."""
        out = np.full(self.onehot.shape[:2], IGNORE, dtype=np.uint8)
        labeled = self.onehot.any(axis=-1)
        out[labeled] = self.onehot.argmax(axis=-1)[labeled]
        return out

    @classmethod
    def from_index_map(cls, idx: np.ndarray, n_classes: int = 2) -> "PseudoLabelMask":
        idx = np.asarray(idx)
        onehot = np.zeros(idx.shape + (n_classes,), dtype=np.uint8)
        for l in range(n_classes):
            onehot[..., l] = idx == l
        return cls(onehot)

    def save_png(self, path) -> None:
        Image.fromarray(self.index_map()).save(path)


@dataclass
class EntropyThresholds:
    v: np.ndarray
    K: int


def normalized_entropy(p) -> float:
    """Entropy of a probability vector divided by log(L); 0 log 0 is 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"expected a probability vector with >= 2 entries, got shape {p.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"not a probability vector: {p}")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / math.log(p.size))


def entropy_map(prob: np.ndarray) -> np.ndarray:
    """Per-pixel normalized entropy of an L x H x W probability map."""
    prob = np.asarray(prob, dtype=np.float64)
    L = prob.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(prob > 0, prob * np.log(prob), 0.0)
    return -t.sum(axis=0) / math.log(L)


def _decile(values: np.ndarray, K: int) -> float:
    # smallest v with #(E < v) >= ceil(K n / 10), i.e. the K-th decile of the population
    n = values.size
    k = int(math.ceil(K * n / 10.0))
    if k >= n:
        return math.inf
    return float(np.partition(values, k)[k])


def compute_thresholds(prob_maps, K: int = 8, n_classes: int = 2) -> EntropyThresholds:
    """Per-class K-th decile of prediction entropy over the whole target set.

    Every 4th pixel is used when the population exceeds 10^7 pixels. A class no
    pixel predicts gets an infinite threshold.
    """
    if not 1 <= K <= 9:
        raise ValueError(f"K must be in 1..9, got {K}")
    maps = [np.asarray(p, dtype=np.float64) for p in prob_maps]
    total = sum(m[0].size for m in maps)
    step = SUBSAMPLE_STEP if total > SUBSAMPLE_ABOVE else 1
    pops: list[list[np.ndarray]] = [[] for _ in range(n_classes)]
    for m in maps:
        ent = entropy_map(m).ravel()[::step]
        arg = m.argmax(axis=0).ravel()[::step]
        for l in range(n_classes):
            pops[l].append(ent[arg == l])
    v = np.empty(n_classes)
    for l in range(n_classes):
        pop = np.concatenate(pops[l]) if pops[l] else np.empty(0)
        if pop.size == 0:
            log.warning("no pixel predicts class %d; its pseudo-label threshold is +inf", l)
            v[l] = math.inf
        else:
            v[l] = _decile(pop, K)
    return EntropyThresholds(v, K)


def generate_pseudo_labels(prob_map: np.ndarray, thresholds: EntropyThresholds) -> PseudoLabelMask:
    prob = np.asarray(prob_map, dtype=np.float64)
    L = prob.shape[0]
    ent = entropy_map(prob)
    arg = prob.argmax(axis=0)
    keep = ent < thresholds.v[arg]
    onehot = np.zeros(prob.shape[1:] + (L,), dtype=np.uint8)
    for l in range(L):
        onehot[..., l] = keep & (arg == l)
    return PseudoLabelMask(onehot)
