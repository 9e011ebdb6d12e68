"""G1 inference (sliding window), peak-guided filtering and metric reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import EvalConfig, RunConfig
from .data import ConfigError, InstanceLabelMap
from .heatmaps import extract_peaks
from .metrics import EvalReport, evaluate_masks, filter_segmentation, scaled_min_area
from .networks import G1, predict_g1, window_starts

GREEN, RED, BLUE = (0, 255, 0), (255, 0, 0), (0, 0, 255)


@dataclass
class Prediction:
    fg_prob: np.ndarray
    heat: np.ndarray
    count: float


@torch.no_grad()
def sliding_predict(g1: G1, image: np.ndarray, tile_hw=(512, 512), overlap: int = 64) -> Prediction:
    """Tiles of ``tile_hw`` with ``overlap`` pixels shared; overlapping outputs are averaged."""
    g1.eval()
    H, W = image.shape
    th, tw = min(tile_hw[0], H), min(tile_hw[1], W)
    fg = np.zeros((H, W))
    heat = np.zeros((H, W))
    cnt = np.zeros((H, W))
    hits = np.zeros((H, W))
    for r0 in window_starts(H, th, max(1, th - overlap)):
        for c0 in window_starts(W, tw, max(1, tw - overlap)):
            x = torch.from_numpy(np.ascontiguousarray(image[r0:r0 + th, c0:c0 + tw], dtype=np.float32))
            out = predict_g1(g1, x[None, None])
            sl = (slice(r0, r0 + th), slice(c0, c0 + tw))
            fg[sl] += out.seg_prob[0, 1].double().numpy()
            heat[sl] += out.det_heat[0, 0].double().numpy()
            cnt[sl] += out.count_map[0, 0].double().numpy()
            hits[sl] += 1
    return Prediction(fg / hits, heat / hits, float((cnt / hits).sum()))


def postprocess(pred: Prediction, ecfg: EvalConfig, sigma2: float = 2.0):
    seg = (pred.fg_prob > 0.5).astype(np.uint8)
    peaks = extract_peaks(pred.heat, ecfg.nms_radius or 2 * sigma2, ecfg.keep_fraction)
    if ecfg.filter:
        seg = filter_segmentation(seg, peaks, scaled_min_area(ecfg.min_area, seg.shape))
    return seg, peaks


def ground_truth(sample) -> np.ndarray:
    gt = sample.mask if sample.mask is not None else sample.truth_mask
    if gt is None:
        raise ConfigError(f"sample {sample.id!r} has no dense ground truth")
    return gt


def true_count(sample) -> int:
    return InstanceLabelMap.from_mask(ground_truth(sample)).count


def overlay(pred_mask, truth_mask) -> np.ndarray:
    """RGB instance overlay: matched (IoU > 0.5) predictions green, unmatched red, missed truth blue."""
    S = InstanceLabelMap.from_mask(pred_mask).labels
    G = InstanceLabelMap.from_mask(truth_mask).labels
    rgb = np.zeros(S.shape + (3,), dtype=np.uint8)
    matched_s, matched_g = set(), set()
    for k in range(1, int(S.max()) + 1):
        sk = S == k
        for j in np.unique(G[sk]):
            if j == 0:
                continue
            gj = G == j
            if (sk & gj).sum() * 2 > (sk | gj).sum():  # IoU > 0.5
                matched_s.add(k)
                matched_g.add(int(j))
    for j in range(1, int(G.max()) + 1):
        if j not in matched_g:
            rgb[G == j] = BLUE
    for k in range(1, int(S.max()) + 1):
        rgb[S == k] = GREEN if k in matched_s else RED
    return rgb


def evaluate(g1: G1, samples, cfg: RunConfig, out_dir=None, tag: str = "eval"):
    """Evaluate a G1 on densely annotated samples.

    Returns the EvalReport and per-image count rows (predicted count, number of
    detected peaks, true count).
    """
    ec = cfg.eval
    preds, truths, ids, counts = [], [], [], []
    for s in samples:
        p = sliding_predict(g1, s.image, ec.tile_hw, ec.overlap)
        seg, peaks = postprocess(p, ec, cfg.losses.sigma2)
        preds.append(seg)
        truths.append(ground_truth(s))
        ids.append(s.id)
        counts.append({"id": s.id, "count_hat": p.count, "peaks": len(peaks), "count_true": true_count(s)})
    report = evaluate_masks(preds, truths, ids)
    if out_dir is not None:
        write_report(report, out_dir, tag, cfg, counts)
        if ec.overlays:
            od = Path(out_dir) / f"{tag}_overlays"
            od.mkdir(parents=True, exist_ok=True)
            for i, s, g in zip(ids, preds, truths):
                Image.fromarray(overlay(s, g)).save(od / f"{i}.png")
    return report, counts


def report_json(report: EvalReport, cfg: RunConfig | None = None, counts=None) -> str:
    d = report.to_dict()
    if counts is not None:
        d["counts"] = counts
    if cfg is not None:
        d["config"] = cfg.to_dict()
    return json.dumps(d, indent=1, sort_keys=True)


def write_report(report: EvalReport, out_dir, tag: str, cfg=None, counts=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{tag}.json"
    path.write_text(report_json(report, cfg, counts))
    with open(out_dir / f"{tag}.csv", "w", newline="") as fh:
        rows = [asdict(r) for r in report.per_image]
        cols = list(rows[0]) if rows else ["id"]
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    return path
