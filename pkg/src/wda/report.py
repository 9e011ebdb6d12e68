"""Loss curves and metric bars for a run directory (JSONL logs + JSON reports)."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("L_seg", "L_adv", "L_det", "L_cons", "L_D", "L_count")
METRICS = ("dice", "aji", "pq")


def read_log(path) -> dict[str, np.ndarray]:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    keys = [k for k in LOSS_KEYS if rows and k in rows[0]]
    return {"iter": np.array([r["iter"] for r in rows])} | {k: np.array([r[k] for r in rows]) for k in keys}


def _smooth(y: np.ndarray, k: int = 25) -> np.ndarray:
    if len(y) < 2 * k:
        return y
    return np.convolve(y, np.ones(k) / k, mode="valid")


def plot_losses(log_path, out_path) -> Path:
    d = read_log(log_path)
    keys = [k for k in LOSS_KEYS if k in d and np.any(d[k])]
    fig, axes = plt.subplots(len(keys), 1, figsize=(6, 1.8 * max(1, len(keys))), sharex=True, squeeze=False)
    for ax, k in zip(axes[:, 0], keys):
        y = _smooth(d[k])
        ax.plot(d["iter"][len(d["iter"]) - len(y):], y, lw=1)
        ax.set_ylabel(k)
    axes[-1, 0].set_xlabel("iteration")
    fig.suptitle(Path(log_path).stem)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_metrics(reports: dict[str, dict], out_path) -> Path:
    names = list(reports)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names) + 2), 3))
    for i, m in enumerate(METRICS):
        ax.bar(x + (i - 1) * 0.27, [reports[n][m] for n in names], width=0.27, label=m)
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.legend(ncol=3, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def make_report(run_dir, out_dir=None, fmt: str = "png") -> list[Path]:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    for log in sorted(run_dir.glob("*_log.jsonl")):
        made.append(plot_losses(log, out_dir / f"{log.stem}.{fmt}"))
    reports = {}
    for p in sorted(run_dir.glob("*.json")):
        d = json.loads(p.read_text())
        if all(m in d for m in METRICS):
            reports[p.stem] = d
    if reports:
        made.append(plot_metrics(reports, out_dir / f"metrics.{fmt}"))
    return made
