"""Command-line entry point: ``wda <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import bench as B
from . import train as T
from .config import PRESETS, RunConfig, dump_config, load_config, parse_override
from .data import (SOURCE, TARGET, ConfigError, LoadError, ShapeError, SparsePointBudget, centers_from_mask,
                   load_stack, sample_sparse_points, save_stack, synth_domain_pair, write_points_csv)
from .evaluate import evaluate, report_json
from .networks import (BuildError, CheckpointMismatch, build_discriminator, build_g1, build_g2, param_count,
                       predict_g1)
from .sar import refine_source_mask

log = logging.getLogger("wda")


# ---------------------------------------------------------------------------
# helpers


def _cfg(args) -> RunConfig:
    overrides = dict(parse_override(s) for s in (args.set or []))
    cfg = load_config(args.config, args.preset, overrides)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _splits(cfg: RunConfig):
    """(source, target_train, target_test) from configured paths, else synthetic data."""
    d = cfg.data
    if d.source or d.target_train or d.target_test:
        def get(path, domain):
            return load_stack(path, d.layout, domain) if path else []
        return get(d.source, SOURCE), get(d.target_train, TARGET), get(d.target_test, TARGET)
    return synth_domain_pair(cfg.synth, cfg.seed)


def _source_train(cfg: RunConfig, source):
    """Source samples used for training (the held-out validation slice removed)."""
    n_val = int(len(source) * cfg.data.source_val_fraction)
    return source[n_val:] if len(source) - n_val >= 1 else source


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = _cfg(args)
    out = _out(args)
    source, train, test = synth_domain_pair(cfg.synth, cfg.seed)
    save_stack(source, out / "source", args.layout)
    save_stack(train, out / "target_train", args.layout)
    # withheld dense truth of the sparsely annotated split, for evaluation only
    save_stack([replace(s, mask=s.truth_mask, points=s.truth_points) for s in train],
               out / "target_train_truth", args.layout)
    save_stack(test, out / "target_test", args.layout)
    dump_config(cfg, out / "config.yaml")
    print(f"wrote {len(source)} source, {len(train)} target-train, {len(test)} target-test images to {out}")


def cmd_sample_points(args):
    samples = load_stack(args.data, args.layout)
    budget_seeds = np.random.SeedSequence(args.seed).generate_state(len(samples))
    pts = []
    for s, sd in zip(samples, budget_seeds):
        if s.mask is not None:
            full = centers_from_mask(s.mask)
        elif s.points is not None:
            full = s.points
        else:
            raise ConfigError(f"slice {s.id} has neither a mask nor points to sample from")
        pts.append(sample_sparse_points(full, SparsePointBudget(args.ratio, int(sd))))
    out = Path(args.out or Path(args.data) / "points.csv")
    write_points_csv(out, pts)
    print(f"{sum(map(len, pts))} points over {len(pts)} slices -> {out}")


def cmd_refine(args):
    cfg = _cfg(args)
    root = Path(args.data)
    samples = load_stack(root, args.layout, SOURCE)
    mdir = root / "masks"
    n = 0
    for s in samples:
        if s.mask is None:
            continue
        m = refine_source_mask(s.image, s.mask, cfg.sar.params)
        Image.fromarray((m * 255).astype(np.uint8)).save(mdir / f"{s.id}_sar.png")
        n += 1
    print(f"refined {n} masks in {mdir} (suffix _sar)")


def cmd_train_source(args):
    cfg = _cfg(args)
    source = _source_train(cfg, _splits(cfg)[0])
    if cfg.sar.enabled:
        source = [replace(s, mask=refine_source_mask(s.image, s.mask, cfg.sar.params)) for s in source]
    p = T.train_source(cfg, source, _out(args), args.name, resume=args.resume)
    print(p)


def cmd_train_count(args):
    cfg = _cfg(args)
    source = _source_train(cfg, _splits(cfg)[0])
    p = T.train_counter(cfg, source, args.init, _out(args), args.name)
    print(p)


def cmd_adapt(args):
    cfg = _cfg(args)
    source, train, _ = _splits(cfg)
    p = T.adapt(cfg, _source_train(cfg, source), train, args.init, args.counter, _out(args), args.name,
                resume=args.resume)
    print(p)


def cmd_evaluate(args):
    cfg = _cfg(args)
    source, train, test = _splits(cfg)
    split = {"source": source, "target_train": train, "target_test": test}[args.split]
    if args.no_filter:
        cfg = cfg.replace(**{"eval.filter": False})
    if args.overlays:
        cfg = cfg.replace(**{"eval.overlays": True})
    report, counts = evaluate(T.load_g1(args.ckpt), split, cfg, _out(args), args.tag)
    print(report_json(report))


def cmd_model_info(args):
    cfg = _cfg(args)
    bb = cfg.model.backbone
    h, w = cfg.optim.patch_hw
    g1, g2, d = build_g1(bb).eval(), build_g2(bb).eval(), build_discriminator(cfg.model.discriminator).eval()
    x = torch.zeros(1, bb.in_channels, h, w)
    with torch.no_grad():
        o = predict_g1(g1, x)
        dd = d(o.seg_prob)
        t = g2(x)
    info = {
        "backbone": {"depth": bb.depth, "base_channels": bb.base_channels, "block": bb.block},
        "params": {"g1": param_count(g1), "g2": param_count(g2), "discriminator": param_count(d)},
        "shapes": {"input": list(x.shape), "seg_prob": list(o.seg_prob.shape), "det_heat": list(o.det_heat.shape),
                   "count_hat": list(o.count_hat.shape), "g2_count": list(t.shape),
                   "discriminator": list(dd.shape)},
    }
    print(json.dumps(info, indent=1))


def cmd_report(args):
    from .report import make_report
    for p in make_report(args.run, args.out, args.format):
        print(p)


def cmd_bench(args):
    cfg = _cfg(args)
    cache = B.Cache(args.cache)
    seeds = tuple(args.seeds)
    out = {}
    studies = args.study or ["ladder", "counting", "ratio", "resampling", "filter"]
    if "ladder" in studies:
        out["ladder"] = B.ladder(cfg, seeds, cache)
    if "counting" in studies:
        out["counting"] = B.counting_study(cfg, seeds, cache)
    if "ratio" in studies:
        out["ratio"] = B.ratio_study(cfg, seed=seeds[0], cache=cache)
    if "resampling" in studies:
        out["resampling"] = B.resampling_study(cfg, seed=seeds[0], cache=cache)
    if "filter" in studies:
        out["filter"] = B.filter_study(cfg, seed=seeds[0], cache=cache)
    print(json.dumps(out, indent=1, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wda", description="Weakly supervised domain adaptation for "
                                 "instance-dense segmentation with sparse target points.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. optim.max_iters=100")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic two-domain dataset"))
    p.add_argument("--layout", default="png-slices", choices=["png-slices", "multipage-tiff"])
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("sample-points", help="draw a sparse center-point annotation from dense masks")
    p.add_argument("--data", required=True)
    p.add_argument("--layout", default="png-slices", choices=["png-slices", "multipage-tiff"])
    p.add_argument("--ratio", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="points.csv path (default: <data>/points.csv)")
    p.set_defaults(fn=cmd_sample_points)

    p = common(sub.add_parser("refine-source-labels", help="snap source masks to image edges"), out=False)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", default="png-slices", choices=["png-slices", "multipage-tiff"])
    p.set_defaults(fn=cmd_refine)

    p = common(sub.add_parser("train-source", help="train G1 on the source domain"))
    p.add_argument("--name", default="source")
    p.add_argument("--resume")
    p.set_defaults(fn=cmd_train_source)

    p = common(sub.add_parser("train-count", help="train the source counter G2"))
    p.add_argument("--init", required=True, help="source G1 checkpoint")
    p.add_argument("--name", default="counter")
    p.set_defaults(fn=cmd_train_count)

    p = common(sub.add_parser("adapt", help="adapt G1 to the target domain"))
    p.add_argument("--init", required=True, help="source G1 checkpoint")
    p.add_argument("--counter", help="frozen G2 checkpoint (required unless losses.counting=false)")
    p.add_argument("--name", default="adapt")
    p.add_argument("--resume")
    p.set_defaults(fn=cmd_adapt)

    p = common(sub.add_parser("evaluate", help="Dice/AJI/PQ report of a G1 checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="target_test", choices=["source", "target_train", "target_test"])
    p.add_argument("--tag", default="eval")
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--overlays", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = common(sub.add_parser("model-info", help="parameter counts and output shapes"), out=False)
    p.set_defaults(fn=cmd_model_info)

    p = sub.add_parser("report", help="plot loss curves and metric bars of a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--format", default="png", choices=["png", "svg"])
    p.set_defaults(fn=cmd_report)

    p = common(sub.add_parser("bench", help="run (or read cached) desk benchmark studies"), out=False)
    p.add_argument("--cache", default=str(B.DEFAULT_ROOT))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--study", action="append",
                   choices=["ladder", "counting", "ratio", "resampling", "filter"])
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        args.fn(args)
    except (ConfigError, LoadError, ShapeError, BuildError, CheckpointMismatch, T.TrainingAborted) as e:
        print(f"wda {args.cmd}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
