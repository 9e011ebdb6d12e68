"""Desk-scale synthetic benchmark: the adaptation ladder, counting transfer and annotation studies.

Every run is cached as JSON keyed by a hash of its configuration and of the
package source, so tests and reports can reuse finished runs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from pathlib import Path

import numpy as np

from . import train as T
from .config import RunConfig, desk_preset
from .data import DomainSample, resample_points, synth_domain_pair
from .evaluate import evaluate, true_count

log = logging.getLogger(__name__)

PKG_DIR = Path(__file__).resolve().parent
DEFAULT_ROOT = Path.home() / ".cache" / "wda-bench"

ADV_ONLY = {"losses.pseudo": False, "losses.detection": False, "losses.counting": False,
            "augment.cp_aug": False}
NO_CONS = {"losses.counting": False}


# modules that cannot change a benchmark number
_NOT_HASHED = {"cli.py", "report.py", "__init__.py"}


def code_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(PKG_DIR.glob("*.py")):
        if p.name in _NOT_HASHED:
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Cache:
    def __init__(self, root=DEFAULT_ROOT):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.code = code_hash()

    def path(self, kind: str, *parts) -> Path:
        return self.root / f"{kind}-{_key(self.code, *parts)}"

    def get(self, kind, *parts):
        p = self.path(kind, *parts).with_suffix(".json")
        return json.loads(p.read_text()) if p.exists() else None

    def put(self, kind, value, *parts):
        p = self.path(kind, *parts).with_suffix(".json")
        p.write_text(json.dumps(value, indent=1, sort_keys=True))
        return value


def supervised_target(samples) -> list[DomainSample]:
    return [DomainSample(s.image, mask=s.truth_mask, points=s.truth_points, domain=s.domain, id=s.id)
            for s in samples]


def _summary(report, counts) -> dict:
    err = [abs(c["count_hat"] - c["count_true"]) for c in counts]
    return {"dice": report.dice, "aji": report.aji, "pq": report.pq, "sq": report.sq, "dq": report.dq,
            "count_abs_err_median": float(np.median(err)), "count_abs_err_mean": float(np.mean(err))}


class SeedRun:
    """Phases of the benchmark for one seed, each computed lazily and cached."""

    def __init__(self, cfg: RunConfig, cache: Cache):
        self.cfg = cfg
        self.cache = cache
        self.fp = cfg.fingerprint()
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = synth_domain_pair(self.cfg.synth, self.cfg.seed)
        return self._data

    @property
    def n_val(self) -> int:
        return max(1, int(len(self.data[0]) * self.cfg.data.source_val_fraction))

    @property
    def source_train(self):
        return self.data[0][self.n_val:]

    @property
    def source_val(self):
        return self.data[0][:self.n_val]

    def _ckpt(self, name, fp=None) -> Path:
        d = self.cache.path("ckpt", fp or self.fp)
        d.mkdir(parents=True, exist_ok=True)
        return d / f"{name}.pt"

    def source_ckpt(self) -> Path:
        p = self._ckpt("source")
        if not p.exists():
            T.train_source(self.cfg, self.source_train, p.parent, name="source")
        return p

    def counter_ckpt(self) -> Path:
        p = self._ckpt("counter")
        if not p.exists():
            T.train_counter(self.cfg, self.source_train, self.source_ckpt(), p.parent, name="counter")
        return p

    def eval_g1(self, ckpt, samples, tag):
        rep, counts = evaluate(T.load_g1(ckpt), samples, self.cfg, out_dir=ckpt.parent, tag=tag)
        return _summary(rep, counts)

    def noadapt(self) -> dict:
        got = self.cache.get("noadapt", self.fp)
        if got is None:
            _, _, test = self.data
            ck = self.source_ckpt()
            got = {"target": self.eval_g1(ck, test, "noadapt_target"),
                   # held-out source slice: the domain-gap reference
                   "source": self.eval_g1(ck, self.source_val, "noadapt_source")}
            self.cache.put("noadapt", got, self.fp)
        return got

    def counter(self) -> dict:
        got = self.cache.get("counter", self.fp)
        if got is None:
            src_val = synth_domain_pair(self.cfg.synth, self.cfg.seed + 10_000)[0][:20]
            _, train, test = self.data
            g2 = T.load_g2(self.counter_ckpt())
            out = {}
            for name, samples in (("source_val", src_val), ("target_test", test)):
                _, counts = T.counter_density(g2, [s.image for s in samples], self.cfg)
                truth = np.array([true_count(s) for s in samples])
                ms = np.array([c.mean() for c in counts])
                single = np.array([c[list(self.cfg.counter.scales).index(1.0)] for c in counts])
                out[name] = {"mae": float(np.abs(ms - truth).mean()),
                             "mae_single_scale": float(np.abs(single - truth).mean()),
                             "multiscale_delta": float(np.abs(ms - single).mean())}
            log.info("counter: %s", out)
            got = self.cache.put("counter", out, self.fp)
        return got

    def adapt(self, tag: str, overrides: dict | None = None, target_train=None, key_extra=None) -> dict:
        cfg = self.cfg.replace(**(overrides or {}))
        fp = cfg.fingerprint()
        got = self.cache.get("adapt", fp, tag, key_extra)
        if got is None:
            _, train, test = self.data
            train = target_train if target_train is not None else train
            g2 = self.counter_ckpt() if cfg.losses.counting else None
            out_dir = self._ckpt(tag, _key(fp, key_extra)).parent
            t0 = time.time()
            ck = T.adapt(cfg, self.source_train, train, self.source_ckpt(), g2, out_dir, name=tag)
            got = self.eval_g1(ck, test, tag)
            got["seconds"] = time.time() - t0
            self.cache.put("adapt", got, fp, tag, key_extra)
        return got

    def adapt_ckpt(self, tag: str, overrides: dict | None = None, key_extra=None) -> Path:
        fp = self.cfg.replace(**(overrides or {})).fingerprint()
        return self._ckpt(tag, _key(fp, key_extra))

    def filter_onoff(self) -> dict:
        """Full model on the target test split with and without peak-guided filtering."""
        got = self.cache.get("filter", self.fp)
        if got is None:
            on = self.adapt("full")
            ck = self.adapt_ckpt("full")
            _, _, test = self.data
            cfg_off = self.cfg.replace(**{"eval.filter": False})
            rep, counts = evaluate(T.load_g1(ck), test, cfg_off, out_dir=ck.parent, tag="full_nofilter")
            got = self.cache.put("filter", {"on": on, "off": _summary(rep, counts)}, self.fp)
        return got

    def supervised(self) -> dict:
        got = self.cache.get("supervised", self.fp)
        if got is None:
            _, train, test = self.data
            p = self._ckpt("supervised")
            cfg = self.cfg.replace(**{"optim.source_iters": self.cfg.optim.source_iters * 2})
            T.train_source(cfg, supervised_target(train), p.parent, name="supervised")
            got = self.cache.put("supervised", self.eval_g1(p, test, "supervised"), self.fp)
        return got


def seed_cfg(base: RunConfig, seed: int) -> RunConfig:
    return base.replace(seed=seed)


def ladder(base: RunConfig | None = None, seeds=(0, 1, 2), cache: Cache | None = None) -> dict:
    """NoAdapt, adversarial-only, full adaptation and the supervised target model per seed."""
    base = base or desk_preset()
    cache = cache or Cache()
    rows = {}
    for s in seeds:
        run = SeedRun(seed_cfg(base, s), cache)
        rows[s] = {
            "noadapt": run.noadapt(),
            "adv_only": run.adapt("adv_only", ADV_ONLY),
            "full": run.adapt("full"),
            "supervised": run.supervised(),
        }
    target = {s: {k: (v["target"] if k == "noadapt" else v) for k, v in rows[s].items()} for s in seeds}
    med = {k: {m: statistics.median(target[s][k][m] for s in seeds) for m in ("dice", "aji", "pq")}
           for k in ("noadapt", "adv_only", "full", "supervised")}
    return {"per_seed": rows, "median": med}


def counting_study(base: RunConfig | None = None, seeds=(0, 1, 2), cache: Cache | None = None) -> dict:
    base = base or desk_preset()
    cache = cache or Cache()
    rows = {}
    for s in seeds:
        run = SeedRun(seed_cfg(base, s), cache)
        rows[s] = {"counter": run.counter(), "full": run.adapt("full"),
                   "no_cons": run.adapt("no_cons", NO_CONS)}
    return rows


def ratio_study(base: RunConfig | None = None, ratios=(0.05, 0.15, 0.5, 1.0), seed: int = 0,
                cache: Cache | None = None) -> dict:
    base = base or desk_preset()
    cache = cache or Cache()
    run = SeedRun(seed_cfg(base, seed), cache)
    out = {}
    for r in ratios:
        # same point seed for every ratio, so sparser sets are subsets of denser ones
        train = resample_points(run.data[1], r, seed=seed)
        out[r] = run.adapt(f"ratio_{r}", target_train=train, key_extra=("ratio", r))
    return out


def filter_study(base: RunConfig | None = None, seed: int = 0, cache: Cache | None = None) -> dict:
    base = base or desk_preset()
    return SeedRun(seed_cfg(base, seed), cache or Cache()).filter_onoff()


def resampling_study(base: RunConfig | None = None, n: int = 5, ratio: float = 0.15, seed: int = 0,
                     cache: Cache | None = None) -> dict:
    base = base or desk_preset()
    cache = cache or Cache()
    run = SeedRun(seed_cfg(base, seed), cache)
    out = {}
    for k in range(n):
        train = resample_points(run.data[1], ratio, seed=1000 + k)
        out[k] = run.adapt(f"resample_{k}", target_train=train, key_extra=("resample", ratio, k))
    return out
