"""Runnable ablation harness: schedule sweep, depth sweep, source-size sweep,
sensor ablation, and single-vs-multi source comparison, on synthetic domains
or user-supplied rasters.

Every runner emits ReportRows (experiment, seed, condition, iteration, metric,
value) and can write them as report.csv plus an aggregated summary.json.
Identical config + seeds reproduce byte-identical CSV output.
"""
from __future__ import annotations

import csv
import json
from dataclasses import MISSING, dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthConfig, load_manifest, normalize_bands, synth_generate, with_split
from .errors import ConfigError
from .network import (CrossDomainSpec, NetworkSpec, build_backbone,
                      build_cross_domain, transfer_shared)
from .trainer import TrainSchedule, evaluate, train_cross_domain, train_single, two_step_train

EXPERIMENT_IDS = (
    "schedule_sweep",
    "depth_sweep",
    "source_size",
    "sensor_ablation",
    "single_vs_multi",
    "pretrain",
    "finetune",
)

CSV_HEADER = ("experiment", "seed", "condition", "iteration", "metric", "value")


@dataclass
class ReportRow:
    experiment: str
    seed: int
    condition: str
    iteration: int
    metric: str
    value: float


# --- config parsing -------------------------------------------------------

def _kwargs(d, cls, what):
    allowed = {f.name for f in fields(cls)}
    bad = set(d) - allowed
    if bad:
        raise ConfigError(f"unknown {what} keys: {sorted(bad)} (allowed: {sorted(allowed)})")
    required = {f.name for f in fields(cls)
                if f.default is MISSING and f.default_factory is MISSING}
    missing = required - set(d)
    if missing:
        raise ConfigError(f"missing {what} keys: {sorted(missing)}")
    return dict(d)


def schedule_from_config(d):
    return TrainSchedule(**_kwargs(d, TrainSchedule, "schedule"))


def dataset_from_config(d, normalize=True):
    """Build a DomainDataset from {"synth": {...}} or {"manifest": path}."""
    if "synth" in d:
        ds = synth_generate(SynthConfig(**_kwargs(d["synth"], SynthConfig, "synth")))
    elif "manifest" in d:
        ds = load_manifest(d["manifest"])
    else:
        raise ConfigError("dataset config needs a 'synth' or 'manifest' key")
    return normalize_bands(ds) if normalize else ds


_NETWORK_KEYS = ("patch", "filters", "residual_modules", "dropout_rate")


def _network_kwargs(cfg):
    net = cfg.get("network", {})
    bad = set(net) - set(_NETWORK_KEYS)
    if bad:
        raise ConfigError(f"unknown network keys: {sorted(bad)} (allowed: {_NETWORK_KEYS})")
    return dict(net)


def _spec_for(ds, net_kwargs):
    return NetworkSpec(bands=ds.cube.bands, classes=ds.classes, **net_kwargs)


class _Harness:
    """Shared plumbing for one experiment config."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.experiment = cfg.get("experiment")
        self.seeds = list(cfg.get("seeds", []))
        if not self.seeds:
            raise ConfigError("config needs a non-empty 'seeds' list")
        self.split_seed = int(cfg.get("split_seed", 1234))
        self.eval_every = int(cfg.get("eval_every", 100))
        self.augment = bool(cfg.get("augment", True))
        self.normalize = bool(cfg.get("normalize", True))
        self.net_kwargs = _network_kwargs(cfg)
        self._sources = None
        self._target = None

    @property
    def sources(self):
        if self._sources is None:
            cfgs = self.cfg.get("sources")
            if not cfgs:
                raise ConfigError("config needs a 'sources' list")
            self._sources = [dataset_from_config(c, self.normalize) for c in cfgs]
        return self._sources

    @property
    def target(self):
        if self._target is None:
            if "target" not in self.cfg:
                raise ConfigError("config needs a 'target' dataset")
            ds = dataset_from_config(self.cfg["target"], normalize=False)
            n = self.cfg.get("train_per_class")
            if n is None:
                raise ConfigError("config needs 'train_per_class' for the target split")
            ds = with_split(ds, int(n), np.random.default_rng(self.split_seed))
            self._target = normalize_bands(ds) if self.normalize else ds
        return self._target

    def pretrain(self, sources, schedule_cfg=None, seed=None, depth=None):
        """Cross-domain pre-training over the given source datasets."""
        seed = self.cfg.get("pretrain_seed", self.seeds[0]) if seed is None else seed
        net_kwargs = dict(self.net_kwargs)
        if depth is not None:
            net_kwargs["residual_modules"] = depth
        specs = CrossDomainSpec([_spec_for(ds, net_kwargs) for ds in sources])
        rng = np.random.default_rng(seed)
        cdn = build_cross_domain(specs, rng)
        if "two_step" in self.cfg:
            ts = self.cfg["two_step"]
            s1 = schedule_from_config(ts["step1"])
            s2 = schedule_from_config(ts["step2"])
            cdn, m1, m2 = two_step_train(cdn, sources, s1, s2, rng,
                                         eval_every=self.eval_every, augment=self.augment)
            return cdn, [m1, m2]
        sched_cfg = schedule_cfg if schedule_cfg is not None else self.cfg.get("pretrain_schedule")
        if sched_cfg is None:
            raise ConfigError("config needs 'pretrain_schedule' (or 'two_step')")
        schedule = schedule_from_config(sched_cfg)
        cdn, metrics = train_cross_domain(cdn, sources, schedule, rng,
                                          eval_every=self.eval_every, augment=self.augment)
        return cdn, [metrics]

    def target_run(self, schedule, seed, pretrained=None, depth=None):
        """Train on the target from scratch or from a pre-trained shared store;
        returns (metrics, final_accuracy)."""
        net_kwargs = dict(self.net_kwargs)
        if depth is not None:
            net_kwargs["residual_modules"] = depth
        spec = _spec_for(self.target, net_kwargs)
        rng = np.random.default_rng(seed)
        if pretrained is None:
            net = build_backbone(spec, rng)
        else:
            net = transfer_shared(pretrained, spec, rng)
        net, metrics = train_single(net, self.target, schedule, rng,
                                    eval_every=self.eval_every, augment=self.augment)
        return metrics, evaluate(net, self.target, "test")

    def curve_rows(self, seed, condition, metrics, final_acc, extra=None):
        rows = []
        final_iter = 0
        for r in metrics.rows:
            final_iter = max(final_iter, r.iteration)
            rows.append(ReportRow(self.experiment, seed, condition, r.iteration,
                                  "train_loss", float(r.loss)))
            if r.accuracy is not None:
                rows.append(ReportRow(self.experiment, seed, condition, r.iteration,
                                      "test_accuracy", float(r.accuracy)))
        rows.append(ReportRow(self.experiment, seed, condition, final_iter,
                              "final_accuracy", float(final_acc)))
        for metric, value in (extra or {}).items():
            rows.append(ReportRow(self.experiment, seed, condition, final_iter,
                                  metric, float(value)))
        return rows


def _load_pretrained(cfg_path):
    path = Path(cfg_path)
    if not path.exists():
        raise ConfigError(f"pre-trained checkpoint '{path}' does not exist")
    ckpt = load_checkpoint(path)
    if ckpt.kind != "cross":
        raise ConfigError(f"checkpoint '{path}' is not a cross-domain checkpoint")
    return ckpt.network


# --- experiment runners ---------------------------------------------------

def run_schedule_sweep(cfg, out_dir=None):
    """Scratch vs fine-tuned target training across step-size/iteration pairs."""
    h = _Harness(cfg)
    schedules = cfg.get("schedules")
    if not schedules:
        raise ConfigError("schedule_sweep needs a 'schedules' list")
    base = dict(cfg.get("schedule", {}))
    if "checkpoint" in cfg:
        pretrained = _load_pretrained(cfg["checkpoint"])
    else:
        pretrained, _ = h.pretrain(h.sources)
    rows = []
    for sched_cfg in schedules:
        label = sched_cfg.get("label") or f"{sched_cfg['step_size']}/{sched_cfg['max_iter']}"
        merged = {**base, **{k: v for k, v in sched_cfg.items() if k != "label"}}
        schedule = schedule_from_config(merged)
        for seed in h.seeds:
            for condition, pre in ((f"{label}/pretrain", pretrained),
                                   (f"{label}/scratch", None)):
                metrics, acc = h.target_run(schedule, seed, pretrained=pre)
                rows += h.curve_rows(seed, condition, metrics, acc)
    return _finish(rows, cfg, out_dir)


def run_depth_sweep(cfg, out_dir=None):
    """Scratch vs fine-tuned accuracy as residual modules are added; each
    depth pre-trains its own cross-domain network."""
    h = _Harness(cfg)
    depths = cfg.get("depths", [2, 3, 4, 5])
    schedule = schedule_from_config(cfg["schedule"])
    rows = []
    for depth in depths:
        label = f"{5 + 2 * depth}-layer"
        pretrained, _ = h.pretrain(h.sources, depth=depth)
        for seed in h.seeds:
            for condition, pre in ((f"{label}/pretrain", pretrained),
                                   (f"{label}/scratch", None)):
                metrics, acc = h.target_run(schedule, seed, pretrained=pre, depth=depth)
                rows += h.curve_rows(seed, condition, metrics, acc)
    return _finish(rows, cfg, out_dir)


def _combo_sources(h, combo):
    try:
        return [h.sources[i] for i in combo["sources"]]
    except IndexError:
        raise ConfigError(
            f"condition '{combo.get('label')}' references a source index outside "
            f"the {len(h.sources)}-entry 'sources' list"
        ) from None


def run_source_size(cfg, out_dir=None):
    """Fine-tuned accuracy against total source pixel count across source
    combinations; optional scratch baseline."""
    h = _Harness(cfg)
    combos = cfg.get("combinations")
    if not combos or len(combos) < 2:
        raise ConfigError("source_size needs >= 2 'combinations'")
    schedule = schedule_from_config(cfg["schedule"])
    rows = []
    for combo in combos:
        subset = _combo_sources(h, combo)
        pixels = sum(ds.labeled_count for ds in subset)
        pretrained, _ = h.pretrain(subset)
        for seed in h.seeds:
            metrics, acc = h.target_run(schedule, seed, pretrained=pretrained)
            rows += h.curve_rows(seed, combo["label"], metrics, acc,
                                 extra={"source_pixels": pixels})
    if cfg.get("include_scratch", True):
        for seed in h.seeds:
            metrics, acc = h.target_run(schedule, seed)
            rows += h.curve_rows(seed, "scratch", metrics, acc,
                                 extra={"source_pixels": 0})
    return _finish(rows, cfg, out_dir)


def run_sensor_ablation(cfg, out_dir=None):
    """Same-sensor vs cross-sensor source pair comparison (two conditions)."""
    h = _Harness(cfg)
    pairs = cfg.get("pairs")
    if not pairs or len(pairs) != 2:
        raise ConfigError("sensor_ablation needs exactly 2 'pairs'")
    schedule = schedule_from_config(cfg["schedule"])
    rows = []
    for pair in pairs:
        subset = _combo_sources(h, pair)
        pixels = sum(ds.labeled_count for ds in subset)
        pretrained, _ = h.pretrain(subset)
        for seed in h.seeds:
            metrics, acc = h.target_run(schedule, seed, pretrained=pretrained)
            rows += h.curve_rows(seed, pair["label"], metrics, acc,
                                 extra={"source_pixels": pixels})
    return _finish(rows, cfg, out_dir)


def run_single_vs_multi(cfg, out_dir=None):
    """Single-source (N=1) vs multi-source pre-training comparison."""
    h = _Harness(cfg)
    conditions = cfg.get("conditions")
    if not conditions:
        raise ConfigError("single_vs_multi needs a 'conditions' list")
    lens = [len(c["sources"]) for c in conditions]
    if not any(n == 1 for n in lens) or not any(n > 1 for n in lens):
        raise ConfigError(
            "single_vs_multi needs at least one single-source and one "
            "multi-source condition"
        )
    schedule = schedule_from_config(cfg["schedule"])
    rows = []
    for cond in conditions:
        subset = _combo_sources(h, cond)
        pixels = sum(ds.labeled_count for ds in subset)
        pretrained, _ = h.pretrain(subset)
        for seed in h.seeds:
            metrics, acc = h.target_run(schedule, seed, pretrained=pretrained)
            rows += h.curve_rows(seed, cond["label"], metrics, acc,
                                 extra={"source_pixels": pixels})
    return _finish(rows, cfg, out_dir)


def run_pretrain(cfg, out_dir=None):
    """Plain cross-domain pre-training as an experiment: emits source loss
    curves and writes one checkpoint per seed when out_dir is given."""
    h = _Harness(cfg)
    rows = []
    for seed in h.seeds:
        cdn, metrics_list = h.pretrain(h.sources, seed=seed)
        for phase, metrics in enumerate(metrics_list, start=1):
            condition = "pretrain" if len(metrics_list) == 1 else f"pretrain/step{phase}"
            for r in metrics.rows:
                rows.append(ReportRow("pretrain", seed, condition, r.iteration,
                                      f"loss[{r.domain}]", float(r.loss)))
        if out_dir is not None:
            save_checkpoint(cdn, Path(out_dir) / f"pretrained_seed{seed}.ckpt")
    return _finish(rows, cfg, out_dir)


def run_finetune(cfg, out_dir=None):
    """Fine-tune from a required checkpoint as an experiment."""
    h = _Harness(cfg)
    if "checkpoint" not in cfg:
        raise ConfigError("finetune needs a 'checkpoint'")
    pretrained = _load_pretrained(cfg["checkpoint"])
    schedule = schedule_from_config(cfg["schedule"])
    rows = []
    for seed in h.seeds:
        metrics, acc = h.target_run(schedule, seed, pretrained=pretrained)
        rows += h.curve_rows(seed, "finetune", metrics, acc)
    return _finish(rows, cfg, out_dir)


_RUNNERS = {
    "schedule_sweep": run_schedule_sweep,
    "depth_sweep": run_depth_sweep,
    "source_size": run_source_size,
    "sensor_ablation": run_sensor_ablation,
    "single_vs_multi": run_single_vs_multi,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
}


def run_experiment(cfg, out_dir=None):
    exp = cfg.get("experiment")
    if exp not in _RUNNERS:
        raise ConfigError(f"unknown experiment '{exp}' (known: {sorted(_RUNNERS)})")
    return _RUNNERS[exp](cfg, out_dir)


# --- reports --------------------------------------------------------------

def _finish(rows, cfg, out_dir):
    rows.sort(key=lambda r: (r.condition, r.seed, r.iteration, r.metric))
    if out_dir is not None:
        write_report(rows, cfg, out_dir)
    return rows


def write_report(rows, cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.experiment, r.seed, r.condition, r.iteration,
                             r.metric, repr(float(r.value))])
    summary = summarize(rows, cfg)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # config echo: curve rows stay whole series; schedule step boundaries and
    # every other run parameter live here as metadata
    with open(out_dir / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def summarize(rows, cfg=None):
    """Aggregate final metrics (mean/min/max over seeds) per condition."""
    per = {}
    for r in rows:
        if r.metric == "final_accuracy" or r.metric == "source_pixels":
            per.setdefault(r.condition, {}).setdefault(r.metric, []).append(r.value)
    conditions = {
        cond: {
            metric: {
                "mean": float(np.mean(vals)),
                "min": float(np.min(vals)),
                "max": float(np.max(vals)),
            }
            for metric, vals in metrics.items()
        }
        for cond, metrics in per.items()
    }
    out = {"conditions": conditions}
    if cfg is not None:
        out["experiment"] = cfg.get("experiment")
        out["seeds"] = list(cfg.get("seeds", []))
    return out
