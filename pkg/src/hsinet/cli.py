"""Command-line harness.

Subcommands: pretrain, finetune, train-scratch, eval, experiment <id>,
synth-gen, gradcheck. Exit codes: 0 success, 1 config error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthConfig, synth_generate, write_dataset, with_split, normalize_bands
from .errors import ConfigError, DataError, NumericError
from .experiments import (EXPERIMENT_IDS, _kwargs, dataset_from_config,
                          run_experiment, schedule_from_config, _network_kwargs)
from .network import (CrossDomainSpec, NetworkSpec, build_backbone,
                      build_cross_domain, transfer_shared)
from .trainer import evaluate, train_cross_domain, train_single, two_step_train
from .verify import oracle_suite


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    parser = _Parser(prog="hsinet",
                     description="Cross-domain hyperspectral CNN training harness")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, help_text, config=True, checkpoint=False, needs_out=False):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="base RNG seed")
        p.add_argument("--out", default="out" if needs_out else None,
                       help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (1 is the deterministic reference)")
        if checkpoint:
            p.add_argument("--checkpoint", required=(name in ("finetune", "eval")),
                           help="checkpoint path")
        return p

    add("pretrain", "cross-domain pre-training on source datasets", needs_out=True)
    add("finetune", "fine-tune a target from a pre-trained checkpoint",
        checkpoint=True, needs_out=True)
    add("train-scratch", "train a target from random initialization", needs_out=True)
    add("eval", "evaluate a checkpoint on a dataset split", checkpoint=True)
    exp = add("experiment", "run an ablation experiment", needs_out=True)
    exp.add_argument("id", choices=EXPERIMENT_IDS, help="experiment id")
    add("synth-gen", "generate synthetic domains as ENVI rasters", needs_out=True)
    gc = add("gradcheck", "run the finite-difference gradient oracles", config=False)
    gc.add_argument("--seeds", type=int, default=3, help="number of seeds to sweep")
    return parser


def _load_config(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file '{path}' does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file '{path}' is not valid JSON: {e}") from e


def _seed(args, cfg, default=0):
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", default))


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_threads(args):
    if args.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {args.threads}")


def _write_train_outputs(out, metrics_list, names):
    for metrics, name in zip(metrics_list, names):
        metrics.write_csv(out / f"{name}.csv")
        with open(out / f"{name}_summary.json", "w") as fh:
            json.dump(metrics.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def cmd_pretrain(args):
    cfg = _load_config(args.config)
    out = _outdir(args)
    seed = _seed(args, cfg)
    sources = [dataset_from_config(c, cfg.get("normalize", True))
               for c in cfg.get("sources") or _missing("sources")]
    net_kwargs = _network_kwargs(cfg)
    specs = CrossDomainSpec([
        NetworkSpec(bands=ds.cube.bands, classes=ds.classes, **net_kwargs)
        for ds in sources
    ])
    rng = np.random.default_rng(seed)
    cdn = build_cross_domain(specs, rng)
    eval_every = int(cfg.get("eval_every", 100))
    augment = bool(cfg.get("augment", True))
    if "two_step" in cfg:
        s1 = schedule_from_config(cfg["two_step"]["step1"])
        s2 = schedule_from_config(cfg["two_step"]["step2"])
        cdn, m1, m2 = two_step_train(cdn, sources, s1, s2, rng,
                                     eval_every=eval_every, augment=augment,
                                     progress=True)
        iteration = s2.max_iter
        _write_train_outputs(out, [m1, m2], ["metrics_step1", "metrics_step2"])
    else:
        schedule = schedule_from_config(cfg.get("schedule") or _missing("schedule"))
        cdn, metrics = train_cross_domain(cdn, sources, schedule, rng,
                                          eval_every=eval_every, augment=augment,
                                          progress=True)
        iteration = schedule.max_iter
        _write_train_outputs(out, [metrics], ["metrics"])
    ckpt = out / "pretrained.ckpt"
    save_checkpoint(cdn, ckpt, rng=rng, iteration=iteration)
    print(json.dumps({"checkpoint": str(ckpt)}))
    return 0


def _missing(key):
    raise ConfigError(f"config needs '{key}'")


def _target_from_config(cfg):
    ds = dataset_from_config(cfg.get("target") or _missing("target"), normalize=False)
    n = cfg.get("train_per_class") or _missing("train_per_class")
    split_rng = np.random.default_rng(int(cfg.get("split_seed", 1234)))
    ds = with_split(ds, int(n), split_rng)
    if cfg.get("normalize", True):
        ds = normalize_bands(ds)
    return ds


def _run_target(args, cfg, pretrained):
    out = _outdir(args)
    seed = _seed(args, cfg)
    target = _target_from_config(cfg)
    net_kwargs = _network_kwargs(cfg)
    spec = NetworkSpec(bands=target.cube.bands, classes=target.classes, **net_kwargs)
    rng = np.random.default_rng(seed)
    if pretrained is None:
        net = build_backbone(spec, rng)
    else:
        net = transfer_shared(pretrained, spec, rng)
    schedule = schedule_from_config(cfg.get("schedule") or _missing("schedule"))
    net, metrics = train_single(net, target, schedule, rng,
                                eval_every=int(cfg.get("eval_every", 100)),
                                augment=bool(cfg.get("augment", True)),
                                progress=True)
    _write_train_outputs(out, [metrics], ["metrics"])
    ckpt = out / ("finetuned.ckpt" if pretrained is not None else "scratch.ckpt")
    save_checkpoint(net, ckpt, rng=rng, iteration=schedule.max_iter)
    acc = evaluate(net, target, "test")
    print(json.dumps({"checkpoint": str(ckpt), "test_accuracy": acc}))
    return 0


def _load_ckpt(path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint '{path}' does not exist")
    return load_checkpoint(path)


def cmd_finetune(args):
    cfg = _load_config(args.config)
    ckpt = _load_ckpt(args.checkpoint)
    if ckpt.kind != "cross":
        raise ConfigError(f"'{args.checkpoint}' is not a cross-domain checkpoint")
    return _run_target(args, cfg, ckpt.network)


def cmd_train_scratch(args):
    cfg = _load_config(args.config)
    return _run_target(args, cfg, None)


def cmd_eval(args):
    cfg = _load_config(args.config)
    ckpt = _load_ckpt(args.checkpoint)
    if ckpt.kind != "single":
        raise ConfigError("eval needs a single-network checkpoint")
    target = _target_from_config(cfg)
    split = cfg.get("split", "test")
    acc = evaluate(ckpt.network, target, split)
    print(json.dumps({"split": split, "accuracy": acc}))
    return 0


def cmd_experiment(args):
    cfg = _load_config(args.config)
    cfg.setdefault("experiment", args.id)
    if cfg["experiment"] != args.id:
        raise ConfigError(
            f"config says experiment '{cfg['experiment']}' but command line says '{args.id}'"
        )
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    out = _outdir(args)
    run_experiment(cfg, out)
    print(json.dumps({"report": str(out / "report.csv"),
                      "summary": str(out / "summary.json")}))
    return 0


def cmd_synth_gen(args):
    cfg = _load_config(args.config)
    out = _outdir(args)
    domains = cfg.get("domains", [cfg])
    manifests = []
    for i, d in enumerate(domains):
        kw = _kwargs({k: v for k, v in d.items()
                      if k not in ("interleave", "data_type", "byte_order")},
                     SynthConfig, "synth")
        if args.seed is not None:
            kw["seed"] = args.seed + i
        ds = synth_generate(SynthConfig(**kw))
        manifests.append(str(write_dataset(
            ds, out,
            interleave=d.get("interleave", "bsq"),
            data_type=int(d.get("data_type", 4)),
            byte_order=int(d.get("byte_order", 0)),
        )))
    print(json.dumps({"manifests": manifests}))
    return 0


def cmd_gradcheck(args):
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    results = oracle_suite(list(seeds))
    failed = 0
    for name, seed, report in results:
        status = "PASS" if report.passed else "FAIL"
        if not report.passed:
            failed += 1
        print(f"{status} {name} seed={seed} max_rel={report.worst_rel():.3e}")
    if failed:
        print(f"{failed} gradient checks failed", file=sys.stderr)
        return 3
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train-scratch": cmd_train_scratch,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "synth-gen": cmd_synth_gen,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        _check_threads(args)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
