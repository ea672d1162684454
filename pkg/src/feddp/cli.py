"""Command line entry point: ``feddp run|partition|flops|sweep``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from feddp import data, metrics
from feddp.config import ExperimentConfig, load_config
from feddp.errors import ConfigError, FeddpError, FormatError, NumericError, PartitionError, \
    StructuralError
from feddp.fed import Federation
from feddp.nn.spec import PRESETS, preset

OUT_ENV = "FEDDP_OUT"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_model(cfg: ExperimentConfig, train: data.LabeledDataset):
    c, h, _ = train.images.shape[1:]
    kwargs = {"num_classes": train.class_count, "image_size": h}
    if cfg.model.startswith("tiny"):
        kwargs["in_channels"] = c
    elif c != 3:
        raise ConfigError(f"model {cfg.model} expects 3 input channels, dataset has {c}")
    return preset(cfg.model, **kwargs)


def load_data(cfg: ExperimentConfig):
    d = cfg.dataset
    if d.kind == "cifar10":
        return data.load_cifar10(d.path, dtype=np.float64)
    return data.synth_splits(d.classes, d.per_class, d.test_per_class, d.image_size,
                             seed=cfg.data_seed, noise=d.noise)


def make_partition(cfg: ExperimentConfig, train) -> data.Partition:
    p = cfg.partition
    spec = data.PartitionSpec(p.num_clients, p.beta, cfg.partition_seed, p.validation_fraction)
    return data.dirichlet_partition(train, spec)


def resolve_out(cfg: ExperimentConfig, config_path, out: str | None) -> Path:
    if out:
        return Path(out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / Path(config_path).stem


def run_experiment(cfg: ExperimentConfig, out_dir: Path, name: str, threads: int = 1,
                   strategy: str | None = None, pruning: bool | None = None,
                   prepared=None) -> dict:
    """One federated run; streams ``metrics.csv`` and writes ``summary.json``."""
    overrides = {}
    if strategy is not None:
        overrides["strategy"] = strategy
    if pruning is not None:
        overrides["dynamic_pruning"] = pruning
    fl = cfg.fl_config(threads, **overrides)
    train, test, part = prepared if prepared is not None else _prepare(cfg)
    model = build_model(cfg, train)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "partition.json").write_text(part.to_json())
    tag = "pruned" if fl.dynamic_pruning else "dense"
    run_id = f"{name}-{fl.strategy}-{tag}-s{cfg.seed}"
    fed = Federation.build(model, train, part, fl, test)
    timings = []
    with metrics.MetricsWriter(out_dir / "metrics.csv", run_id, fl.strategy,
                               fl.dynamic_pruning) as writer:
        def on_round(m):
            timings.append(m.seconds)
            if not cfg.wall_clock:
                m = metrics.RoundMetrics(**{**m.__dict__, "seconds": 0.0})
            writer.write(m)
        fed.run(on_round=on_round)

    history = fed.history
    accs = [m.avg_local_top1 for m in history]
    rtt = None if cfg.target_accuracy is None else metrics.rounds_to_target(accs, cfg.target_accuracy)
    cost = metrics.comm_cost(model.num_params(), rtt, fed.server.num_clients, fl.sample_rate)
    flops = metrics.flops_report(model, fl.keep_ratio)
    summary = {
        "run_id": run_id,
        "strategy": fl.strategy,
        "pruning": fl.dynamic_pruning,
        "seed": cfg.seed,
        "rounds": len(history),
        "final_avg_local_top1": accs[-1] if accs else None,
        "best_avg_local_top1": max(accs) if accs else None,
        "final_global_top1": history[-1].global_top1 if history else None,
        "target_accuracy": cfg.target_accuracy,
        "rounds_to_target": rtt,
        "cost": cost.to_dict(),
        "ledger": fed.ledger.snapshot(),
        "gate_bytes": fed.ledger.gate_bytes,
        "backbone_bytes": fed.server.w.nbytes(),
        "model_params": model.num_params(),
        "flops": flops,
        "partition_sha256": part.digest(),
        "config": cfg.model_dump(mode="json"),
    }
    metrics.write_summary(out_dir / "summary.json", summary)
    (out_dir / "timings.json").write_text(json.dumps({"seconds_per_round": timings}) + "\n")
    return summary


def _prepare(cfg: ExperimentConfig):
    train, test = load_data(cfg)
    return train, test, make_partition(cfg, train)


def histogram_rows(part: data.Partition, labels, classes: int) -> np.ndarray:
    return part.histogram(labels, classes)


# -- subcommands ------------------------------------------------------------

def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = resolve_out(cfg, args.config, args.out)
    summary = run_experiment(cfg, out, Path(args.config).stem, args.threads)
    print(f"{summary['run_id']}: {summary['rounds']} rounds, "
          f"final avg local top-1 {summary['final_avg_local_top1']}, "
          f"rounds to target {summary['rounds_to_target']}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = resolve_out(cfg, args.config, args.out)
    train, _ = load_data(cfg)
    part = make_partition(cfg, train)
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(part.to_json())
    hist = histogram_rows(part, train.labels, train.class_count)
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client"] + [f"class{c}" for c in range(train.class_count)] + ["total"])
        for k, row in enumerate(hist):
            w.writerow([k, *row.tolist(), int(row.sum())])
    width = max(6, len(str(int(hist.max()))) + 1)
    print("client" + "".join(f"{'c' + str(c):>{width}}" for c in range(train.class_count))
          + f"{'total':>{width + 2}}")
    for k, row in enumerate(hist):
        print(f"{k:>6}" + "".join(f"{v:>{width}}" for v in row) + f"{row.sum():>{width + 2}}")
    chi = data.chi_square_distance(hist)
    print(f"samples {int(hist.sum())}, mean chi-square distance {chi:.4f}, "
          f"sha256 {part.digest()[:16]}")
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.model not in PRESETS:
        raise ConfigError(f"unknown model preset {args.model!r}; choose from {sorted(PRESETS)}")
    if args.keep_ratio is not None and not 0 < args.keep_ratio <= 1:
        raise ConfigError(f"--keep-ratio {args.keep_ratio} outside (0, 1]")
    model = preset(args.model)
    rep = metrics.flops_report(model, args.keep_ratio)
    if args.json:
        print(json.dumps(rep, indent=2))
        return EXIT_OK
    widths = metrics.keep_widths(model, args.keep_ratio)
    pruned = dict(metrics.layer_flops(model, widths))
    print(f"{'layer':<24}{'original':>16}{'pruned':>16}")
    for name, f in metrics.layer_flops(model):
        print(f"{name:<24}{f:>16,}{pruned[name]:>16,}")
    print(f"{'total':<24}{rep['original_flops']:>16,}{rep['pruned_flops']:>16,}")
    print(f"reduction {rep['reduction_pct']:.2f}% (pruned/original {rep['ratio']:.4f})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = resolve_out(cfg, args.config, args.out)
    prepared = _prepare(cfg)
    name = Path(args.config).stem
    groups = []
    for strategy in cfg.sweep.strategies:
        for pruning in cfg.sweep.pruning:
            sub = out / f"{strategy}-{'pruned' if pruning else 'dense'}"
            t0 = time.perf_counter()
            s = run_experiment(cfg, sub, name, args.threads, strategy, pruning, prepared)
            groups.append((sub, s))
            print(f"{s['run_id']}: final avg local top-1 {s['final_avg_local_top1']} "
                  f"({time.perf_counter() - t0:.1f}s)")
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = None
        for sub, _ in groups:
            for row in metrics.read_metrics_csv(sub / "metrics.csv"):
                if writer is None:
                    writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
                    writer.writeheader()
                writer.writerow(row)
    table = [{k: s[k] for k in ("run_id", "strategy", "pruning", "best_avg_local_top1",
                                "final_global_top1", "rounds_to_target", "partition_sha256")}
             for _, s in groups]
    metrics.write_summary(out / "sweep_summary.json", {"groups": table})
    hashes = {s["partition_sha256"] for _, s in groups}
    print(f"{len(groups)} runs, {len(hashes)} distinct partition hash(es); wrote {out / 'sweep.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feddp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<config name>)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, default=1, help="clients trained in parallel")

    for name, fn, help_ in (("run", cmd_run, "run one federated experiment"),
                            ("partition", cmd_partition, "write and show the client partition"),
                            ("sweep", cmd_sweep, "strategy x pruning grid")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("flops", help="original vs pruned FLOPs of a model preset")
    sp.add_argument("--model", default="vgg11-shape", help=f"one of {sorted(PRESETS)}")
    sp.add_argument("--keep-ratio", type=float, help="uniform keep ratio (default: preset's)")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, PartitionError, StructuralError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FeddpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
