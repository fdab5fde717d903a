"""Command-line entry point: ``delome {gen,split,condense,run,eval}``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__
from .condense import CondenseConfig, condense, init_memory, save_memory
from .errors import DivergenceError
from .evaluation import (AccuracyMatrix, average_accuracy, average_forgetting,
                         forgetting_degenerate, train_on_memory_accuracy)
from .graph import SbmParams, generate_sbm
from .model import OptimizerConfig
from .replay import ReplayConfig, run_stream
from .taskstream import build_stream, load_graph, load_stream, save_graph, save_stream

log = logging.getLogger("delome")

EXIT_USAGE = 2
EXIT_DIVERGENCE = 3

# flat config key -> (section, field)
CONFIG_KEYS = {
    "strategy": ("replay", "strategy"),
    "tau": ("replay", "tau"),
    "lambda": ("replay", "lam"),
    "budget_per_class": ("replay", "budget_per_class"),
    "prop_depth": ("replay", "prop_depth"),
    "hidden_dim": ("replay", "hidden_dim"),
    "offset_mode": ("replay", "offset_mode"),
    "optimizer": ("optimizer", "kind"),
    "learning_rate": ("optimizer", "learning_rate"),
    "epochs": ("optimizer", "epochs"),
    "weight_decay": ("optimizer", "weight_decay"),
    "condense_optimizer": ("condense", "optimizer"),
    "condense_learning_rate": ("condense", "learning_rate"),
    "condense_epochs": ("condense", "epochs"),
    "condense_batch_size": ("condense", "batch_size_per_class"),
    "fanout": ("condense", "fanout"),
    "hops": ("condense", "hops"),
    "stream": ("run", "stream"),
    "seeds": ("run", "seeds"),
    "out": ("run", "out"),
}
METRIC_KEYS = ("aa_cil", "af_cil", "aa_til", "af_til")


class UsageError(ValueError):
    pass


def _int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_json_atomic(obj, path):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as f:
        json.dump(obj, f, indent=2)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# config

def parse_config(raw):
    """Flat mapping -> (ReplayConfig, run options). Unknown keys are rejected."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise UsageError("config must be a mapping of keys to values")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    parts = {"replay": {}, "optimizer": {}, "condense": {}, "run": {}}
    for key, value in raw.items():
        section, name = CONFIG_KEYS[key]
        parts[section][name] = value
    run = parts["run"]
    seeds = run.get("seeds", [0])
    run["seeds"] = _int_list(seeds) if isinstance(seeds, (str, int)) else [int(s) for s in seeds]
    try:
        cfg = ReplayConfig(**parts["replay"],
                           optimizer=OptimizerConfig(**parts["optimizer"]),
                           condense=CondenseConfig(**parts["condense"]))
    except TypeError as e:
        raise UsageError(str(e)) from None
    return cfg, run


def load_config(path):
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise UsageError(f"{path}: {e}") from None
    return parse_config(raw)


# ---------------------------------------------------------------------------
# experiments

@dataclass
class RunManifest:
    config: dict
    seeds: list
    stage_seconds: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    version: str = __version__


def summarize(per_seed):
    arr = {k: np.array([r[k] for r in per_seed]) for k in METRIC_KEYS}
    mean = {k: float(v.mean()) for k, v in arr.items()}
    std = {k: float(v.std()) for k, v in arr.items()}
    return mean, std


def run_seeds(stream, cfg, seeds, out, manifest, root=None):
    """Run every seed, persisting matrices after each task; returns the metrics dict."""
    per_seed = []
    for seed in seeds:
        seed_dir = os.path.join(out, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        paths = {m: os.path.join(seed_dir, f"matrix_{m}.csv") for m in ("cil", "til")}

        def persist(t, results, paths=paths):
            for mode, res in results.items():
                res.accuracy_matrix.to_csv(paths[mode])

        start = time.perf_counter()
        res = run_stream(stream, dataclasses.replace(cfg, seed=seed), on_task_end=persist)
        manifest.stage_seconds[os.path.relpath(seed_dir, root or out)] = {
            "total": time.perf_counter() - start,
            "per_task": res["cil"].task_seconds,
        }
        manifest.artifacts.extend(paths.values())
        per_seed.append({
            "seed": seed,
            "aa_cil": res["cil"].aa, "af_cil": res["cil"].af,
            "aa_til": res["til"].aa, "af_til": res["til"].af,
            "af_degenerate": res["cil"].af_degenerate,
            "buffer_rows": res["cil"].buffer_rows,
        })
        log.info("seed %d: cil AA %.4f AF %.4f | til AA %.4f", seed, per_seed[-1]["aa_cil"],
                 per_seed[-1]["af_cil"], per_seed[-1]["aa_til"])
    mean, std = summarize(per_seed)
    metrics = {"strategy": cfg.strategy, "budget_per_class": cfg.budget_per_class,
               "seeds": list(seeds), **mean, "per_seed": per_seed, "mean": mean, "std": std}
    path = os.path.join(out, "metrics.json")
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2)
    manifest.artifacts.append(path)
    return metrics


def _mean_train_per_class(stream):
    counts = [n for task in stream for n in task.train_class_counts().values()]
    return float(np.mean(counts))


def run_experiment(stream, cfg, seeds, out, budget_sweep=None, imbalance_sweep=None):
    """Single run, or one sub-run per sweep setting plus a sweep CSV."""
    os.makedirs(out, exist_ok=True)
    manifest = RunManifest(config=cfg.as_dict(), seeds=list(seeds))
    settings = []
    if budget_sweep:
        settings = [("budget", b, int(b)) for b in budget_sweep]
    elif imbalance_sweep:
        per_class = _mean_train_per_class(stream)
        for r in imbalance_sweep:
            if r <= 0:
                raise UsageError("--imbalance-sweep ratios must be > 0")
            settings.append(("imbalance", r, max(1, int(round(per_class / r)))))

    if not settings:
        metrics = run_seeds(stream, cfg, seeds, out, manifest)
    else:
        kind = settings[0][0]
        rows = []
        for _, value, b in settings:
            sub = os.path.join(out, f"{kind}_{value:g}")
            os.makedirs(sub, exist_ok=True)
            m = run_seeds(stream, dataclasses.replace(cfg, budget_per_class=b), seeds, sub,
                          manifest, root=out)
            rows.append({kind: value, "budget_per_class": b,
                         **{f"{k}_mean": m["mean"][k] for k in METRIC_KEYS},
                         **{f"{k}_std": m["std"][k] for k in METRIC_KEYS}})
        path = os.path.join(out, f"sweep_{kind}.csv")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        manifest.artifacts.append(path)
        metrics = {"sweep": rows}
    manifest_dict = dataclasses.asdict(manifest)
    manifest_path = os.path.join(out, "manifest.json")
    manifest_dict["artifacts"] = [os.path.relpath(p, out) for p in manifest.artifacts]
    _write_json_atomic(manifest_dict, manifest_path)
    return metrics


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args):
    for flag, value in (("--intra", args.intra), ("--inter", args.inter)):
        if not 0.0 <= value <= 1.0:
            raise UsageError(f"{flag} must lie in [0, 1], got {value}")
    if not args.blocks or any(b <= 0 for b in args.blocks):
        raise UsageError("--blocks must list positive block sizes")
    if args.feature_dim < 1:
        raise UsageError("--feature-dim must be >= 1")
    params = SbmParams(args.blocks, args.intra, args.inter, args.feature_dim,
                       args.center_scale, args.seed)
    save_graph(generate_sbm(params), args.out, num_classes=len(args.blocks))
    print(f"wrote graph with {sum(args.blocks)} nodes to {args.out}")


def cmd_split(args):
    if args.classes_per_task < 1:
        raise UsageError("--classes-per-task must be >= 1")
    stream = build_stream(load_graph(args.graph), args.classes_per_task, args.seed)
    save_stream(stream, args.out)
    msg = f"wrote {len(stream)} tasks to {args.out}"
    if stream.dropped_classes:
        msg += f" (dropped classes {list(stream.dropped_classes)})"
    print(msg)


def _condense_task(args):
    if args.stream:
        stream = load_stream(args.stream)
        if not 0 <= args.task < len(stream):
            raise UsageError(f"--task must lie in [0, {len(stream)})")
        return stream[args.task]
    graph = load_graph(args.graph)
    return build_stream(graph, len(np.unique(graph.labels)), args.seed)[0]


def cmd_condense(args):
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    if args.budget < 1:
        raise UsageError("--budget must be >= 1")
    cfg = CondenseConfig(budget_per_class=args.budget, epochs=args.epochs,
                         learning_rate=args.lr, init_seed=args.seed,
                         batch_size_per_class=args.batch_size, fanout=args.fanout,
                         hops=args.hops, prop_depth=args.prop_depth, optimizer=args.optimizer)
    task = _condense_task(args)
    mem = condense(task, cfg)
    json_path, _ = save_memory(mem, args.out)
    print(f"wrote {len(mem)} memory rows for task {task.task_id} to {json_path}")
    if args.report_expressiveness:
        sampled = init_memory(task, args.budget, args.seed)
        acc_c = train_on_memory_accuracy(mem, task, prop_depth=args.prop_depth, seed=args.seed)
        acc_s = train_on_memory_accuracy(sampled, task, prop_depth=args.prop_depth,
                                         seed=args.seed)
        print(f"condensed memory test accuracy: {acc_c:.4f}")
        print(f"sampled memory test accuracy:   {acc_s:.4f}")
        print(f"margin: {acc_c - acc_s:+.4f}")


def cmd_run(args):
    cfg, run = load_config(args.config)
    stream_path = args.stream or run.get("stream")
    out = args.out or run.get("out")
    if not stream_path:
        raise UsageError("no stream given (--stream or config key 'stream')")
    if not out:
        raise UsageError("no output directory given (--out or config key 'out')")
    seeds = args.seeds or run["seeds"]
    if args.budget_sweep and args.imbalance_sweep:
        raise UsageError("--budget-sweep and --imbalance-sweep are mutually exclusive")
    stream = load_stream(stream_path)
    metrics = run_experiment(stream, cfg, seeds, out, args.budget_sweep, args.imbalance_sweep)
    if "sweep" in metrics:
        for row in metrics["sweep"]:
            print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in row.items() if not k.endswith("_std")))
    else:
        m, s = metrics["mean"], metrics["std"]
        for k in METRIC_KEYS:
            print(f"{k}: {m[k]:.4f} +/- {s[k]:.4f}")


def cmd_eval(args):
    m = AccuracyMatrix.from_csv(args.matrix)
    aa, af, degenerate = average_accuracy(m), average_forgetting(m), forgetting_degenerate(m)
    if args.json:
        print(json.dumps({"aa": aa, "af": af, "af_degenerate": degenerate}))
    else:
        print(f"AA {aa:.12g}")
        print(f"AF {af:.12g}" + (" (degenerate: single task)" if degenerate else ""))


def build_parser():
    p = argparse.ArgumentParser(prog="delome", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an SBM fixture graph")
    g.add_argument("--blocks", type=_int_list, required=True, help="block sizes, e.g. 50,50,50")
    g.add_argument("--intra", type=float, required=True)
    g.add_argument("--inter", type=float, required=True)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--center-scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="build a class-incremental task stream")
    s.add_argument("--graph", required=True)
    s.add_argument("--classes-per-task", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    c = sub.add_parser("condense", help="learn a memory for one task")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--stream")
    src.add_argument("--graph", help="treat the whole graph as a single task")
    c.add_argument("--task", type=int, default=0)
    c.add_argument("--budget", type=int, default=10)
    c.add_argument("--epochs", type=int, default=200)
    c.add_argument("--lr", type=float, default=CondenseConfig.learning_rate)
    c.add_argument("--optimizer", choices=("gd", "adam"), default="gd")
    c.add_argument("--batch-size", type=int, default=64)
    c.add_argument("--fanout", type=int, default=5)
    c.add_argument("--hops", type=int, default=2)
    c.add_argument("--prop-depth", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--report-expressiveness", action="store_true",
                   help="also compare against an equal-budget sampled memory")
    c.set_defaults(func=cmd_condense)

    r = sub.add_parser("run", help="run a continual-learning experiment from a YAML config")
    r.add_argument("--config", required=True)
    r.add_argument("--stream")
    r.add_argument("--out")
    r.add_argument("--seeds", type=_int_list)
    r.add_argument("--budget-sweep", type=_int_list)
    r.add_argument("--imbalance-sweep", type=_float_list,
                   help="ratios of training nodes per class to memory budget")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="AA / AF of an accuracy-matrix CSV")
    e.add_argument("matrix")
    e.add_argument("--json", action="store_true", help="full-precision JSON output")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
