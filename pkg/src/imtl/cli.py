"""Command-line front end.

Batch-oriented: every command reads files, runs, writes files, and prints
one machine-readable line per artifact or result row on stdout (space-
separated key=value pairs). Diagnostics go to stderr. Exit codes: 0 on
success, 2 for usage or configuration errors, 3 when a run aborts mid-way
(non-finite loss).

Run configuration lives in an INI file with sections [run], [strategy],
[network] and [tasks]; every key has a default, unknown keys are rejected
by name. Seed precedence for run/ablate: the IMTL_SEED environment
variable, then --seed, then the config file's seed list.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import rng as rngmod
from .arbitration import StrategyConfig
from .errors import ConfigError
from .harness import (ABLATION_MODES, REGIME_STEP, REGIME_WINDOW, RunConfig,
                      ablation_config, aggregate, aggregate_summary,
                      read_metrics, run_block_suite, run_seeds,
                      run_single_baseline, run_transfer_analysis,
                      selection_regime, single_task_config)
from .model import MultiTaskModel
from .tasks import (TASK_NAMES, TASK_SPECS, ExperienceCache, generate,
                    write_dataset)

SUMMARY_FORMAT = "imtl-summary 1"
SEED_ENV = "IMTL_SEED"
ABLATE_CHOICES = ("full", "no-flag", "no-attn", "no-both")

_BOOLS = {"true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOLS[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {text!r}") from None


def _parse_seeds(text: str) -> tuple[int, ...]:
    """Either a count N (meaning seeds 0..N-1) or an explicit comma list."""
    if "," in text:
        return tuple(int(p) for p in text.split(",") if p.strip())
    return tuple(range(int(text)))


def _parse_names(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


# config schema: section -> key -> value parser; unknown keys are rejected
CONFIG_SCHEMA = {
    "run": {
        "epochs": int, "batch": int, "lr": float, "weight_decay": float,
        "seeds": _parse_seeds, "cache_size": int,
    },
    "strategy": {
        "kind": str, "k": float, "epsilon": float, "window": int,
        "score_floor": float, "block_order": _parse_names,
        "single_task": str,
    },
    "network": {
        "tier": str, "variant": str, "attention": _parse_bool,
        "flag": _parse_bool,
    },
    "tasks": {
        "names": _parse_names, "data": _parse_names,
    },
}


class LoadedConfig:
    """A parsed config file.

    `single_baseline` marks `kind = single` with no single_task: the
    combined baseline that gives each task its own full-budget run and
    averages the legs.
    """

    def __init__(self, config: RunConfig, single_baseline: bool, path):
        self.config = config
        self.single_baseline = single_baseline
        self.path = path


def load_config(path) -> LoadedConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]; "
                              f"one of {sorted(CONFIG_SCHEMA)}")
        schema = CONFIG_SCHEMA[section]
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"{path}: unknown key {key!r} in "
                                  f"[{section}]; one of {sorted(schema)}")
            try:
                values.setdefault(section, {})[key] = schema[key](raw)
            except ConfigError:
                raise
            except ValueError as err:
                raise ConfigError(
                    f"{path}: bad value for {key!r} in [{section}]: {err}"
                ) from None

    run = values.get("run", {})
    strat = dict(values.get("strategy", {}))
    net = values.get("network", {})
    tsk = values.get("tasks", {})
    names = tsk.get("names", TASK_NAMES)
    kind = strat.pop("kind", "lp")
    single_baseline = kind == "single" and "single_task" not in strat
    if single_baseline:
        strat["single_task"] = names[0]  # placeholder; legs replace it
    for field in ("block_order", "single_task"):
        if field in strat:
            strat[field] = _resolve_tasks(strat[field], names, path, field)
    datasets = tsk.get("data")
    config = RunConfig(
        strategy=StrategyConfig(kind=kind, **strat),
        tasks=names,
        epochs=run.get("epochs", 3000),
        batch=run.get("batch", 100),
        lr=run.get("lr", 1e-4),
        weight_decay=run.get("weight_decay", 1e-2),
        seeds=run.get("seeds", tuple(range(10))),
        variant=net.get("variant", "multi"),
        tier=net.get("tier", "paper"),
        use_attention=net.get("attention", True),
        use_flag=net.get("flag", True),
        cache_size=run.get("cache_size", 10_000),
        datasets=tuple(datasets) if datasets else None,
    )
    if config.datasets is not None:
        for p in config.datasets:
            if not os.path.exists(p):
                raise ConfigError(f"missing dataset file {p}")
    return LoadedConfig(config, single_baseline, path)


def _resolve_tasks(value, names, path, field):
    """Task names in the config resolve to indices against [tasks] names."""
    single = isinstance(value, str)
    items = (value,) if single else value
    out = []
    for item in items:
        if item not in names:
            raise ConfigError(f"{path}: {field} names unknown task {item!r}; "
                              f"tasks are {list(names)}")
        out.append(names.index(item))
    return out[0] if single else tuple(out)


def apply_seed_override(config: RunConfig, cli_seed: int | None) -> RunConfig:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, "
                              f"got {env!r}") from None
        return replace(config, seeds=(seed,))
    if cli_seed is not None:
        return replace(config, seeds=(cli_seed,))
    return config


# -- artifacts -----------------------------------------------------------------


def sha256_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def sha256_file(path) -> str:
    with open(path, "rb") as fh:
        return sha256_bytes(fh.read())


def data_checksums(config: RunConfig) -> dict:
    """Per-task dataset fingerprints for the summary JSON.

    File-backed datasets hash the file bytes once; generated datasets hash
    the arrays each seed actually saw.
    """
    if config.datasets is not None:
        return {name: sha256_file(path)
                for name, path in zip(config.tasks, config.datasets)}
    out = {}
    for i, name in enumerate(config.tasks):
        per_seed = []
        for seed in config.seeds:
            s, a, e = generate(name, config.cache_size,
                               rngmod.stream(seed, rngmod.DATA, i))
            per_seed.append(sha256_bytes(s.tobytes(), a.tobytes(),
                                         e.tobytes()))
        out[name] = per_seed
    return out


def config_dict(config: RunConfig) -> dict:
    d = asdict(config)
    for key, val in list(d.items()):
        if isinstance(val, tuple):
            d[key] = list(val)
    if isinstance(d["strategy"].get("block_order"), tuple):
        d["strategy"]["block_order"] = list(d["strategy"]["block_order"])
    return d


def write_summary(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit(tag: str, **fields) -> None:
    print(" ".join([tag] + [f"{k}={v}" for k, v in fields.items()]))


class RunAborted(RuntimeError):
    pass


def _check_failures(logs) -> None:
    for log in logs:
        if log.failure:
            raise RunAborted(f"seed {log.seed}: {log.failure}")


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.task not in TASK_SPECS:
        raise ConfigError(f"unknown task {args.task!r}; one of {TASK_NAMES}")
    if args.n < args.batch:
        raise ConfigError("n must be ≥ batch")
    spec = TASK_SPECS[args.task]
    states, actions, effects = generate(
        args.task, args.n,
        rngmod.stream(args.seed, rngmod.DATA, TASK_NAMES.index(args.task)))
    write_dataset(args.out, spec, states, actions, effects)
    emit("dataset", task=args.task, n=args.n, seed=args.seed,
         dims=f"{spec.d_s},{spec.d_a},{spec.d_e}",
         sha256=sha256_file(args.out), path=args.out)
    return 0


def _save_run(config: RunConfig, out_dir, label: str):
    """run_seeds + per-seed artifacts; returns (aggregate, logs)."""
    logs, models = run_seeds(config)
    metrics_paths, ckpt_paths = [], []
    for log, model in zip(logs, models):
        mpath = os.path.join(out_dir, f"metrics_{label}_seed{log.seed}.csv")
        log.to_csv(mpath)
        metrics_paths.append(mpath)
        emit("artifact", kind="metrics", seed=log.seed, path=mpath)
        if not log.failure:
            cpath = os.path.join(out_dir, f"model_{label}_seed{log.seed}.ckpt")
            model.save(cpath)
            ckpt_paths.append(cpath)
            emit("artifact", kind="checkpoint", seed=log.seed, path=cpath)
    _check_failures(logs)
    return aggregate(logs, label), logs, metrics_paths, ckpt_paths


def _run_command(loaded: LoadedConfig, config: RunConfig, out_dir,
                 label: str) -> None:
    all_metrics, all_ckpts, all_logs = [], [], []
    if loaded.single_baseline:
        for i, name in enumerate(config.tasks):
            leg = single_task_config(config, i)
            _, logs, mpaths, cpaths = _save_run(leg, out_dir,
                                                f"{label}-{name}")
            all_logs.extend(logs)
            all_metrics.extend(mpaths)
            all_ckpts.extend(cpaths)
        agg, _ = run_single_baseline(config)
    else:
        agg, logs, all_metrics, all_ckpts = _save_run(config, out_dir, label)
        all_logs = logs
    summary = {
        "format": SUMMARY_FORMAT,
        "command": label,
        "config_file": str(loaded.path),
        "config": config_dict(config),
        "seeds": list(config.seeds),
        "data_checksums": data_checksums(config),
        "aggregate": aggregate_summary(agg),
        "per_seed": [{
            "seed": log.seed,
            "strategy": log.config.strategy.kind if log.config else label,
            "engaged_task": (log.config.strategy.single_task
                             if log.config and
                             log.config.strategy.kind == "single" else None),
            "midpoint_overall": float(log.overall()[log.epochs // 2]),
            "final_overall": float(log.overall()[-1]),
            "engagement_counts": [int(c) for c in log.counts()],
            "final_energy": float(log.energy_cum[-1]),
        } for log in all_logs],
        "artifacts": {"metrics": all_metrics, "checkpoints": all_ckpts},
    }
    spath = os.path.join(out_dir, f"summary_{label}.json")
    write_summary(spath, summary)
    emit("artifact", kind="summary", path=spath)


def cmd_run(args) -> int:
    loaded = load_config(args.config)
    config = apply_seed_override(loaded.config, args.seed)
    _run_command(loaded, config, args.out, config.strategy.kind)
    return 0


def cmd_ablate(args) -> int:
    loaded = load_config(args.config)
    config = apply_seed_override(loaded.config, args.seed)
    config = ablation_config(config, args.mode)
    _run_command(loaded, config, args.out, args.mode)
    return 0


def _write_curves(path, aggs) -> None:
    """Long-format curve CSV: one row per (label, epoch), mean and std."""
    with open(path, "w") as fh:
        fh.write("# imtl-curves 1\n")
        fh.write("label,epoch,overall_mean,overall_std,"
                 "energy_mean,energy_std\n")
        for agg in aggs:
            om, osd = agg.overall_mean, agg.overall_std
            em = agg.energy_per_seed.mean(axis=0)
            es = agg.energy_per_seed.std(axis=0)
            for t in range(agg.epochs):
                fh.write(f"{agg.label},{t},{om[t]:.17g},{osd[t]:.17g},"
                         f"{em[t]:.17g},{es[t]:.17g}\n")


def _write_midpoint_table(path, aggs) -> None:
    with open(path, "w") as fh:
        fh.write("# imtl-midpoint 1\n")
        fh.write("label,midpoint_epoch,overall_mean,overall_std,"
                 "energy_mean\n")
        for agg in aggs:
            mo = agg.midpoint_overall()
            fh.write(f"{agg.label},{agg.midpoint},{mo.mean():.17g},"
                     f"{mo.std():.17g},{agg.midpoint_energy().mean():.17g}\n")


def cmd_compare(args) -> int:
    loadeds = [load_config(p) for p in args.configs]
    epochs = {l.config.epochs for l in loadeds}
    if len(epochs) > 1:
        raise ConfigError(f"compare needs matching epoch counts, "
                          f"got {sorted(epochs)}")
    aggs = []
    for loaded in loadeds:
        label = os.path.splitext(os.path.basename(loaded.path))[0]
        if loaded.single_baseline:
            agg, logs = run_single_baseline(loaded.config)
            _check_failures(logs)
        else:
            logs, _ = run_seeds(loaded.config)
            _check_failures(logs)
            agg = aggregate(logs, label)
        agg.label = label
        aggs.append(agg)
        mo = agg.midpoint_overall()
        emit("midpoint", label=label, epoch=agg.midpoint,
             mean=f"{mo.mean():.6g}", std=f"{mo.std():.6g}")
    curves = os.path.join(args.out, "compare_curves.csv")
    table = os.path.join(args.out, "compare_midpoint.csv")
    _write_curves(curves, aggs)
    _write_midpoint_table(table, aggs)
    emit("artifact", kind="curves", path=curves)
    emit("artifact", kind="midpoint-table", path=table)
    return 0


def cmd_block_suite(args) -> int:
    loaded = load_config(args.config)
    results = run_block_suite(loaded.config)
    curves = os.path.join(args.out, "block_curves.csv")
    _write_curves(curves, [r.aggregate for r in results])
    emit("artifact", kind="curves", path=curves)
    fpath = os.path.join(args.out, "block_forgetting.csv")
    with open(fpath, "w") as fh:
        fh.write("# imtl-forgetting 1\n")
        fh.write("order,boundary,delta_mean,delta_std,seeds_risen\n")
        for r in results:
            order = ">".join(r.order)
            for b in range(r.forgetting.shape[1]):
                col = r.forgetting[:, b]
                fh.write(f"{order},{b},{col.mean():.17g},{col.std():.17g},"
                         f"{int(np.sum(col > 0))}\n")
                emit("forgetting", order=order, boundary=b,
                     delta_mean=f"{col.mean():.6g}",
                     seeds_risen=int(np.sum(col > 0)))
    emit("artifact", kind="forgetting-table", path=fpath)
    return 0


def cmd_transfer(args) -> int:
    models = [MultiTaskModel.load(p) for p in args.checkpoint]
    names = tuple(t.name for t in models[0].tasks)
    eval_sets = []
    ckpt_evals = None
    for _ in models:
        if ckpt_evals is None:
            ckpt_evals = []
            for name in names:
                path = os.path.join(args.data, f"{name}.csv")
                if not os.path.exists(path):
                    raise ConfigError(f"missing dataset file {path}")
                cache = ExperienceCache.from_file(
                    name, path, rngmod.stream(0, rngmod.MINIBATCH))
                ckpt_evals.append(cache.eval_batch())
        eval_sets.append(ckpt_evals)
    report = run_transfer_analysis(models, eval_sets)
    report.to_csv(args.out)
    emit("artifact", kind="transfer-report", path=args.out,
         rows=len(report.rows), skipped=len(report.skipped))
    return 0


def cmd_regime(args) -> int:
    log = read_metrics(args.metrics)
    regime = selection_regime(log, args.window, args.step)
    with open(args.out, "w") as fh:
        fh.write("# imtl-regime 1\n")
        fh.write("start," + ",".join(log.task_names) + "\n")
        for start, row in zip(regime.starts, regime.counts):
            fh.write(f"{start}," + ",".join(str(c) for c in row) + "\n")
    emit("regime", windows=regime.starts.size, window=regime.window,
         step=regime.step, path=args.out)
    return 0


# -- plotting ------------------------------------------------------------------


PLOT_KEYS = ("out", "title", "xlabel", "ylabel")
SERIES_KEYS = ("file", "label", "column")


def load_plot_spec(path) -> tuple[dict, list[dict]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigError(f"cannot read plot spec {path}: {err}") from None
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    if "plot" not in parser:
        raise ConfigError(f"{path}: plot spec needs a [plot] section")
    plot = {}
    for key, raw in parser.items("plot"):
        if key not in PLOT_KEYS:
            raise ConfigError(f"{path}: unknown key {key!r} in [plot]")
        plot[key] = raw
    if "out" not in plot:
        raise ConfigError(f"{path}: [plot] needs an out file")
    series = []
    for section in parser.sections():
        if section == "plot":
            continue
        if not section.startswith("series:"):
            raise ConfigError(f"{path}: unknown section [{section}]")
        entry = {"label": section[len("series:"):], "column": "overall"}
        for key, raw in parser.items(section):
            if key not in SERIES_KEYS:
                raise ConfigError(f"{path}: unknown key {key!r} "
                                  f"in [{section}]")
            entry[key] = raw
        if "file" not in entry:
            raise ConfigError(f"{path}: [{section}] needs a file")
        series.append(entry)
    if not series:
        raise ConfigError(f"{path}: plot spec defines no series")
    return plot, series


def _series_curve(entry):
    """(epochs, values, band-std-or-None) from a curves or metrics file."""
    path = entry["file"]
    try:
        with open(path) as fh:
            head = fh.readline()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    if head.startswith("# imtl-curves"):
        rows = np.genfromtxt(path, delimiter=",", names=True, dtype=None,
                             encoding="utf-8", skip_header=1)
        mask = rows["label"] == entry["label"]
        if not np.any(mask):
            raise ConfigError(f"{path}: no curve labelled {entry['label']!r}")
        stem = "energy" if entry["column"] == "energy" else "overall"
        return (rows["epoch"][mask], rows[f"{stem}_mean"][mask],
                rows[f"{stem}_std"][mask])
    log = read_metrics(path)
    col = entry["column"]
    if col == "overall":
        return np.arange(log.epochs), log.overall(), None
    if col == "energy":
        return np.arange(log.epochs), log.energy_cum, None
    if col.startswith("eval:"):
        name = col[len("eval:"):]
        if name not in log.task_names:
            raise ConfigError(f"{path}: no task {name!r} in metrics")
        return (np.arange(log.epochs),
                log.eval_mae[:, log.task_names.index(name)], None)
    raise ConfigError(f"unknown plot column {col!r}; "
                      f"overall, energy, or eval:<task>")


def cmd_plot(args) -> int:
    plot, series = load_plot_spec(args.spec)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for entry in series:
        epochs, values, band = _series_curve(entry)
        line, = ax.plot(epochs, values, label=entry["label"], linewidth=1.2)
        if band is not None and np.any(band > 0):
            ax.fill_between(epochs, values - band, values + band,
                            color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel(plot.get("xlabel", "epoch"))
    ax.set_ylabel(plot.get("ylabel", "overall eval MAE"))
    if "title" in plot:
        ax.set_title(plot["title"])
    ax.legend()
    fig.tight_layout()
    fig.savefig(plot["out"])
    plt.close(fig)
    emit("artifact", kind="plot", path=plot["out"], series=len(series))
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imtl",
        description="Interleaved multi-task learning experiments.",
        epilog=f"Seed precedence for run/ablate: {SEED_ENV} environment "
               "variable, then --seed, then the config file.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic task dataset")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=100,
                   help="minimum usable sample count (n must cover a batch)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="train under one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="aggregate several configurations")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("block-suite",
                       help="blocked training over all task orders")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_block_suite)

    p = sub.add_parser("ablate", help="run an architecture ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", required=True, choices=ABLATE_CHOICES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("transfer",
                       help="attention-row ablation report from checkpoints")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--data", required=True,
                   help="directory with <task>.csv dataset files")
    p.add_argument("--out", default="transfer.csv")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("regime", help="sliding-window engagement counts")
    p.add_argument("--metrics", required=True)
    p.add_argument("--window", type=int, default=REGIME_WINDOW)
    p.add_argument("--step", type=int, default=REGIME_STEP)
    p.add_argument("--out", default="regime.csv")
    p.set_defaults(func=cmd_regime)

    p = sub.add_parser("plot", help="render curve CSVs to a vector chart")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RunAborted as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
