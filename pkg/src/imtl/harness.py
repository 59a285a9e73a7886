"""Experiment orchestration: seeded runs, aggregation and the report suites.

One epoch is one engagement: the arbiter picks a task, one minibatch of that
task is trained, the batch error and activity energy feed back into the
arbiter, and every task's fixed eval batch is scored. Everything downstream
(baseline comparisons, blocked permutations, k sweeps, ablation variants,
transfer reports, selection regimes) is assembled from the per-epoch logs of
such runs.

Determinism contract: a (config, seed) pair fully determines every logged
number except the wall-clock column. Each consumer (init, data, arbitration,
minibatch draws) owns its own seed stream, so changing e.g. the arbitration
strategy never shifts the datasets.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, replace

import numpy as np

from . import rng as rngmod
from .arbitration import ArbitrationState, StrategyConfig
from .errors import ConfigError, NumericError
from .model import MULTI, SINGLE, MultiTaskModel, NetworkSpec, TaskSpec
from .nn import AdamW
from .tasks import OBJECTS, TASK_SPECS, ExperienceCache

METRICS_MAGIC = "# imtl-metrics 1"
DEFAULT_KS = (0.4, 0.7, 1.0, 1.2)
REGIME_WINDOW = 50
REGIME_STEP = 10
MAX_BLOCK_TASKS = 5

ABLATION_MODES = {
    "full": (True, True),
    "no-flag": (True, False),
    "no-attn": (False, True),
    "no-both": (False, False),
}


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs.

    Defaults are the reference settings: 3000 epochs, batch 100, learning
    rate 1e-4, window/epsilon via StrategyConfig, 10 seeds, ~10k cached
    samples per task.
    """

    strategy: StrategyConfig
    tasks: tuple[str, ...] = ("push", "hit", "stack")
    epochs: int = 3000
    batch: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-2
    seeds: tuple[int, ...] = tuple(range(10))
    variant: str = MULTI
    tier: str = "paper"
    use_attention: bool = True
    use_flag: bool = True
    cache_size: int = 10_000
    datasets: tuple[str, ...] | None = None  # optional CSV paths, one per task

    def __post_init__(self):
        unknown = [t for t in self.tasks if t not in TASK_SPECS]
        if not self.tasks:
            raise ConfigError("tasks must not be empty")
        if unknown:
            raise ConfigError(f"unknown tasks {unknown}; known: {sorted(TASK_SPECS)}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"duplicate tasks in {self.tasks}")
        if self.variant not in (MULTI, SINGLE):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == SINGLE and len(self.tasks) != 1:
            raise ConfigError("the single-task variant runs exactly one task")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be positive, got {self.batch}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.datasets is not None and len(self.datasets) != len(self.tasks):
            raise ConfigError("datasets must list one file per task")

    def task_specs(self) -> tuple[TaskSpec, ...]:
        return tuple(TASK_SPECS[t] for t in self.tasks)

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec.for_tier(self.tier, self.task_specs(), self.variant)


def metric_columns(task_names) -> list[str]:
    cols = ["epoch", "engaged", "train_mse", "train_mae", "energy_cum", "wall_s"]
    for stem in ("eval_mae", "lp", "ec", "score"):
        cols += [f"{stem}_{t}" for t in task_names]
    return cols


@dataclass
class MetricsLog:
    """Per-epoch record of one run.

    Array lengths equal the epochs actually completed; they fall short of the
    request only after an abort, in which case `failure` carries the reason.
    lp/ec/score hold NaN on epochs where the strategy did not score (warm-up,
    rand/block/single kinds, and ec under plain lp).
    """

    config: RunConfig | None
    seed: int
    task_names: tuple[str, ...]
    engaged: np.ndarray     # (R,) int
    train_mse: np.ndarray   # (R,)
    train_mae: np.ndarray
    energy_cum: np.ndarray
    wall: np.ndarray
    eval_mae: np.ndarray    # (R, m)
    lp: np.ndarray
    ec: np.ndarray
    score: np.ndarray
    failure: str | None = None

    @classmethod
    def empty(cls, config: RunConfig | None, seed: int, epochs: int,
              task_names) -> "MetricsLog":
        m = len(task_names)
        return cls(config, seed, tuple(task_names),
                   engaged=np.zeros(epochs, dtype=int),
                   train_mse=np.zeros(epochs), train_mae=np.zeros(epochs),
                   energy_cum=np.zeros(epochs), wall=np.zeros(epochs),
                   eval_mae=np.zeros((epochs, m)),
                   lp=np.full((epochs, m), np.nan),
                   ec=np.full((epochs, m), np.nan),
                   score=np.full((epochs, m), np.nan))

    ARRAYS = ("engaged", "train_mse", "train_mae", "energy_cum", "wall",
              "eval_mae", "lp", "ec", "score")

    @property
    def epochs(self) -> int:
        return self.engaged.shape[0]

    def truncate(self, upto: int) -> None:
        for name in self.ARRAYS:
            setattr(self, name, getattr(self, name)[:upto])

    def counts(self) -> np.ndarray:
        return np.bincount(self.engaged, minlength=len(self.task_names))

    def overall(self) -> np.ndarray:
        """Summed-over-tasks eval MAE per epoch (the reported total loss)."""
        return self.eval_mae.sum(axis=1)

    def to_csv(self, path) -> None:
        cols = metric_columns(self.task_names)
        with open(path, "w") as fh:
            fh.write(f"{METRICS_MAGIC} seed={self.seed} "
                     f"tasks={','.join(self.task_names)}\n")
            fh.write(",".join(cols) + "\n")
            for t in range(self.epochs):
                row = [str(t), str(int(self.engaged[t])),
                       f"{self.train_mse[t]:.17g}", f"{self.train_mae[t]:.17g}",
                       f"{self.energy_cum[t]:.17g}", f"{self.wall[t]:.6f}"]
                for block in (self.eval_mae, self.lp, self.ec, self.score):
                    row += [f"{v:.17g}" for v in block[t]]
                fh.write(",".join(row) + "\n")
            if self.failure:
                fh.write(f"# aborted: {self.failure}\n")


def read_metrics(path) -> MetricsLog:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines or not lines[0].startswith(METRICS_MAGIC):
        raise ConfigError(f"{path}: not a metrics file (expected "
                          f"'{METRICS_MAGIC}' header)")
    head = dict(tok.split("=", 1) for tok in lines[0].split() if "=" in tok)
    if "tasks" not in head:
        raise ConfigError(f"{path}: metrics header lacks the task list")
    task_names = tuple(head["tasks"].split(","))
    cols = metric_columns(task_names)
    if len(lines) < 2 or lines[1].split(",") != cols:
        raise ConfigError(f"{path}: unexpected metrics columns")
    failure = None
    rows: list[list[float]] = []
    for ln in lines[2:]:
        if ln.startswith("#"):
            if ln.startswith("# aborted:"):
                failure = ln[len("# aborted:"):].strip()
            continue
        cells = ln.split(",")
        if len(cells) != len(cols):
            raise ConfigError(f"{path}: row {len(rows) + 1} has {len(cells)} "
                              f"columns, expected {len(cols)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            raise ConfigError(f"{path}: non-numeric cell in row "
                              f"{len(rows) + 1}") from None
    m = len(task_names)
    data = np.array(rows) if rows else np.zeros((0, len(cols)))

    def block(i):
        return data[:, 6 + i * m: 6 + (i + 1) * m]

    return MetricsLog(None, int(head.get("seed", 0)), task_names,
                      engaged=data[:, 1].astype(int) if rows else np.zeros(0, int),
                      train_mse=data[:, 2], train_mae=data[:, 3],
                      energy_cum=data[:, 4], wall=data[:, 5],
                      eval_mae=block(0), lp=block(1), ec=block(2),
                      score=block(3), failure=failure)


# -- single runs ---------------------------------------------------------------


def build_caches(config: RunConfig, seed: int) -> list[ExperienceCache]:
    caches = []
    for i, name in enumerate(config.tasks):
        draw = rngmod.stream(seed, rngmod.MINIBATCH, i)
        if config.datasets is not None:
            caches.append(ExperienceCache.from_file(name, config.datasets[i], draw))
        else:
            data = rngmod.stream(seed, rngmod.DATA, i)
            caches.append(ExperienceCache.build(name, config.cache_size, data, draw))
    return caches


def eval_sets_for(config: RunConfig, seed: int) -> list[tuple]:
    """The fixed per-task eval batches a run with this seed used."""
    return [cache.eval_batch() for cache in build_caches(config, seed)]


def build_model(config: RunConfig, seed: int) -> MultiTaskModel:
    spec = config.network_spec()
    use_flag = config.use_flag and spec.variant == MULTI
    return MultiTaskModel(list(config.task_specs()), spec, config.use_attention,
                          use_flag, rng=seed)


def run(config: RunConfig, seed: int) -> tuple[MetricsLog, MultiTaskModel]:
    """One full training run. On a numeric abort the log is truncated to the
    completed epochs and carries the failure message instead of raising."""
    caches = build_caches(config, seed)
    model = build_model(config, seed)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    arb = ArbitrationState(len(config.tasks), config.strategy,
                           rngmod.stream(seed, rngmod.ARBITRATION))
    log = MetricsLog.empty(config, seed, config.epochs, config.tasks)
    evals = [cache.eval_batch() for cache in caches]
    energy_total = 0.0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        sel = arb.select(config.epochs)
        states, actions, effects = caches[sel.task].draw(config.batch)
        try:
            mse, mae, energy = model.train_step(sel.task, states, actions,
                                                effects, opt)
        except NumericError as err:
            log.truncate(epoch)
            log.failure = str(err)
            break
        arb.record(sel.task, mae, energy)
        arb.advance()
        energy_total += energy
        log.engaged[epoch] = sel.task
        log.train_mse[epoch] = mse
        log.train_mae[epoch] = mae
        log.energy_cum[epoch] = energy_total
        for j, (es, ea, ee) in enumerate(evals):
            log.eval_mae[epoch, j] = model.eval_mae(j, es, ea, ee)
        if sel.lp is not None:
            log.lp[epoch] = sel.lp
            log.score[epoch] = sel.scores
        if sel.ec is not None:
            log.ec[epoch] = sel.ec
        log.wall[epoch] = time.perf_counter() - t0
    return log, model


def run_seeds(config: RunConfig) -> tuple[list[MetricsLog], list[MultiTaskModel]]:
    logs, models = [], []
    for seed in config.seeds:
        log, model = run(config, seed)
        logs.append(log)
        models.append(model)
    return logs, models


# -- aggregation ---------------------------------------------------------------


@dataclass
class Aggregate:
    """Across-seed view of one configuration (or of the assembled SINGLE
    baseline). Seed order matches the config's seed list, so per-seed
    comparisons between aggregates line up index by index."""

    label: str
    task_names: tuple[str, ...]
    epochs: int
    seeds: tuple[int, ...]
    overall_per_seed: np.ndarray    # (n_seeds, R)
    per_task_per_seed: np.ndarray   # (n_seeds, R, m)
    energy_per_seed: np.ndarray     # (n_seeds, R) cumulative
    counts_per_seed: np.ndarray     # (n_seeds, m)

    @property
    def midpoint(self) -> int:
        return self.epochs // 2

    @property
    def overall_mean(self) -> np.ndarray:
        return self.overall_per_seed.mean(axis=0)

    @property
    def overall_std(self) -> np.ndarray:
        return self.overall_per_seed.std(axis=0)

    @property
    def per_task_mean(self) -> np.ndarray:
        return self.per_task_per_seed.mean(axis=0)

    def midpoint_overall(self) -> np.ndarray:
        return self.overall_per_seed[:, self.midpoint]

    def final_overall(self) -> np.ndarray:
        return self.overall_per_seed[:, -1]

    def midpoint_energy(self) -> np.ndarray:
        return self.energy_per_seed[:, self.midpoint]


def aggregate(logs: list[MetricsLog], label: str = "") -> Aggregate:
    if not logs:
        raise ConfigError("nothing to aggregate")
    first = logs[0]
    for log in logs:
        if log.failure:
            raise ConfigError(f"seed {log.seed} aborted: {log.failure}")
        if (log.config != first.config or log.task_names != first.task_names
                or log.epochs != first.epochs):
            raise ConfigError("aggregate over mixed configurations")
    if not label:
        label = first.config.strategy.kind if first.config else "runs"
    return Aggregate(
        label=label,
        task_names=first.task_names,
        epochs=first.epochs,
        seeds=tuple(log.seed for log in logs),
        overall_per_seed=np.stack([log.overall() for log in logs]),
        per_task_per_seed=np.stack([log.eval_mae for log in logs]),
        energy_per_seed=np.stack([log.energy_cum for log in logs]),
        counts_per_seed=np.stack([log.counts() for log in logs]),
    )


def aggregate_summary(agg: Aggregate) -> dict:
    """Plain-data snapshot for summary JSON and comparison tables."""
    mid = agg.midpoint
    return {
        "label": agg.label,
        "tasks": list(agg.task_names),
        "epochs": agg.epochs,
        "seeds": list(agg.seeds),
        "midpoint_epoch": mid,
        "midpoint_overall_mean": float(agg.midpoint_overall().mean()),
        "midpoint_overall_std": float(agg.midpoint_overall().std()),
        "final_overall_mean": float(agg.final_overall().mean()),
        "final_overall_std": float(agg.final_overall().std()),
        "midpoint_energy_mean": float(agg.midpoint_energy().mean()),
        "midpoint_per_task_mean": [
            float(v) for v in agg.per_task_per_seed[:, mid, :].mean(axis=0)],
        "engagement_counts_mean": [
            float(v) for v in agg.counts_per_seed.mean(axis=0)],
    }


# -- baselines and suites ------------------------------------------------------


def single_task_config(config: RunConfig, index: int) -> RunConfig:
    """The run engaging only task `index`, one leg of the SINGLE baseline."""
    return replace(config, strategy=replace(config.strategy, kind="single",
                                            single_task=index,
                                            block_order=None))


def run_single_baseline(config: RunConfig) -> tuple[Aggregate, list[MetricsLog]]:
    """SINGLE reference: one full-budget run per task that engages only that
    task, averaged over tasks.

    Each leg is an ordinary run of the shared model, so the non-engaged
    tasks sit at their starting error for the whole session and the overall
    curve shows what devoting the entire budget to one task costs the rest.
    Averaging the legs puts every task in the trained seat exactly once.
    All legs reuse the interleaved runs' per-task data streams, so a given
    seed sees identical datasets and eval batches across baselines; curves,
    energy, and counts are leg-averaged per seed.
    """
    legs, logs = [], []
    for i in range(len(config.tasks)):
        leg_logs, _ = run_seeds(single_task_config(config, i))
        legs.append(aggregate(leg_logs, "single"))
        logs.extend(leg_logs)
    first = legs[0]
    combined = Aggregate(
        label="single",
        task_names=first.task_names,
        epochs=first.epochs,
        seeds=first.seeds,
        overall_per_seed=np.mean([leg.overall_per_seed for leg in legs], axis=0),
        per_task_per_seed=np.mean([leg.per_task_per_seed for leg in legs], axis=0),
        energy_per_seed=np.mean([leg.energy_per_seed for leg in legs], axis=0),
        counts_per_seed=np.mean([leg.counts_per_seed for leg in legs], axis=0),
    )
    return combined, logs


@dataclass
class BlockResult:
    order: tuple[str, ...]
    aggregate: Aggregate
    forgetting: np.ndarray  # (n_seeds, blocks-1) MAE rise one block after each finish


def forgetting_deltas(log: MetricsLog) -> np.ndarray:
    """Per block boundary: eval MAE of the just-finished task one block-length
    later minus at its block end. Block extents are read off the engaged
    column, so this also works on logs loaded from disk."""
    engaged = log.engaged
    ends = np.flatnonzero(np.diff(engaged) != 0)
    if ends.size == 0:
        return np.zeros(0)
    span = log.epochs // (ends.size + 1)
    out = []
    for b in ends:
        task = int(engaged[b])
        later = min(b + span, log.epochs - 1)
        out.append(log.eval_mae[later, task] - log.eval_mae[b, task])
    return np.array(out)


def run_block_suite(config: RunConfig) -> list[BlockResult]:
    """BLOCK runs for every task-order permutation, with forgetting deltas."""
    m = len(config.tasks)
    if m > MAX_BLOCK_TASKS:
        raise ConfigError(f"block suite handles at most {MAX_BLOCK_TASKS} tasks "
                          f"(factorial growth), got {m}")
    results = []
    for perm in itertools.permutations(range(m)):
        strat = replace(config.strategy, kind="block", block_order=perm,
                        single_task=None)
        logs, _ = run_seeds(replace(config, strategy=strat))
        order = tuple(config.tasks[i] for i in perm)
        agg = aggregate(logs, label="block-" + ">".join(order))
        forgets = np.stack([forgetting_deltas(log) for log in logs])
        results.append(BlockResult(order, agg, forgets))
    return results


@dataclass
class SweepEntry:
    label: str
    k: float | None
    aggregate: Aggregate


def run_k_sweep(config: RunConfig,
                ks: tuple[float, ...] = DEFAULT_KS) -> list[SweepEntry]:
    """EMLP aggregates across k plus the LP and SINGLE references."""
    entries = []
    for k in ks:
        strat = replace(config.strategy, kind="emlp", k=k, single_task=None,
                        block_order=None)
        logs, _ = run_seeds(replace(config, strategy=strat))
        label = f"emlp-k={k:g}"
        entries.append(SweepEntry(label, k, aggregate(logs, label)))
    lp_strat = replace(config.strategy, kind="lp", single_task=None,
                       block_order=None)
    lp_logs, _ = run_seeds(replace(config, strategy=lp_strat))
    entries.append(SweepEntry("lp", None, aggregate(lp_logs, "lp")))
    single_agg, _ = run_single_baseline(config)
    entries.append(SweepEntry("single", None, single_agg))
    return entries


def ablation_config(config: RunConfig, mode: str) -> RunConfig:
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; "
                          f"one of {sorted(ABLATION_MODES)}")
    attn, flag = ABLATION_MODES[mode]
    return replace(config, use_attention=attn, use_flag=flag)


# -- transfer analysis ---------------------------------------------------------


def object_groups(task_name: str, actions: np.ndarray) -> dict[str, np.ndarray]:
    """Eval-row indices per object (push/hit) or picked+target pair (stack)."""
    if task_name == "stack":
        p = np.argmax(actions[:, :6], axis=1)
        t = np.argmax(actions[:, 6:], axis=1)
        groups = {}
        for i in range(6):
            for j in range(6):
                idx = np.flatnonzero((p == i) & (t == j))
                if idx.size:
                    groups[f"{OBJECTS[i].name}+{OBJECTS[j].name}"] = idx
        return groups
    obj = np.argmax(actions[:, 2:], axis=1)
    return {OBJECTS[o].name: np.flatnonzero(obj == o)
            for o in range(6) if np.any(obj == o)}


def expected_groups(task_name: str) -> list[str]:
    if task_name == "stack":
        return [f"{a.name}+{b.name}" for a in OBJECTS for b in OBJECTS]
    return [o.name for o in OBJECTS]


@dataclass
class TransferReport:
    """Loss change after zeroing one task's key/value row, per target task
    and object group, mean/std over checkpoints. The `none` source column is
    the no-ablation control and is identically zero."""

    task_names: tuple[str, ...]
    sources: tuple[str, ...]
    rows: list[dict]
    skipped: list[str]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# imtl-transfer 1\n")
            fh.write("target,group,source,n,dl_mean,dl_std,l_full\n")
            for r in self.rows:
                fh.write(f"{r['target']},{r['group']},{r['source']},{r['n']},"
                         f"{r['dl_mean']:.17g},{r['dl_std']:.17g},"
                         f"{r['l_full']:.17g}\n")
            for s in self.skipped:
                fh.write(f"# skipped: {s} (no eval samples)\n")


def run_transfer_analysis(models: list[MultiTaskModel],
                          eval_sets: list[list[tuple]]) -> TransferReport:
    """ΔL = L_ablated − L_full per (target task, object group, zeroed source).

    `eval_sets[r][j]` is the (states, actions, effects) eval batch of model r
    for task j — each checkpoint is scored on the eval split it was trained
    against. Groups with no eval samples in any checkpoint are noted as
    skipped.
    """
    if not models:
        raise ConfigError("transfer analysis needs at least one trained model")
    if len(eval_sets) != len(models):
        raise ConfigError("one eval-set list per model required")
    names = tuple(t.name for t in models[0].tasks)
    for model in models:
        if tuple(t.name for t in model.tasks) != names:
            raise ConfigError("transfer analysis over mixed task families")
        if not model.use_attention:
            raise ConfigError("transfer ablation needs the attention path")
    sources = ("none",) + names
    deltas: dict[tuple, list[float]] = {}
    fulls: dict[tuple, list[float]] = {}
    for model, sets in zip(models, eval_sets):
        for tgt, tname in enumerate(names):
            states, actions, effects = sets[tgt]
            for label, idx in object_groups(tname, actions).items():
                s, a, e = states[idx], actions[idx], effects[idx]
                l_full = model.eval_mae(tgt, s, a, e)
                fulls.setdefault((tname, label), []).append(l_full)
                # recomputed on purpose: the control column doubles as a
                # purity check and lands at exactly 0.0
                deltas.setdefault((tname, label, "none"), []).append(
                    model.eval_mae(tgt, s, a, e) - l_full)
                for src, sname in enumerate(names):
                    pred = model.forward(tgt, s, a, kv_zero_row=src)
                    l_abl = float(np.mean(np.abs(pred - e)))
                    deltas.setdefault((tname, label, sname), []).append(
                        l_abl - l_full)
    rows, skipped = [], []
    for tname in names:
        for label in expected_groups(tname):
            if (tname, label) not in fulls:
                skipped.append(f"{tname}:{label}")
                continue
            for sname in sources:
                vals = np.array(deltas[(tname, label, sname)])
                rows.append({
                    "target": tname, "group": label, "source": sname,
                    "n": int(vals.size), "dl_mean": float(vals.mean()),
                    "dl_std": float(vals.std()),
                    "l_full": float(np.mean(fulls[(tname, label)])),
                })
    return TransferReport(names, sources, rows, skipped)


# -- selection regime ----------------------------------------------------------


@dataclass
class SelectionRegime:
    window: int
    step: int
    starts: np.ndarray
    counts: np.ndarray  # (n_windows, m); every row sums to window


def selection_regime(log: MetricsLog, window: int = REGIME_WINDOW,
                     step: int = REGIME_STEP) -> SelectionRegime:
    if window < 1 or step < 1:
        raise ConfigError(f"window and step must be positive, "
                          f"got {window} and {step}")
    m = len(log.task_names)
    starts = np.arange(0, log.epochs - window + 1, step)
    counts = np.zeros((starts.size, m), dtype=int)
    for w, start in enumerate(starts):
        counts[w] = np.bincount(log.engaged[start:start + window], minlength=m)
    return SelectionRegime(window, step, starts, counts)
