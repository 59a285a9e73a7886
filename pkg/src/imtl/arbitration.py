"""Task arbitration: who trains this epoch.

Progress-guided strategies keep, per task, a ring buffer of the training
errors (and activity energies) from that task's last few engagements. The
learning-progress score is the magnitude of the fitted error slope when the
error is falling, zero otherwise. The energy-modulated score divides
exp(k * scaled progress) by the scaled recent energy, so small k favors cheap
tasks and large k favors fast-improving ones.

Scheduling strategies:
  lp      epsilon-greedy on learning progress
  emlp    epsilon-greedy on the energy-modulated score
  rand    uniform over tasks every epoch
  block   fixed task order, one contiguous block each
  single  one fixed task forever

lp and emlp start with a round-robin warm-up of window engagements per task
(exploration suspended) so every buffer is full before scores are compared.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

KINDS = ("lp", "emlp", "rand", "block", "single")
SCORED_KINDS = ("lp", "emlp")


def slope(values) -> float:
    """OLS slope of values against abscissae 0..n-1."""
    y = np.asarray(values, dtype=float)
    if y.size < 2:
        raise ConfigError(f"slope needs at least two values, got {y.size}")
    t = np.arange(y.size, dtype=float)
    tc = t - t.mean()
    return float((tc @ (y - y.mean())) / (tc @ tc))


def learning_progress(errors) -> float:
    """|slope| of the recent errors when they are falling, else 0."""
    b = slope(errors)
    return -b if b < 0.0 else 0.0


def energy_consumption(energies) -> float:
    """Total activity energy over the recorded engagements."""
    if len(energies) == 0:
        raise ConfigError("energy consumption needs at least one value")
    return float(sum(energies))


def minmax_scale(values) -> np.ndarray:
    """Scale across tasks to [0, 1]; a degenerate spread maps to all 0.5."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 0.5)
    return (v - lo) / (hi - lo)


def emlp_scores(lp_scaled, ec_scaled, k: float, floor: float = 1e-6) -> np.ndarray:
    """exp(k * LP) / EC on already min-max-scaled inputs, with EC floored at
    `floor` so a task whose scaled energy is exactly 0 cannot blow up the
    ratio."""
    if k <= 0.0:
        raise ConfigError(f"modulation gain k must be positive, got {k}")
    if floor <= 0.0:
        raise ConfigError(f"score floor must be positive, got {floor}")
    lp_s = np.asarray(lp_scaled, dtype=float)
    ec_s = np.maximum(np.asarray(ec_scaled, dtype=float), floor)
    return np.exp(k * lp_s) / ec_s


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    k: float = 1.0
    epsilon: float = 0.1
    window: int = 5
    score_floor: float = 1e-6
    block_order: tuple[int, ...] | None = None
    single_task: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; one of {KINDS}")
        if self.kind == "emlp" and self.k <= 0.0:
            raise ConfigError(f"emlp needs k > 0, got {self.k}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.window < 2:
            raise ConfigError(f"window must be at least 2, got {self.window}")
        if self.score_floor <= 0.0:
            raise ConfigError(f"score floor must be positive, got {self.score_floor}")
        if self.kind == "block" and not self.block_order:
            raise ConfigError("block strategy needs block_order")
        if self.kind == "single" and self.single_task is None:
            raise ConfigError("single strategy needs single_task")


class Selection(NamedTuple):
    task: int
    lp: np.ndarray | None      # per-task, None when not applicable yet
    ec: np.ndarray | None
    scores: np.ndarray | None


class TaskHistories:
    """Ring buffers of each task's last `window` training errors/energies.

    Buffers advance only when their task is engaged; an idle task keeps its
    stale window and therefore its last computed score.
    """

    def __init__(self, n_tasks: int, window: int):
        self.errors = [deque(maxlen=window) for _ in range(n_tasks)]
        self.energies = [deque(maxlen=window) for _ in range(n_tasks)]

    def record(self, task: int, error: float, energy: float) -> None:
        self.errors[task].append(float(error))
        self.energies[task].append(float(energy))


class ArbitrationState:
    """Selection state for one run: histories, epoch counter, its own RNG."""

    def __init__(self, n_tasks: int, strategy: StrategyConfig, rng: np.random.Generator):
        if n_tasks < 1:
            raise ConfigError("need at least one task")
        if strategy.kind == "block":
            if sorted(strategy.block_order) != list(range(n_tasks)):
                raise ConfigError(
                    f"block_order must be a permutation of 0..{n_tasks - 1}, "
                    f"got {strategy.block_order}")
        if strategy.kind == "single" and not 0 <= strategy.single_task < n_tasks:
            raise ConfigError(f"single_task {strategy.single_task} out of range")
        self.n_tasks = n_tasks
        self.strategy = strategy
        self.rng = rng
        self.histories = TaskHistories(n_tasks, strategy.window)
        self.counts = np.zeros(n_tasks, dtype=int)
        self.epoch = 0

    @property
    def warmup_epochs(self) -> int:
        if self.strategy.kind in SCORED_KINDS:
            return self.n_tasks * self.strategy.window
        return 0

    def select(self, total_epochs: int) -> Selection:
        s = self.strategy
        m = self.n_tasks
        if s.kind == "rand":
            return Selection(int(self.rng.integers(m)), None, None, None)
        if s.kind == "single":
            return Selection(s.single_task, None, None, None)
        if s.kind == "block":
            if total_epochs < 1:
                raise ConfigError("block strategy needs total_epochs >= 1")
            idx = min(self.epoch * m // total_epochs, m - 1)
            return Selection(s.block_order[idx], None, None, None)
        if self.epoch < self.warmup_epochs:
            return Selection(self.epoch % m, None, None, None)
        lp = np.array([learning_progress(h) for h in self.histories.errors])
        if s.kind == "emlp":
            ec = np.array([energy_consumption(h) for h in self.histories.energies])
            scores = emlp_scores(minmax_scale(lp), minmax_scale(ec), s.k, s.score_floor)
        else:
            ec = None
            scores = lp
        return Selection(self._eps_greedy(scores), lp, ec, scores)

    def _eps_greedy(self, scores: np.ndarray) -> int:
        """Argmax with uniform tie-breaking; with prob epsilon, explore
        uniformly among the other tasks (never the argmax itself)."""
        top = np.flatnonzero(scores == scores.max())
        if top.size == 1:
            best = int(top[0])
        else:
            best = int(top[self.rng.integers(top.size)])
        if self.n_tasks > 1 and self.rng.uniform() < self.strategy.epsilon:
            others = [i for i in range(self.n_tasks) if i != best]
            return others[int(self.rng.integers(len(others)))]
        return best

    def record(self, task: int, error: float, energy: float) -> None:
        self.histories.record(task, error, energy)
        self.counts[task] += 1

    def advance(self) -> None:
        self.epoch += 1
