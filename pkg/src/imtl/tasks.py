"""Synthetic desk-top manipulation tasks: push, hit, stack.

Ground truth comes from a frozen teacher network so datasets are cheap,
exactly reproducible, and structurally related across tasks. The teacher
squashes [state ; compressed action] through a fixed tanh core and exposes
four linear modes: three "anchor" modes that track the displacement head of
the input plus a dense mix, and one purely featural mode riding on the tanh
core alone. Every task reads the same modes through its own fixed
orthogonal map, which is what makes skills transfer:

  push   smooth anchor-dominant read, scaled by object mobility; rollable
         objects (sphere, lying cylinder) move further than flat ones.
  hit    core-dominant read with a higher gain and the positional components
         folded back into [-1, 1] by reflection at the borders; built from
         the same modes as push but with a harder, non-smooth response.
  stack  pick-and-place of an object pair. Geometrically stable pairs (flat
         base, non-rolling picked object) produce an anchor-read placement
         plus a small residual; unstable pairs produce a reflected fall with
         an unbounded slide component, and toppling targets tip over.
         Hardest of the three and related to both others.

States are [x, y, rest height, sin/cos of three orientation angles] per
object; actions are [sin, cos of the approach angle, object one-hot] for
push/hit and the two object one-hots for stack; effects are state deltas.
Matched seeds give push and hit identical inputs, and their effects are
linear images of the same four mode values — the hook that shared-trunk
transfer needs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DatasetFormatError
from .model import TaskSpec

TEACHER_SEED = 618_033_988  # frozen forever; datasets depend only on (task, seed, n)

CORE_SCALE = 0.5
CORE_BIAS_SCALE = 0.3
COMPRESS_SCALE = 0.5
MODE_ANCHOR = 0.9       # each anchor mode's weight on its displacement input
MODE_MIX = 0.12         # dense cross-mix into the anchor modes
MODE_FEAT_SCALE = 0.20  # tanh-core contribution to the anchor modes
CORE_MODE_SCALE = 0.55  # the purely featural fourth mode

PUSH_OUT = 0.7          # push displacement scale on the anchor modes
PUSH_CORE = 0.25        # push barely touches the featural mode
HIT_GAIN = 2.5
HIT_ANCHOR = 0.45       # hit reads anchors weakly, the featural mode fully
PLACE_SCALE = 1.0       # stable-stack placement read off the anchor modes
FALL_GAIN = 1.2         # reflected component of a fall off an unstable pair
FALL_SLIDE = 2.0        # unreflected slide component of the same fall
SLIDE_ANCHOR = 0.35     # anchor-mode weight inside the slide read
SLIDE_CORE = 1.25       # featural-mode weight inside the slide read
TOPPLE_SCALE = 0.6
RESIDUAL_SCALE = 0.04   # keeps stable-pair target effects under 0.05

EVAL_FRACTION = 0.1
EVAL_LIMIT = 200


@dataclass(frozen=True)
class ObjectConfig:
    name: str
    mobility: float       # effect gain; rollable objects move more
    topples: bool
    rest_height: float
    stable_base: bool     # can be stacked onto


OBJECTS = (
    ObjectConfig("sphere", 1.00, False, 0.25, False),
    ObjectConfig("cube", 0.20, False, 0.30, True),
    ObjectConfig("prism_h", 0.30, False, 0.45, False),
    ObjectConfig("prism_v", 0.25, True, 0.60, True),
    ObjectConfig("cylinder_h", 0.80, False, 0.75, False),
    ObjectConfig("cylinder_v", 0.30, True, 0.90, True),
)

MOBILITY = np.array([o.mobility for o in OBJECTS])
REST_HEIGHT = np.array([o.rest_height for o in OBJECTS])
TOPPLES = np.array([o.topples for o in OBJECTS])
STABLE_BASE = np.array([o.stable_base for o in OBJECTS])
NON_ROLLING = MOBILITY <= 0.3  # safe to place on top of something

TASK_SPECS = {
    "push": TaskSpec("push", 9, 8, 9),
    "hit": TaskSpec("hit", 9, 8, 9),
    "stack": TaskSpec("stack", 18, 12, 18),
}
TASK_NAMES = tuple(TASK_SPECS)


def reflect(v):
    """Fold values back into [-1, 1] by reflecting at the borders.

    reflect(1.4) == 0.6, reflect(-2.5) == 0.5; values inside stay put.
    """
    m = (np.asarray(v, dtype=float) + 1.0) % 4.0
    return np.where(m <= 2.0, m - 1.0, 3.0 - m)


def one_hot(idx: np.ndarray, width: int = 6) -> np.ndarray:
    out = np.zeros((idx.size, width))
    out[np.arange(idx.size), idx] = 1.0
    return out


class TeacherModel:
    """The frozen ground-truth map behind every generator.

    core: R^13 -> R^16 affine + tanh on [state ; compressed action]; four
    linear modes (three displacement-anchored, one featural) read the input
    and the core; per-purpose orthogonal maps turn modes into effects. The
    weights are drawn once from a fixed seed and never depend on dataset
    seeds.
    """

    def __init__(self):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(TEACHER_SEED)))
        self.compress = COMPRESS_SCALE * rng.uniform(-1, 1, size=(4, 8))
        self.core_w = CORE_SCALE * rng.uniform(-1, 1, size=(16, 13))
        self.core_b = CORE_BIAS_SCALE * rng.uniform(-1, 1, size=16)
        lin = MODE_MIX * rng.uniform(-1, 1, size=(4, 13))
        lin[:3, :3] += MODE_ANCHOR * np.eye(3)
        lin[3, :] = 0.0                                   # mode 4: core only
        self.mode_lin = lin
        feat = MODE_FEAT_SCALE * rng.uniform(-1, 1, size=(4, 16))
        feat[3] = CORE_MODE_SCALE * rng.uniform(-1, 1, size=16)
        self.mode_feat = feat

        def orth(rows, cols):
            q, _ = np.linalg.qr(rng.uniform(-1, 1, size=(rows, cols)))
            return np.sqrt(cols) * q

        self.map_push = orth(9, 4) @ np.diag(
            [PUSH_OUT, PUSH_OUT, PUSH_OUT, PUSH_OUT * PUSH_CORE])
        self.map_hit = orth(9, 4) @ np.diag(
            [HIT_ANCHOR, HIT_ANCHOR, HIT_ANCHOR, 1.0])
        self.map_fall = orth(9, 4) @ np.diag([0.4, 0.4, 0.4, 1.0])
        self.map_topple = orth(9, 4) @ np.diag([0.4, 0.4, 0.4, 1.0])
        self.resid_head_p = rng.uniform(-1, 1, size=(9, 16))
        self.resid_head_t = rng.uniform(-1, 1, size=(9, 16))
        self.mix_stack = 0.5 * rng.uniform(-1, 1, size=(6, 18))
        self.compress_stack = 0.4 * rng.uniform(-1, 1, size=(4, 12))
        self.map_slide = orth(9, 4) @ np.diag(
            [SLIDE_ANCHOR, SLIDE_ANCHOR, SLIDE_ANCHOR, SLIDE_CORE])

    def features(self, u: np.ndarray) -> np.ndarray:
        return np.tanh(u @ self.core_w.T + self.core_b)

    def modes(self, u: np.ndarray) -> np.ndarray:
        return u @ self.mode_lin.T + self.features(u) @ self.mode_feat.T

    def push_u(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.concatenate([states, actions @ self.compress.T], axis=1)

    def push_effect(self, states: np.ndarray, actions: np.ndarray,
                    mobility: np.ndarray) -> np.ndarray:
        g = self.modes(self.push_u(states, actions))
        return mobility[:, None] * (g @ self.map_push.T)


TEACHER = TeacherModel()


def _object_state(rng: np.random.Generator, obj: np.ndarray) -> np.ndarray:
    """[x, y, rest height, sin/cos of three pose angles] for given objects."""
    n = obj.size
    xy = rng.uniform(-1, 1, size=(n, 2))
    ang = rng.uniform(0, 2 * np.pi, size=(n, 3))
    sincos = np.stack([np.sin(ang), np.cos(ang)], axis=2).reshape(n, 6)
    return np.concatenate([xy, REST_HEIGHT[obj][:, None], sincos], axis=1)


def _sample_push_inputs(rng: np.random.Generator, n: int):
    """Shared by push and hit so matched seeds give matched samples."""
    obj = rng.integers(0, len(OBJECTS), size=n)
    states = _object_state(rng, obj)
    theta = rng.uniform(0, np.pi, size=n)
    actions = np.concatenate(
        [np.sin(theta)[:, None], np.cos(theta)[:, None], one_hot(obj)], axis=1)
    return obj, states, actions


def gen_push(n: int, rng: np.random.Generator):
    obj, states, actions = _sample_push_inputs(rng, n)
    effects = TEACHER.push_effect(states, actions, MOBILITY[obj])
    return states, actions, effects


def gen_hit(n: int, rng: np.random.Generator):
    obj, states, actions = _sample_push_inputs(rng, n)
    g = TEACHER.modes(TEACHER.push_u(states, actions))
    raw = HIT_GAIN * MOBILITY[obj][:, None] * (g @ TEACHER.map_hit.T)
    raw[:, :3] = reflect(raw[:, :3])
    return states, actions, raw


def _stack_u(sp: np.ndarray, st: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Teacher input for a pair: displacement head, mixed states, actions."""
    head = np.stack([st[:, 0] - sp[:, 0], st[:, 1] - sp[:, 1],
                     2.0 * st[:, 2]], axis=1)
    mid = np.concatenate([sp, st], axis=1) @ TEACHER.mix_stack.T
    return np.concatenate([head, mid, actions @ TEACHER.compress_stack.T], axis=1)


def gen_stack(n: int, rng: np.random.Generator):
    obj_p = rng.integers(0, len(OBJECTS), size=n)
    obj_t = rng.integers(0, len(OBJECTS), size=n)
    sp = _object_state(rng, obj_p)
    st = _object_state(rng, obj_t)
    states = np.concatenate([sp, st], axis=1)
    actions = np.concatenate([one_hot(obj_p), one_hot(obj_t)], axis=1)

    stable = STABLE_BASE[obj_t] & NON_ROLLING[obj_p]
    u = _stack_u(sp, st, actions)
    g = TEACHER.modes(u)
    feats = TEACHER.features(u)
    resid_p = RESIDUAL_SCALE * np.tanh(feats @ TEACHER.resid_head_p.T)
    resid_t = RESIDUAL_SCALE * np.tanh(feats @ TEACHER.resid_head_t.T)

    # stable: picked lands near the target (anchor read), target barely moves
    e_p_stable = np.zeros((n, 9))
    e_p_stable[:, :3] = PLACE_SCALE * g[:, :3]
    e_p_stable += resid_p
    e_t_stable = resid_t

    # unstable: the picked object falls off — a reflected hit-style component
    # plus an unreflected slide — and toppling targets tip over
    fall = FALL_GAIN * MOBILITY[obj_p][:, None] * (g @ TEACHER.map_fall.T)
    fall[:, :3] = reflect(fall[:, :3])
    fall += FALL_SLIDE * MOBILITY[obj_p][:, None] * (g @ TEACHER.map_slide.T)
    topple = TOPPLE_SCALE * MOBILITY[obj_t][:, None] * (g @ TEACHER.map_topple.T)
    topple[:, :3] = reflect(topple[:, :3])
    e_t_unstable = np.where(TOPPLES[obj_t][:, None], topple, resid_t)

    mask = stable[:, None]
    e_p = np.where(mask, e_p_stable, fall)
    e_t = np.where(mask, e_t_stable, e_t_unstable)
    return states, actions, np.concatenate([e_p, e_t], axis=1)


GENERATORS = {"push": gen_push, "hit": gen_hit, "stack": gen_stack}


def generate(task: str, n: int, rng: np.random.Generator):
    if task not in GENERATORS:
        raise ConfigError(f"unknown task {task!r}; one of {TASK_NAMES}")
    if n < 1:
        raise ConfigError(f"sample count must be positive, got {n}")
    return GENERATORS[task](n, rng)


class ExperienceCache:
    """Fixed sample store with a positional 90/10 train/eval split.

    Minibatches are drawn uniformly with replacement from the train part
    using the cache's own RNG stream; the eval batch is the first
    EVAL_LIMIT eval samples and never changes.
    """

    def __init__(self, task: TaskSpec, states, actions, effects,
                 draw_rng: np.random.Generator):
        n = states.shape[0]
        if actions.shape[0] != n or effects.shape[0] != n:
            raise ConfigError(f"task {task.name}: sample counts disagree")
        for arr, d, what in ((states, task.d_s, "state"), (actions, task.d_a, "action"),
                             (effects, task.d_e, "effect")):
            if arr.ndim != 2 or arr.shape[1] != d:
                raise ConfigError(
                    f"task {task.name}: {what} width {arr.shape} does not match {d}")
        n_eval = int(n * EVAL_FRACTION)
        if n_eval < 1:
            raise ConfigError(f"task {task.name}: {n} samples is too small to split")
        self.task = task
        self.states, self.actions, self.effects = states, actions, effects
        self.n_train = n - n_eval
        self.rng = draw_rng
        ev = slice(self.n_train, min(self.n_train + EVAL_LIMIT, n))
        self._eval = (states[ev], actions[ev], effects[ev])

    @classmethod
    def build(cls, task_name: str, n: int, data_rng: np.random.Generator,
              draw_rng: np.random.Generator) -> "ExperienceCache":
        states, actions, effects = generate(task_name, n, data_rng)
        return cls(TASK_SPECS[task_name], states, actions, effects, draw_rng)

    @classmethod
    def from_file(cls, task_name: str, path,
                  draw_rng: np.random.Generator) -> "ExperienceCache":
        spec = TASK_SPECS[task_name]
        states, actions, effects = read_dataset(path, spec)
        return cls(spec, states, actions, effects, draw_rng)

    @property
    def n_total(self) -> int:
        return self.states.shape[0]

    def draw(self, batch: int):
        if batch < 1 or batch > self.n_train:
            raise ConfigError(
                f"task {self.task.name}: batch {batch} not in 1..{self.n_train}")
        idx = self.rng.integers(0, self.n_train, size=batch)
        return self.states[idx], self.actions[idx], self.effects[idx]

    def eval_batch(self):
        return self._eval


def write_dataset(path, task: TaskSpec, states, actions, effects) -> None:
    """Header `d_s,d_a,d_e`, then one sample per line, 17 significant digits."""
    rows = np.concatenate([states, actions, effects], axis=1)
    with open(path, "w") as fh:
        fh.write(f"{task.d_s},{task.d_a},{task.d_e}\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_dataset(path, expect: TaskSpec | None = None):
    """Parse a dataset file back into (states, actions, effects).

    Errors carry the byte offset of the offending line so they can be found
    in large files.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    offset = 0
    header = lines[0].decode("ascii", errors="replace").strip()
    parts = header.split(",")
    try:
        d_s, d_a, d_e = (int(p) for p in parts)
    except ValueError:
        raise DatasetFormatError(
            f"{path}: malformed header {header!r}, expected d_s,d_a,d_e",
            byte_offset=0, line_no=1) from None
    if expect is not None and (d_s, d_a, d_e) != (expect.d_s, expect.d_a, expect.d_e):
        raise DatasetFormatError(
            f"{path}: dims {d_s},{d_a},{d_e} do not match task {expect.name} "
            f"({expect.d_s},{expect.d_a},{expect.d_e})", byte_offset=0, line_no=1)
    width = d_s + d_a + d_e
    offset = len(lines[0]) + 1
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        text = line.decode("ascii", errors="replace").strip()
        if text:
            cells = text.split(",")
            if len(cells) != width:
                raise DatasetFormatError(
                    f"{path}: line {line_no} has {len(cells)} columns, expected {width}",
                    byte_offset=offset, line_no=line_no)
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise DatasetFormatError(
                    f"{path}: line {line_no} has a non-numeric cell",
                    byte_offset=offset, line_no=line_no) from None
        offset += len(line) + 1
    if not rows:
        raise DatasetFormatError(f"{path}: no samples", byte_offset=len(raw))
    data = np.array(rows)
    return data[:, :d_s], data[:, d_s:d_s + d_a], data[:, d_s + d_a:]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
