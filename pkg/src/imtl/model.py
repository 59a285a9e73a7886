"""Shared-attention multi-task effect prediction network.

One model serves m tasks. Per task it owns a state projection, a two-layer
encoder head, an action projection and a four-layer decoder; the two-layer
trunk encoder and the attention block are shared. A forward pass for the
engaged task runs every task's encoder head on the shared features, marks the
engaged row with a flag bit, attends with the engaged row as query over the
stacked rows, and decodes [attended : projected action] into an effect delta.

Training updates only the shared trunk plus the engaged task's modules. The
other tasks' modules are frozen and their branches also block gradient flow,
so the trunk receives gradient solely through the engaged branch and through
the query/engaged key-value row.

The single-task variant is the same class with one task, no flag bit, and the
narrower width table; it exists so capacity-matched per-task baselines can be
trained with identical machinery.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, InternalError, NumericError
from .nn import (
    IDENTITY,
    RELU,
    AdamW,
    AttentionBlock,
    DenseLayer,
    Trace,
    attention_backward,
    dense_backward,
    energy_of,
)

MULTI = "multi"
SINGLE = "single"

TIER_TARGETS = {"low": 800, "medium": 2000, "high": 5200}
TIER_TOLERANCE = 0.05

CKPT_MAGIC = b"IMTLNET1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    name: str
    d_s: int
    d_a: int
    d_e: int

    def __post_init__(self):
        if min(self.d_s, self.d_a, self.d_e) < 1:
            raise ConfigError(f"task {self.name}: dims must be positive")


@dataclass(frozen=True)
class NetworkSpec:
    """Width table for one model family.

    state_width   output of the per-task state projections
    enc_hidden    hidden width of the shared trunk encoder
    enc_out       trunk output width, input to every task encoder head
    task_hidden   hidden width of the task encoder heads
    task_out      task latent width (the attention rows are this wide,
                  plus one flag coordinate in the multi-task variant)
    action_width  output of the per-task action projections
    dec_hidden    width of the three hidden decoder layers
    """

    variant: str = MULTI
    tier: str = "paper"
    state_width: int = 6
    enc_hidden: int = 6
    enc_out: int = 4
    task_hidden: int = 4
    task_out: int = 2
    action_width: int = 1
    dec_hidden: int = 4
    heads: int = 1

    def __post_init__(self):
        if self.variant not in (MULTI, SINGLE):
            raise ConfigError(f"unknown variant {self.variant!r}")
        dims = (self.state_width, self.enc_hidden, self.enc_out, self.task_hidden,
                self.task_out, self.action_width, self.dec_hidden, self.heads)
        if min(dims) < 1:
            raise ConfigError(f"network widths must be positive, got {dims}")

    @classmethod
    def paper_default(cls, variant: str = MULTI) -> "NetworkSpec":
        if variant == MULTI:
            return cls(variant=MULTI, tier="paper", state_width=6, enc_hidden=6,
                       enc_out=4, task_hidden=4, task_out=2, action_width=1,
                       dec_hidden=4)
        return cls(variant=SINGLE, tier="paper", state_width=4, enc_hidden=4,
                   enc_out=4, task_hidden=4, task_out=2, action_width=1,
                   dec_hidden=4)

    @classmethod
    def for_tier(cls, tier: str, tasks: tuple[TaskSpec, ...],
                 variant: str = MULTI) -> "NetworkSpec":
        """Resolve a complexity tier to concrete widths for a task family.

        The paper tier is the default width table verbatim. The low, medium
        and high tiers are found by a deterministic local search around the
        proportionally scaled default table; the winner must land within
        +/-5% of the tier's parameter budget (multi-task model total, or the
        sum over per-task single nets).
        """
        if tier == "paper":
            return cls.paper_default(variant)
        if tier not in TIER_TARGETS:
            raise ConfigError(f"unknown tier {tier!r}")
        return _solve_tier(tier, tuple(tasks), variant)


def flag_width(spec: NetworkSpec) -> int:
    return 1 if spec.variant == MULTI else 0


def row_width(spec: NetworkSpec, use_flag: bool) -> int:
    return spec.task_out + (1 if use_flag else 0)


def layer_plan(tasks: tuple[TaskSpec, ...], spec: NetworkSpec,
               use_attention: bool = True, use_flag: bool = True) -> list[tuple]:
    """Declaration-order plan: ("dense", name, d_in, d_out, act) and
    ("attn", name, d_model, heads, d_k) entries. Build, parameter count and
    the checkpoint layout all derive from this one function."""
    m = len(tasks)
    zw = row_width(spec, use_flag)
    dec_in = (zw if use_attention else m * zw) + spec.action_width
    plan: list[tuple] = []
    for i, t in enumerate(tasks):
        plan.append(("dense", f"p_state.{i}", t.d_s, spec.state_width, IDENTITY))
    plan.append(("dense", "enc.0", spec.state_width, spec.enc_hidden, RELU))
    plan.append(("dense", "enc.1", spec.enc_hidden, spec.enc_out, RELU))
    for i in range(m):
        plan.append(("dense", f"task_enc.{i}.0", spec.enc_out, spec.task_hidden, RELU))
        plan.append(("dense", f"task_enc.{i}.1", spec.task_hidden, spec.task_out, RELU))
    if use_attention:
        plan.append(("attn", "attn", zw, spec.heads, zw))
    for i, t in enumerate(tasks):
        plan.append(("dense", f"p_action.{i}", t.d_a, spec.action_width, IDENTITY))
    for i, t in enumerate(tasks):
        plan.append(("dense", f"dec.{i}.0", dec_in, spec.dec_hidden, RELU))
        plan.append(("dense", f"dec.{i}.1", spec.dec_hidden, spec.dec_hidden, RELU))
        plan.append(("dense", f"dec.{i}.2", spec.dec_hidden, spec.dec_hidden, RELU))
        plan.append(("dense", f"dec.{i}.3", spec.dec_hidden, t.d_e, IDENTITY))
    return plan


def param_count(tasks: tuple[TaskSpec, ...], spec: NetworkSpec,
                use_attention: bool = True, use_flag: bool = True) -> int:
    total = 0
    for entry in layer_plan(tuple(tasks), spec, use_attention, use_flag):
        if entry[0] == "dense":
            _, _, d_in, d_out, _ = entry
            total += d_out * (d_in + 1)
        else:
            _, _, d_model, heads, d_k = entry
            total += 3 * heads * d_model * d_k + heads * d_k * d_model
    return total


def family_param_count(spec: NetworkSpec, tasks: tuple[TaskSpec, ...]) -> int:
    """Parameters of the whole learner family: one multi-task net, or the sum
    of the per-task single nets."""
    tasks = tuple(tasks)
    if spec.variant == MULTI:
        return param_count(tasks, spec, use_flag=True)
    return sum(param_count((t,), spec, use_flag=False) for t in tasks)


@lru_cache(maxsize=None)
def _solve_tier(tier: str, tasks: tuple[TaskSpec, ...], variant: str) -> NetworkSpec:
    target = TIER_TARGETS[tier]
    base = NetworkSpec.paper_default(variant)
    scale = np.sqrt(target / family_param_count(base, tasks))

    def around(x, lo, span):
        c = int(round(x * scale))
        return range(max(lo, c - span), c + span + 1)

    best = None
    for s in around(base.state_width, 2, 5):
        for h in around(base.enc_out, 2, 5):
            if h > s:
                continue
            for r in around(base.task_out, 1, 4):
                if r > h:
                    continue
                for a in around(base.action_width, 1, 3):
                    if a > h:
                        continue
                    cand = NetworkSpec(variant=variant, tier=tier, state_width=s,
                                       enc_hidden=s, enc_out=h, task_hidden=h,
                                       task_out=r, action_width=a, dec_hidden=h)
                    count = family_param_count(cand, tasks)
                    key = (abs(count - target), s, h, r, a)
                    if best is None or key < best[0]:
                        best = (key, cand, count)
    _, cand, count = best
    if abs(count - target) > TIER_TOLERANCE * target:
        raise ConfigError(
            f"tier {tier!r}: closest width table has {count} parameters, "
            f"outside {target}+/-{TIER_TOLERANCE:.0%}")
    return cand


class MultiTaskModel:
    """The shared-attention effect predictor (single-task variant included)."""

    def __init__(self, tasks: list[TaskSpec], spec: NetworkSpec,
                 use_attention: bool = True, use_flag: bool = True,
                 rng: np.random.Generator | int | None = None):
        """Build the layer table.

        `rng` picks the weight-init mode: None gives all-zero parameters
        (checkpoint loading), a Generator is consumed sequentially, and an
        int seed derives one substream per layer keyed by the layer's name.
        The int form keeps a layer's draw independent of which other layers
        exist, so e.g. an ablated model shares its remaining layers' inits
        with the full model under the same seed.
        """
        if not tasks:
            raise ConfigError("at least one task required")
        if spec.variant == SINGLE and len(tasks) != 1:
            raise ConfigError("single-task variant takes exactly one task")
        if spec.variant == SINGLE and use_flag:
            raise ConfigError("single-task variant has no flag bit")
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names: {names}")
        self.tasks = list(tasks)
        self.spec = spec
        self.use_attention = use_attention
        self.use_flag = use_flag
        self.layers: dict[str, DenseLayer] = {}
        self.attn: AttentionBlock | None = None
        self._order: list[str] = []
        zero = rng is None

        def gen_for(name: str) -> np.random.Generator:
            if isinstance(rng, (int, np.integer)):
                return rngmod.stream(int(rng), rngmod.INIT, *name.encode())
            return rng

        for entry in layer_plan(tuple(tasks), spec, use_attention, use_flag):
            if entry[0] == "dense":
                _, name, d_in, d_out, act = entry
                if zero:
                    layer = DenseLayer(name, np.zeros((d_out, d_in)), np.zeros(d_out), act)
                else:
                    layer = DenseLayer.init(name, d_in, d_out, act, gen_for(name))
                self.layers[name] = layer
                self._order.append(name)
            else:
                _, name, d_model, heads, d_k = entry
                if zero:
                    self.attn = AttentionBlock(
                        name, np.zeros((heads, d_model, d_k)), np.zeros((heads, d_model, d_k)),
                        np.zeros((heads, d_model, d_k)), np.zeros((heads * d_k, d_model)))
                else:
                    self.attn = AttentionBlock.init(name, d_model, heads, d_k, gen_for(name))
                self._order.append(name)

    # -- parameter bookkeeping -------------------------------------------------

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def z_width(self) -> int:
        return row_width(self.spec, self.use_flag)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """All parameters as (name, array), checkpoint declaration order."""
        out = []
        for name in self._order:
            if name == "attn":
                for part in ("wq", "wk", "wv", "wo"):
                    out.append((f"attn.{part}", getattr(self.attn, part)))
            else:
                layer = self.layers[name]
                out.append((f"{name}.w", layer.w))
                out.append((f"{name}.b", layer.b))
        return out

    def shared_param_names(self) -> set[str]:
        shared = {"enc.0.w", "enc.0.b", "enc.1.w", "enc.1.b"}
        if self.use_attention:
            shared |= {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}
        return shared

    def task_param_names(self, task: int) -> set[str]:
        names = set()
        for mod in (f"p_state.{task}", f"p_action.{task}",
                    f"task_enc.{task}.0", f"task_enc.{task}.1",
                    f"dec.{task}.0", f"dec.{task}.1", f"dec.{task}.2", f"dec.{task}.3"):
            names.add(f"{mod}.w")
            names.add(f"{mod}.b")
        return names

    def trainable_names(self, engaged: int) -> set[str]:
        return self.shared_param_names() | self.task_param_names(engaged)

    # -- forward / backward ----------------------------------------------------

    def _check_engaged(self, engaged: int) -> None:
        if not 0 <= engaged < self.n_tasks:
            raise ConfigError(f"engaged task {engaged} out of range 0..{self.n_tasks - 1}")

    def task_latents(self, engaged: int, states: np.ndarray) -> list[np.ndarray]:
        """Every task head's latent for the engaged task's states (no trace)."""
        self._check_engaged(engaged)
        xh = self.layers[f"p_state.{engaged}"].forward(states)
        h = self.layers["enc.1"].forward(self.layers["enc.0"].forward(xh))
        out = []
        for i in range(self.n_tasks):
            u = self.layers[f"task_enc.{i}.0"].forward(h)
            out.append(self.layers[f"task_enc.{i}.1"].forward(u))
        return out

    def forward(self, engaged: int, states: np.ndarray, actions: np.ndarray,
                trace: Trace | None = None,
                pinned_latents: dict[int, np.ndarray] | None = None,
                kv_zero_row: int | None = None) -> np.ndarray:
        """Predict effects for the engaged task.

        pinned_latents replaces non-engaged task latents with the given
        constants (the finite-difference oracle pins them at their base
        values, mirroring the blocked gradient flow). kv_zero_row zeroes one
        row of the key/value stack while leaving the query alone; that is the
        source-ablation probe and is forward-only.
        """
        self._check_engaged(engaged)
        task = self.tasks[engaged]
        if states.ndim != 2 or states.shape[1] != task.d_s:
            raise ConfigError(
                f"task {task.name}: states must be (n, {task.d_s}), got {states.shape}")
        if actions.ndim != 2 or actions.shape[1] != task.d_a:
            raise ConfigError(
                f"task {task.name}: actions must be (n, {task.d_a}), got {actions.shape}")
        if kv_zero_row is not None:
            if not self.use_attention:
                raise ConfigError("kv_zero_row requires the attention path")
            if not 0 <= kv_zero_row < self.n_tasks:
                raise ConfigError(f"kv_zero_row {kv_zero_row} out of range")
        n = states.shape[0]
        m = self.n_tasks
        r = self.spec.task_out
        zw = self.z_width
        pairs: dict[str, tuple[np.ndarray, np.ndarray]] = {}

        def run(name, x):
            y = self.layers[name].forward(x, trace)
            if trace is not None:
                pairs[name] = (x, y)
            return y

        xh = run(f"p_state.{engaged}", states)
        h = run("enc.1", run("enc.0", xh))
        lat = []
        for i in range(m):
            u = run(f"task_enc.{i}.0", h)
            lat.append(run(f"task_enc.{i}.1", u))
        if pinned_latents is not None:
            for i, pin in pinned_latents.items():
                if i != engaged:
                    lat[i] = pin
        z = np.zeros((n, m, zw))
        for i in range(m):
            z[:, i, :r] = lat[i]
        if self.use_flag:
            z[:, engaged, r] = 1.0
        ah = run(f"p_action.{engaged}", actions)
        if self.use_attention:
            kv = z
            if kv_zero_row is not None:
                kv = z.copy()
                kv[:, kv_zero_row, :] = 0.0
            q = z[:, engaged, :]
            att = self.attn.forward(q, kv, kv, trace)
            dec_x = np.concatenate([att, ah], axis=1)
        else:
            dec_x = np.concatenate([z.reshape(n, m * zw), ah], axis=1)
        y = dec_x
        for j in range(4):
            y = run(f"dec.{engaged}.{j}", y)
        if trace is not None:
            trace.saved["ctx"] = {
                "engaged": engaged, "pairs": pairs, "n": n, "z": z,
                "ablated_kv": kv_zero_row is not None,
            }
        return y

    def backward(self, trace: Trace, dpred: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the traced forward for shared + engaged parameters.

        Frozen modules get no entry at all; their branches also block flow,
        so the trunk gradient arrives only via the engaged branch and the
        query/engaged key-value row.
        """
        ctx = trace.saved.get("ctx")
        if ctx is None:
            raise InternalError("backward called without a traced forward")
        if ctx["ablated_kv"]:
            raise InternalError("backward after a source-ablated forward")
        engaged = ctx["engaged"]
        pairs = ctx["pairs"]
        m = self.n_tasks
        r = self.spec.task_out
        zw = self.z_width
        n = ctx["n"]
        grads: dict[str, np.ndarray] = {}

        def back(name, dy):
            x, y = pairs[name]
            dw, db, dx = dense_backward(self.layers[name], x, y, dy)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
            return dx

        dy = dpred
        for j in (3, 2, 1, 0):
            dy = back(f"dec.{engaged}.{j}", dy)
        a = self.spec.action_width
        dah = dy[:, -a:]
        if self.use_attention:
            att_grads, dq, dk, dv = attention_backward(
                self.attn, trace.saved["attn"], dy[:, :zw])
            for part, g in att_grads.items():
                grads[f"attn.{part}"] = g
            dz_eng = dq + dk[:, engaged, :] + dv[:, engaged, :]
        else:
            dz = dy[:, :m * zw].reshape(n, m, zw)
            dz_eng = dz[:, engaged, :]
        back(f"p_action.{engaged}", dah)
        dlat = dz_eng[:, :r]  # flag coordinate is a constant input
        dh = back(f"task_enc.{engaged}.0", back(f"task_enc.{engaged}.1", dlat))
        dxh = back("enc.0", back("enc.1", dh))
        back(f"p_state.{engaged}", dxh)
        return grads

    # -- training and evaluation ----------------------------------------------

    def train_step(self, engaged: int, states: np.ndarray, actions: np.ndarray,
                   effects: np.ndarray, opt: AdamW) -> tuple[float, float, float]:
        """One minibatch update on the engaged task.

        Returns (train MSE, train MAE, activity energy of the forward). The
        MSE drives the gradient; the MAE is the reported error signal.
        """
        trace = Trace()
        pred = self.forward(engaged, states, actions, trace)
        err = pred - effects
        mse = float(np.mean(err * err))
        mae = float(np.mean(np.abs(err)))
        if not np.isfinite(mse):
            raise NumericError(f"non-finite loss on task {self.tasks[engaged].name}")
        dpred = (2.0 / err.size) * err
        grads = self.backward(trace, dpred)
        opt.step(self.parameters(), grads)
        return mse, mae, energy_of(trace)

    def eval_mae(self, task: int, states: np.ndarray, actions: np.ndarray,
                 effects: np.ndarray) -> float:
        """Mean absolute error on held-out samples; touches no state or RNG."""
        pred = self.forward(task, states, actions)
        return float(np.mean(np.abs(pred - effects)))

    # -- checkpoint I/O --------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "spec": asdict(self.spec),
            "use_attention": self.use_attention,
            "use_flag": self.use_flag,
            "tasks": [asdict(t) for t in self.tasks],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
            fh.write(blob)
            for _, arr in self.parameters():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "MultiTaskModel":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != CKPT_MAGIC:
            raise ConfigError(f"{path}: not a model checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != CKPT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[16:16 + hlen].decode())
        spec = NetworkSpec(**header["spec"])
        tasks = [TaskSpec(**t) for t in header["tasks"]]
        model = cls(tasks, spec, header["use_attention"], header["use_flag"], rng=None)
        offset = 16 + hlen
        for name, arr in model.parameters():
            nbytes = arr.size * 8
            chunk = raw[offset:offset + nbytes]
            if len(chunk) != nbytes:
                raise ConfigError(f"{path}: truncated at parameter {name} "
                                  f"(byte offset {offset})")
            arr[...] = np.frombuffer(chunk, dtype="<f8").reshape(arr.shape)
            offset += nbytes
        if offset != len(raw):
            raise ConfigError(f"{path}: {len(raw) - offset} trailing bytes")
        return model
