"""Dense layers, scaled dot-product attention, AdamW, and gradient checking.

Everything is float64 numpy; there is no autograd. A forward pass records a
Trace holding every post-activation output (the activity-energy meter sums
their absolute values) together with the intermediates the matching backward
function needs. Backward functions return parameter and input gradients
explicitly, so the call graph of a model's backward mirrors its forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError

RELU = "relu"
IDENTITY = "identity"


@dataclass
class TraceEntry:
    name: str
    output: np.ndarray


@dataclass
class Trace:
    """Per-forward record: energy entries plus saved backward intermediates."""

    entries: list[TraceEntry] = field(default_factory=list)
    saved: dict = field(default_factory=dict)

    def add(self, name: str, output: np.ndarray) -> None:
        self.entries.append(TraceEntry(name, output))


def energy_of(trace: Trace) -> float:
    """Total activity of one forward: sum of |x| over every recorded output."""
    return float(sum(np.abs(entry.output).sum() for entry in trace.entries))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class DenseLayer:
    """Fully connected layer y = act(x @ w.T + b), w stored (out, in)."""

    name: str
    w: np.ndarray
    b: np.ndarray
    activation: str

    @classmethod
    def init(cls, name: str, d_in: int, d_out: int, activation: str,
             rng: np.random.Generator) -> "DenseLayer":
        if activation not in (RELU, IDENTITY):
            raise ConfigError(f"unknown activation {activation!r}")
        if d_in < 1 or d_out < 1:
            raise ConfigError(f"layer {name}: dims must be positive, got {d_in}->{d_out}")
        w = uniform_init(rng, (d_out, d_in), d_in)
        b = uniform_init(rng, (d_out,), d_in)
        return cls(name, w, b, activation)

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    @property
    def d_out(self) -> int:
        return self.w.shape[0]

    def forward(self, x: np.ndarray, trace: Trace | None = None) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ConfigError(
                f"layer {self.name}: expected input dim {self.d_in}, got {x.shape[-1]}")
        y = x @ self.w.T + self.b
        if self.activation == RELU:
            y = np.maximum(y, 0.0)
        if trace is not None:
            trace.add(self.name, y)
        return y


def dense_backward(layer: DenseLayer, x: np.ndarray, y: np.ndarray,
                   dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for one dense layer given its forward input/output.

    Returns (dw, db, dx). The ReLU mask is recovered from y (zero at the kink).
    """
    if layer.activation == RELU:
        dpre = dy * (y > 0.0)
    else:
        dpre = dy
    dw = dpre.T @ x
    db = dpre.sum(axis=0)
    dx = dpre @ layer.w
    return dw, db, dx


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AttentionBlock:
    """Multi-head scaled dot-product attention over a per-sample row set.

    The query is a single row per sample; keys and values are the m stacked
    task rows. Projections are bias-free: per head, q = Q Wq, k = K Wk,
    v = V Wv, weights = softmax(q k^T / sqrt(d_k)), and the concatenated head
    outputs pass through Wo back to model width.
    """

    name: str
    wq: np.ndarray  # (heads, d_model, d_k)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (heads*d_k, d_model)

    @classmethod
    def init(cls, name: str, d_model: int, heads: int, d_k: int,
             rng: np.random.Generator) -> "AttentionBlock":
        if heads < 1 or d_model < 1 or d_k < 1:
            raise ConfigError(f"attention {name}: heads/dims must be positive")
        wq = uniform_init(rng, (heads, d_model, d_k), d_model)
        wk = uniform_init(rng, (heads, d_model, d_k), d_model)
        wv = uniform_init(rng, (heads, d_model, d_k), d_model)
        wo = uniform_init(rng, (heads * d_k, d_model), heads * d_k)
        return cls(name, wq, wk, wv, wo)

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def d_model(self) -> int:
        return self.wq.shape[1]

    @property
    def d_k(self) -> int:
        return self.wq.shape[2]

    def forward(self, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                trace: Trace | None = None) -> np.ndarray:
        """q: (n, d_model); k, v: (n, m, d_model). Returns (n, d_model)."""
        if q.shape[-1] != self.d_model or k.shape[-1] != self.d_model:
            raise ConfigError(f"attention {self.name}: width mismatch")
        scale = 1.0 / np.sqrt(self.d_k)
        outs, saved_heads = [], []
        for i in range(self.heads):
            qh = q @ self.wq[i]                                   # (n, d_k)
            kh = k @ self.wk[i]                                   # (n, m, d_k)
            vh = v @ self.wv[i]
            logits = np.einsum("nd,nmd->nm", qh, kh) * scale
            w_att = softmax(logits, axis=-1)
            outs.append(np.einsum("nm,nmd->nd", w_att, vh))
            saved_heads.append((qh, kh, vh, w_att))
        concat = np.concatenate(outs, axis=-1)
        out = concat @ self.wo
        if trace is not None:
            trace.add(self.name, out)
            trace.saved[self.name] = (q, k, v, saved_heads, concat)
        return out


def attention_backward(block: AttentionBlock, saved, dout: np.ndarray):
    """Backward through one AttentionBlock.

    saved is the tuple the forward stored under trace.saved[name]. Returns
    (param_grads, dq, dk, dv) with param_grads keyed wq/wk/wv/wo.
    """
    q, k, v, saved_heads, concat = saved
    scale = 1.0 / np.sqrt(block.d_k)
    dwo = concat.T @ dout
    dconcat = dout @ block.wo.T
    dwq = np.zeros_like(block.wq)
    dwk = np.zeros_like(block.wk)
    dwv = np.zeros_like(block.wv)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    d_k = block.d_k
    for i in range(block.heads):
        qh, kh, vh, w_att = saved_heads[i]
        dhead = dconcat[:, i * d_k:(i + 1) * d_k]
        dw_att = np.einsum("nd,nmd->nm", dhead, vh)
        dvh = np.einsum("nm,nd->nmd", w_att, dhead)
        # softmax jacobian, then undo the 1/sqrt(d_k) scaling
        dlogits = w_att * (dw_att - (dw_att * w_att).sum(axis=-1, keepdims=True))
        g = dlogits * scale
        dqh = np.einsum("nm,nmd->nd", g, kh)
        dkh = np.einsum("nm,nd->nmd", g, qh)
        dwq[i] = q.T @ dqh
        dwk[i] = np.einsum("nmd,nmk->dk", k, dkh)
        dwv[i] = np.einsum("nmd,nmk->dk", v, dvh)
        dq += dqh @ block.wq[i].T
        dk += dkh @ block.wk[i].T
        dv += dvh @ block.wv[i].T
    return {"wq": dwq, "wk": dwk, "wv": dwv, "wo": dwo}, dq, dk, dv


class AdamW:
    """AdamW with AMSGrad and decoupled weight decay.

    Weight decay multiplies the parameter by (1 - lr*wd) before the moment
    update is applied, so decay acts on the pre-step value. Moment buffers are
    created lazily per parameter name; a parameter absent from the gradient
    dict is left untouched (that is how frozen parameters stay bit-identical).
    """

    def __init__(self, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        if lr <= 0.0:
            raise ConfigError(f"invalid lr: {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ConfigError(f"invalid betas: {betas}")
        if eps <= 0.0:
            raise ConfigError(f"invalid eps: {eps}")
        if weight_decay < 0.0:
            raise ConfigError(f"invalid weight_decay: {weight_decay}")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        for name, p in params:
            g = grads.get(name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            st = self.state.get(name)
            if st is None:
                st = {"t": 0, "m": np.zeros_like(p), "v": np.zeros_like(p),
                      "vmax": np.zeros_like(p)}
                self.state[name] = st
            st["t"] += 1
            t = st["t"]
            p *= 1.0 - self.lr * self.weight_decay
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            np.maximum(st["vmax"], st["v"], out=st["vmax"])
            m_hat = st["m"] / (1.0 - b1 ** t)
            v_hat = st["vmax"] / (1.0 - b2 ** t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def finite_diff_grad(f: Callable[[], float], arrays: list[np.ndarray],
                     h: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of f() with respect to each array, in place.

    f must read the arrays by reference and return a scalar. Entries are
    perturbed one at a time and restored exactly.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = f()
            arr[idx] = orig - h
            down = f()
            arr[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
            it.iternext()
        grads.append(g)
    return grads
