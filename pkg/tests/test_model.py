"""Tests for the multi-task model: widths, gradients, freezing, checkpoints."""

import numpy as np
import pytest

from imtl import rng as rngmod
from imtl.errors import ConfigError, InternalError
from imtl.model import (
    MULTI,
    SINGLE,
    TIER_TARGETS,
    MultiTaskModel,
    NetworkSpec,
    TaskSpec,
    family_param_count,
    layer_plan,
    param_count,
)
from imtl.nn import AdamW, Trace, finite_diff_grad

PUSH = TaskSpec("push", 9, 8, 9)
HIT = TaskSpec("hit", 9, 8, 9)
STACK = TaskSpec("stack", 18, 12, 18)
TRIO = (PUSH, HIT, STACK)


def build_multi(seed=0, **kwargs):
    return MultiTaskModel(list(TRIO), NetworkSpec.paper_default(MULTI),
                          rng=rngmod.stream(seed, rngmod.INIT), **kwargs)


def build_single(task, seed=0):
    return MultiTaskModel([task], NetworkSpec.paper_default(SINGLE),
                          use_flag=False, rng=rngmod.stream(seed, rngmod.INIT))


def batch_for(task, n=6, seed=0):
    rng = rngmod.stream(seed, 9)
    return (rng.uniform(-1, 1, size=(n, task.d_s)),
            rng.uniform(-1, 1, size=(n, task.d_a)),
            rng.uniform(-1, 1, size=(n, task.d_e)))


def rel_err(approx, exact, eps=1e-8):
    return np.max(np.abs(approx - exact) / (np.abs(exact) + eps))


# -- width tables --------------------------------------------------------------


def test_multi_default_layer_dims_cell_for_cell():
    plan = {e[1]: e for e in layer_plan(TRIO, NetworkSpec.paper_default(MULTI))}
    dense = {name: (e[2], e[3]) for name, e in plan.items() if e[0] == "dense"}
    assert dense["p_state.0"] == (9, 6)
    assert dense["p_state.1"] == (9, 6)
    assert dense["p_state.2"] == (18, 6)
    assert dense["enc.0"] == (6, 6)
    assert dense["enc.1"] == (6, 4)
    for i in range(3):
        assert dense[f"task_enc.{i}.0"] == (4, 4)
        assert dense[f"task_enc.{i}.1"] == (4, 2)
    assert plan["attn"][2:] == (3, 1, 3)
    assert dense["p_action.0"] == (8, 1)
    assert dense["p_action.2"] == (12, 1)
    for i, d_e in ((0, 9), (1, 9), (2, 18)):
        assert dense[f"dec.{i}.0"] == (4, 4)
        assert dense[f"dec.{i}.1"] == (4, 4)
        assert dense[f"dec.{i}.2"] == (4, 4)
        assert dense[f"dec.{i}.3"] == (4, d_e)


def test_single_default_layer_dims_cell_for_cell():
    plan = {e[1]: e for e in layer_plan((PUSH,), NetworkSpec.paper_default(SINGLE),
                                        use_flag=False)}
    dense = {name: (e[2], e[3]) for name, e in plan.items() if e[0] == "dense"}
    assert dense["p_state.0"] == (9, 4)
    assert dense["enc.0"] == (4, 4)
    assert dense["enc.1"] == (4, 4)
    assert dense["task_enc.0.0"] == (4, 4)
    assert dense["task_enc.0.1"] == (4, 2)
    assert plan["attn"][2:] == (2, 1, 2)
    assert dense["p_action.0"] == (8, 1)
    assert dense["dec.0.0"] == (3, 4)
    assert dense["dec.0.3"] == (4, 9)


def test_param_counts_match_hand_arithmetic():
    # multi: projections 234, trunk 70, task heads 90, attention 36,
    # action projections 31, decoders 360
    assert param_count(TRIO, NetworkSpec.paper_default(MULTI)) == 821
    single = NetworkSpec.paper_default(SINGLE)
    assert param_count((PUSH,), single, use_flag=False) == 236
    assert param_count((HIT,), single, use_flag=False) == 236
    assert param_count((STACK,), single, use_flag=False) == 321
    assert family_param_count(single, TRIO) == 793


def test_ablated_decoder_input_widths():
    spec = NetworkSpec.paper_default(MULTI)
    def dec_in(**kw):
        plan = {e[1]: e for e in layer_plan(TRIO, spec, **kw)}
        return plan["dec.0.0"][2]
    assert dec_in() == 4                                  # attended row + action
    assert dec_in(use_flag=False) == 3
    assert dec_in(use_attention=False) == 10              # flattened rows + action
    assert dec_in(use_attention=False, use_flag=False) == 7


@pytest.mark.parametrize("tier", ["low", "medium", "high"])
@pytest.mark.parametrize("variant", [MULTI, SINGLE])
def test_tier_budgets(tier, variant):
    spec = NetworkSpec.for_tier(tier, TRIO, variant)
    count = family_param_count(spec, TRIO)
    target = TIER_TARGETS[tier]
    assert abs(count - target) <= 0.05 * target
    # deterministic: solving twice gives the same table
    assert NetworkSpec.for_tier(tier, TRIO, variant) == spec


def test_paper_tier_is_default():
    assert NetworkSpec.for_tier("paper", TRIO, MULTI) == NetworkSpec.paper_default(MULTI)
    with pytest.raises(ConfigError):
        NetworkSpec.for_tier("giant", TRIO, MULTI)


# -- construction errors -------------------------------------------------------


def test_single_variant_constraints():
    spec = NetworkSpec.paper_default(SINGLE)
    with pytest.raises(ConfigError):
        MultiTaskModel(list(TRIO), spec, use_flag=False, rng=rngmod.stream(0, 0))
    with pytest.raises(ConfigError):
        MultiTaskModel([PUSH], spec, use_flag=True, rng=rngmod.stream(0, 0))


def test_duplicate_task_names_rejected():
    with pytest.raises(ConfigError):
        MultiTaskModel([PUSH, PUSH], NetworkSpec.paper_default(MULTI),
                       rng=rngmod.stream(0, 0))


def test_forward_shape_validation():
    m = build_multi()
    with pytest.raises(ConfigError):
        m.forward(0, np.zeros((4, 8)), np.zeros((4, 8)))
    with pytest.raises(ConfigError):
        m.forward(5, np.zeros((4, 9)), np.zeros((4, 8)))


# -- forward semantics ---------------------------------------------------------


def test_flag_marks_exactly_engaged_row():
    m = build_multi()
    states, actions, _ = batch_for(PUSH)
    for engaged in (0, 1):
        trace = Trace()
        m.forward(engaged, states, actions, trace)
        z = trace.saved["ctx"]["z"]
        flags = z[:, :, -1]
        assert np.all(flags[:, engaged] == 1.0)
        assert np.all(np.delete(flags, engaged, axis=1) == 0.0)


def test_forward_is_deterministic_and_pure():
    m = build_multi()
    states, actions, _ = batch_for(PUSH)
    before = {n: a.copy() for n, a in m.parameters()}
    y1 = m.forward(0, states, actions)
    y2 = m.forward(0, states, actions)
    assert np.array_equal(y1, y2)
    for n, a in m.parameters():
        assert a.tobytes() == before[n].tobytes()


def test_same_seed_same_init():
    a = dict(build_multi(seed=3).parameters())
    b = dict(build_multi(seed=3).parameters())
    c = dict(build_multi(seed=4).parameters())
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_zero_weight_model_outputs_last_bias():
    m = MultiTaskModel(list(TRIO), NetworkSpec.paper_default(MULTI), rng=None)
    rng = rngmod.stream(1, 0)
    for name, layer in m.layers.items():
        layer.b[...] = rng.uniform(-0.5, 0.5, size=layer.b.shape)
    states, actions, _ = batch_for(PUSH, n=5)
    trace = Trace()
    pred = m.forward(0, states, actions, trace)
    assert np.allclose(pred, m.layers["dec.0.3"].b[None, :], atol=1e-15)
    # energy oracle: replay the bias arithmetic layer by layer
    relu = lambda v: np.maximum(v, 0.0)
    per_sample = 0.0
    per_sample += np.abs(m.layers["p_state.0"].b).sum()
    h = relu(m.layers["enc.1"].b)  # enc inputs die at w=0, except biases
    per_sample += np.abs(relu(m.layers["enc.0"].b)).sum() + np.abs(h).sum()
    for i in range(3):
        u = relu(m.layers[f"task_enc.{i}.0"].b)
        per_sample += np.abs(u).sum() + np.abs(relu(m.layers[f"task_enc.{i}.1"].b)).sum()
    per_sample += 0.0  # attention output is zero with zero projections
    per_sample += np.abs(m.layers["p_action.0"].b).sum()
    for j in range(4):
        layer = m.layers[f"dec.0.{j}"]
        out = relu(layer.b) if layer.activation == "relu" else layer.b
        per_sample += np.abs(out).sum()
    from imtl.nn import energy_of
    assert energy_of(trace) == pytest.approx(5 * per_sample, rel=1e-12)


# -- gradients -----------------------------------------------------------------


def mse_loss(m, engaged, states, actions, effects, **kw):
    pred = m.forward(engaged, states, actions, **kw)
    return float(np.mean((pred - effects) ** 2))


def test_single_task_gradients_match_fd_end_to_end():
    # m=1 has no frozen branches, so plain finite differences apply to every
    # parameter including the attention block
    m = build_single(PUSH, seed=5)
    states, actions, effects = batch_for(PUSH, n=4, seed=5)
    trace = Trace()
    pred = m.forward(0, states, actions, trace)
    err = pred - effects
    grads = m.backward(trace, (2.0 / err.size) * err)
    params = m.parameters()
    assert set(grads) == {n for n, _ in params}
    fd = finite_diff_grad(lambda: mse_loss(m, 0, states, actions, effects),
                          [a for _, a in params], h=1e-4)
    for (name, _), want in zip(params, fd):
        assert rel_err(grads[name], want) < 1e-4, name


@pytest.mark.parametrize("engaged", [0, 1, 2])
def test_multi_gradients_match_fd_with_pinned_branches(engaged):
    m = build_multi(seed=6)
    task = TRIO[engaged]
    states, actions, effects = batch_for(task, n=4, seed=6 + engaged)
    pinned = {i: lat for i, lat in enumerate(m.task_latents(engaged, states))
              if i != engaged}
    trace = Trace()
    pred = m.forward(engaged, states, actions, trace)
    err = pred - effects
    grads = m.backward(trace, (2.0 / err.size) * err)
    trainable = m.trainable_names(engaged)
    assert set(grads) == trainable
    arrays = [a for n, a in m.parameters() if n in trainable]
    names = [n for n, _ in m.parameters() if n in trainable]
    fd = finite_diff_grad(
        lambda: mse_loss(m, engaged, states, actions, effects, pinned_latents=pinned),
        arrays, h=1e-4)
    for name, want in zip(names, fd):
        assert rel_err(grads[name], want) < 1e-4, name


@pytest.mark.parametrize("flags", [(True, False), (False, True), (False, False)])
def test_ablated_gradients_match_fd(flags):
    use_attention, use_flag = flags
    m = build_multi(seed=7, use_attention=use_attention, use_flag=use_flag)
    states, actions, effects = batch_for(PUSH, n=3, seed=7)
    pinned = {i: lat for i, lat in enumerate(m.task_latents(0, states)) if i != 0}
    trace = Trace()
    pred = m.forward(0, states, actions, trace)
    err = pred - effects
    grads = m.backward(trace, (2.0 / err.size) * err)
    trainable = m.trainable_names(0)
    assert set(grads) == trainable
    arrays = [a for n, a in m.parameters() if n in trainable]
    names = [n for n, _ in m.parameters() if n in trainable]
    fd = finite_diff_grad(
        lambda: mse_loss(m, 0, states, actions, effects, pinned_latents=pinned),
        arrays, h=1e-4)
    for name, want in zip(names, fd):
        assert rel_err(grads[name], want) < 1e-4, name


def test_frozen_tasks_get_no_gradient_entries():
    m = build_multi()
    states, actions, effects = batch_for(HIT)
    trace = Trace()
    pred = m.forward(1, states, actions, trace)
    grads = m.backward(trace, pred - effects)
    for other in (0, 2):
        assert not (set(grads) & m.task_param_names(other))


# -- training ------------------------------------------------------------------


def test_train_step_freezes_other_tasks_bitwise():
    m = build_multi(seed=8)
    opt = AdamW()
    states, actions, effects = batch_for(PUSH, n=10, seed=8)
    before = {n: a.copy() for n, a in m.parameters()}
    mse, mae, energy = m.train_step(0, states, actions, effects, opt)
    assert mse > 0.0 and mae > 0.0 and energy > 0.0
    frozen = m.task_param_names(1) | m.task_param_names(2)
    moved = m.trainable_names(0)
    for n, a in m.parameters():
        if n in frozen:
            assert a.tobytes() == before[n].tobytes(), n
        elif n in moved:
            assert not np.array_equal(a, before[n]), n


def test_train_step_is_deterministic():
    def run():
        m = build_multi(seed=9)
        opt = AdamW()
        out = []
        for step in range(5):
            states, actions, effects = batch_for(HIT, n=8, seed=20 + step)
            out.append(m.train_step(1, states, actions, effects, opt))
        return out, {n: a.copy() for n, a in m.parameters()}

    (stats1, p1), (stats2, p2) = run(), run()
    assert stats1 == stats2
    assert all(p1[n].tobytes() == p2[n].tobytes() for n in p1)


def test_eval_does_not_change_state():
    m = build_multi()
    states, actions, effects = batch_for(STACK)
    before = {n: a.copy() for n, a in m.parameters()}
    v1 = m.eval_mae(2, states, actions, effects)
    v2 = m.eval_mae(2, states, actions, effects)
    assert v1 == v2
    for n, a in m.parameters():
        assert a.tobytes() == before[n].tobytes()


# -- source ablation (transfer probe) -----------------------------------------


def test_ablating_an_all_zero_row_is_a_no_op():
    m = build_multi(seed=10)
    states, actions, _ = batch_for(PUSH)
    zero = {2: np.zeros((states.shape[0], 2))}
    base = m.forward(0, states, actions, pinned_latents=zero)
    # row 2 carries only zeros (flag is off for non-engaged rows), so zeroing
    # it in K/V must change nothing
    abl = m.forward(0, states, actions, pinned_latents=zero, kv_zero_row=2)
    assert np.array_equal(base, abl)


def test_ablating_own_row_changes_output():
    m = build_multi(seed=10)
    states, actions, _ = batch_for(HIT)
    base = m.forward(1, states, actions)
    abl = m.forward(1, states, actions, kv_zero_row=1)
    assert not np.allclose(base, abl)


def test_ablated_forward_cannot_backward():
    m = build_multi()
    states, actions, effects = batch_for(PUSH)
    trace = Trace()
    m.forward(0, states, actions, trace, kv_zero_row=1)
    with pytest.raises(InternalError):
        m.backward(trace, np.zeros_like(effects))


def test_kv_zero_requires_attention():
    m = build_multi(use_attention=False)
    states, actions, _ = batch_for(PUSH)
    with pytest.raises(ConfigError):
        m.forward(0, states, actions, kv_zero_row=0)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    m = build_multi(seed=11)
    path = tmp_path / "model.ckpt"
    m.save(path)
    loaded = MultiTaskModel.load(path)
    for (n1, a1), (n2, a2) in zip(m.parameters(), loaded.parameters()):
        assert n1 == n2
        assert a1.tobytes() == a2.tobytes()
    states, actions, _ = batch_for(PUSH)
    assert np.array_equal(m.forward(0, states, actions),
                          loaded.forward(0, states, actions))


def test_checkpoint_preserves_ablation_flags(tmp_path):
    m = build_multi(seed=12, use_attention=False, use_flag=False)
    path = tmp_path / "model.ckpt"
    m.save(path)
    loaded = MultiTaskModel.load(path)
    assert loaded.use_attention is False
    assert loaded.use_flag is False


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(ConfigError):
        MultiTaskModel.load(path)


def test_checkpoint_rejects_truncation(tmp_path):
    m = build_multi(seed=13)
    path = tmp_path / "model.ckpt"
    m.save(path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ConfigError):
        MultiTaskModel.load(path)
