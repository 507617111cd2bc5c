import csv

import numpy as np
import pytest

from flowdpt import envsuite as env
from flowdpt import ndgrad as nd
from flowdpt.backbone import BackboneConfig
from flowdpt.codec import TaskGroup, Transition
from flowdpt.datagen import Batch, Dataset, NoiseSchedule, collect_cnd, sample_batch
from flowdpt.flowhead import FlowConfig, rf_loss
from flowdpt.model import FlowDPT, ModelConfig, load_model, save_model
from flowdpt.runtime import (Checkpoint, ContextBuffer, TrainerConfig, TrainingDiverged, act, rollout_offline,
                             rollout_online, rollout_online_many, train)

TINY = dict(n_layers=1, n_heads=2, d_model=16, d_ff=32, L_max=8)


def tiny_cfg(head="flow", dtype="float64", **kw):
    return ModelConfig(BackboneConfig(**{**TINY, **kw}), head=head, d_gamma=8, dtype=dtype)


@pytest.fixture(scope="module")
def bandit_data():
    tasks = env.goal_registry(n_train=4, n_test=1)
    shards = [collect_cnd(t, NoiseSchedule(episodes_per_level=4), i) for i, t in enumerate(tasks[:4])]
    return tasks, Dataset(shards)


def small_trainer(**kw):
    base = dict(lr=1e-3, batch_size=4, steps=3, L=4, checkpoint_every=2)
    return TrainerConfig(**{**base, **kw})


# -- context buffer -------------------------------------------------------------------------

def _tr(i):
    return Transition(np.array([float(i)]), np.array([0.0]), float(i))


def test_fifo_eviction():
    b = ContextBuffer(3)
    for i in range(4):
        b.push(_tr(i))
    assert [t.reward for t in b] == [1.0, 2.0, 3.0]


def test_buffer_length_is_min_of_pushes_and_capacity():
    b = ContextBuffer(5)
    for i in range(12):
        b.push(_tr(i))
        assert len(b) == min(i + 1, 5)
    z = ContextBuffer(0)
    z.push(_tr(0))
    assert len(z) == 0
    with pytest.raises(ValueError):
        ContextBuffer(-1)


# -- trainer config ---------------------------------------------------------------------------

def test_trainer_defaults():
    c = TrainerConfig()
    assert (c.lr, c.clip_norm, c.betas) == (5e-5, 2.5, (0.9, 0.99))
    with pytest.raises(ValueError):
        TrainerConfig(lr=0)


def test_lr_schedule():
    c = TrainerConfig(lr=1.0, warmup=4, steps=14, cosine_decay=True, min_lr_ratio=0.1)
    assert c.lr_at(0) == 0.25 and c.lr_at(3) == 1.0
    assert c.lr_at(4) == pytest.approx(1.0) and c.lr_at(14) == pytest.approx(0.1)
    assert TrainerConfig(lr=0.3).lr_at(500) == 0.3


# -- model ------------------------------------------------------------------------------------

def _batch(L, B=3, seed=0):
    rng = np.random.default_rng(seed)
    return Batch("bandit", rng.normal(size=(B, 2)), rng.normal(size=(B, L, 2)), rng.normal(size=(B, L, 2)),
                 rng.normal(size=(B, L)), rng.normal(size=(B, 2)))


def test_zero_context_supervises_only_query():
    m = FlowDPT(tiny_cfg(), [TaskGroup("bandit", 2, 2)])
    b = _batch(0)
    h = m.hidden("bandit", b.o_q, b.ctx_obs, b.ctx_act, b.ctx_rew)
    assert h.shape == (3, 2, 16)
    direct = rf_loss(m.field("bandit"), h[:, 1:, :], b.a_star, nd.stream(0, "l")).item()
    assert m.loss(b, nd.stream(0, "l")).item() == direct


def test_full_stack_gradient_matches_finite_differences():
    m = FlowDPT(tiny_cfg(d_model=16, n_layers=2), [TaskGroup("bandit", 2, 2)], seed=3)
    b = _batch(2)
    params = m.parameters()

    def loss():
        return m.loss(b, nd.stream(0, "fd"))

    grads = nd.backward(loss(), params)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for name, p in params.items():
        v = rng.normal(size=p.shape)
        base = p.data.copy()
        p.data = base + eps * v
        up = loss().item()
        p.data = base - eps * v
        down = loss().item()
        p.data = base
        fd = (up - down) / (2 * eps)
        an = float(np.sum(grads[name] * v))
        assert abs(fd - an) <= 1e-3 * max(1.0, abs(fd)), name


def test_model_save_load_round_trip(tmp_path):
    m = FlowDPT(tiny_cfg(head="gaussian"), [TaskGroup("bandit", 2, 2), TaskGroup("lqr", 2, 1)], seed=4)
    save_model(tmp_path / "m", m)
    back, _, _ = load_model(tmp_path / "m")
    for k, v in m.state_arrays().items():
        assert np.array_equal(v, back.state_arrays()[k])
    o = np.zeros((2, 2))
    c = np.zeros((2, 3, 2)), np.zeros((2, 3, 1)), np.zeros((2, 3))
    assert np.array_equal(m.act("lqr", o, *c, nd.stream(0, "a")), back.act("lqr", o, *c, nd.stream(0, "a")))


# -- training ----------------------------------------------------------------------------------

def test_zero_steps_returns_initialisation(bandit_data):
    _, ds = bandit_data
    ck = train(small_trainer(steps=0), ds, tiny_cfg())
    fresh = FlowDPT(tiny_cfg(), [TaskGroup("bandit", 2, 2)], seed=0)
    assert ck.step == 0 and not ck.losses
    for k, v in fresh.state_arrays().items():
        assert np.array_equal(v, ck.model.state_arrays()[k])


def test_frozen_batch_loss_halves():
    tasks = env.goal_registry(n_train=8, n_test=0)
    shards = [collect_cnd(t, NoiseSchedule(episodes_per_level=4), i) for i, t in enumerate(tasks)]
    m = FlowDPT(tiny_cfg(d_model=32, L_max=8), [TaskGroup("bandit", 2, 2)], seed=0)
    batch = sample_batch(shards, 8, 32, np.random.default_rng(0))
    params = m.parameters()
    opt = nd.Adam(params, lr=1e-3)
    losses = []
    for _ in range(200):
        loss = m.loss(batch, nd.stream(0, "frozen"))
        losses.append(loss.item())
        grads, _ = nd.clip_global_norm(nd.backward(loss, params), 2.5)
        opt.step(grads)
    assert losses[-1] < 0.5 * losses[0]


@pytest.mark.parametrize("head", ["flow", "gaussian"])
def test_training_is_bitwise_reproducible(bandit_data, head):
    _, ds = bandit_data
    a = train(small_trainer(head=head), ds, tiny_cfg(dtype="float32"))
    b = train(small_trainer(head=head), ds, tiny_cfg(dtype="float32"))
    assert a.losses == b.losses
    assert all(np.array_equal(v, b.model.state_arrays()[k]) for k, v in a.model.state_arrays().items())


def test_resume_matches_uninterrupted_run(bandit_data, tmp_path):
    _, ds = bandit_data
    full = train(small_trainer(steps=4), ds, tiny_cfg())
    half = train(small_trainer(steps=2), ds, tiny_cfg())
    half.save(tmp_path / "ck")
    resumed = train(small_trainer(steps=2), ds, checkpoint=Checkpoint.load(tmp_path / "ck"))
    assert resumed.step == 4
    for k, v in full.model.state_arrays().items():
        assert np.array_equal(v, resumed.model.state_arrays()[k]), k


def test_loss_csv_written(bandit_data, tmp_path):
    _, ds = bandit_data
    ck = train(small_trainer(), ds, tiny_cfg(), loss_csv=tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["step", "loss"] and len(rows) == 4
    assert [float(r[1]) for r in rows[1:]] == [l for _, l in ck.losses]


def test_divergence_keeps_last_good(bandit_data):
    _, ds = bandit_data
    ck = train(small_trainer(steps=2), ds, tiny_cfg())
    good = {k: v.copy() for k, v in ck.model.state_arrays().items()}
    poisoned = Dataset([collect_cnd(env.make_goal_bandit([0.1, 0.2]), NoiseSchedule(episodes_per_level=4), 0)])
    poisoned.shards[0].rew[:] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(small_trainer(steps=3), poisoned, checkpoint=ck)
    assert info.value.step == 2 and info.value.last_good.step == 2
    for k, v in good.items():
        assert np.array_equal(v, info.value.last_good.model.state_arrays()[k])


def test_training_context_longer_than_model_rejected(bandit_data):
    _, ds = bandit_data
    with pytest.raises(ValueError):
        train(small_trainer(L=20), ds, tiny_cfg())


def test_multi_group_training_runs():
    lc = env.linear_control_registry(2, 0)
    gb = env.goal_registry(n_train=2, n_test=0)
    ds = Dataset([collect_cnd(t, NoiseSchedule(episodes_per_level=2), i) for i, t in enumerate(lc + gb)])
    ck = train(small_trainer(steps=4), ds, tiny_cfg())
    assert set(ck.model.groups) == {"lqr", "bandit"} and len(ck.losses) == 4


# -- inference ---------------------------------------------------------------------------------

class ConstantField:
    def __init__(self, c):
        self.c = np.asarray(c)
        self.act_dim = len(self.c)

    def __call__(self, t, h, x):
        return np.broadcast_to(self.c, np.shape(x.data if hasattr(x, "data") else x))


@pytest.fixture
def model():
    return FlowDPT(tiny_cfg(), [TaskGroup("bandit", 2, 2)], seed=1)


def test_cold_start_action(model):
    a = act(model, "bandit", None, np.zeros(2), nd.stream(0, "x"))
    assert a.shape == (2,) and np.all(np.isfinite(a))
    assert np.array_equal(a, act(model, "bandit", [], np.zeros(2), nd.stream(0, "x")))


def test_constant_field_ignores_context(model, monkeypatch):
    c = np.array([0.5, -0.25])
    monkeypatch.setattr(model, "field", lambda gid: ConstantField(c))
    x0 = np.random.default_rng(9).standard_normal((1, 2))[0]
    ctx = [Transition(np.zeros(2), np.ones(2), -1.0)] * 3
    for context in (None, ctx):
        a = act(model, "bandit", context, np.zeros(2), np.random.default_rng(9), M=7)
        assert np.allclose(a, x0 + c, atol=1e-12)


def test_act_rejects_long_context(model):
    ctx = [Transition(np.zeros(2), np.zeros(2), 0.0)] * 9
    with pytest.raises(ValueError):
        act(model, "bandit", ctx, np.zeros(2), nd.stream(0, "x"))


def test_online_context_is_last_realised_transitions(model):
    tasks = env.goal_registry(n_train=2, n_test=0)
    trace = []
    R = rollout_online_many(model, tasks, 7, 4, [nd.stream(0, "a"), nd.stream(0, "b")],
                            FlowConfig(M=4), trace=trace)
    assert R.shape == (2, 7) and len(trace) == 7
    for k, snap in enumerate(trace, start=1):
        for i, buf in enumerate(snap):
            assert len(buf) == min(k, 4)
            newest = buf[-1]
            assert newest.reward == R[i, k - 1]
            if k > 1:
                prev = trace[k - 2][i]
                assert [t.reward for t in buf] == ([t.reward for t in prev] + [newest.reward])[-4:]


def test_online_reset_toggle(model):
    t = env.goal_registry(n_train=1, n_test=0)
    bufs = [ContextBuffer(4)]
    rollout_online_many(model, t, 3, 4, [nd.stream(0, "a")], FlowConfig(M=2), reset_context=True, buffers=bufs)
    assert len(bufs[0]) == 1
    with pytest.raises(ValueError):
        rollout_online(model, t[0], 0, 4, nd.stream(0, "a"))


def test_offline_prompt_untouched(model):
    t = env.goal_registry(n_train=1, n_test=0)[0]
    rng = np.random.default_rng(0)
    prompt = (rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=5))
    before = tuple(p.copy() for p in prompt)
    rollout_offline(model, t, prompt, 3, nd.stream(0, "o"), FlowConfig(M=2))
    assert all(np.array_equal(a, b) and a.flags.writeable for a, b in zip(prompt, before))


def test_offline_rejects_long_prompt(model):
    t = env.goal_registry(n_train=1, n_test=0)[0]
    long = (np.zeros((9, 2)), np.zeros((9, 2)), np.zeros(9))
    with pytest.raises(ValueError):
        rollout_offline(model, t, long, 1, nd.stream(0, "o"))


def test_empty_prompt_matches_first_online_episode(model):
    t = env.goal_registry(n_train=1, n_test=0)[0]
    empty = (np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    off = rollout_offline(model, t, empty, 1, nd.stream(2, "s"), FlowConfig(M=4))
    on = rollout_online(model, t, 1, 4, nd.stream(2, "s"), FlowConfig(M=4))
    assert off[0] == on[0]


def test_lockstep_requires_one_group(model):
    lqr = env.linear_control_registry(1, 0)[0]
    gb = env.goal_registry(n_train=1, n_test=0)[0]
    with pytest.raises(ValueError):
        rollout_online_many(model, [gb, lqr], 1, 2, [nd.stream(0, "a")] * 2)
