"""Training loop and the online / offline inference protocols."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import envsuite as env
from . import ndgrad as nd
from .codec import TaskGroup, Transition
from .datagen import Dataset, sample_batch
from .envsuite import TaskInstance
from .flowhead import FlowConfig
from .model import FlowDPT, ModelConfig, load_model, save_model

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.99)
    clip_norm: float = 2.5
    batch_size: int = 64
    steps: int = 1000
    L: int = 64
    seed: int = 0
    head: str = "flow"
    warmup: int = 0
    cosine_decay: bool = False
    min_lr_ratio: float = 0.1
    checkpoint_every: int = 100
    exclude_query: bool = True
    mix_levels: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.clip_norm <= 0 or self.batch_size < 1 or self.steps < 0 or self.L < 0:
            raise ValueError("trainer settings must be positive")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        if self.warmup and step < self.warmup:
            return lr * (step + 1) / self.warmup
        if self.cosine_decay and self.steps > self.warmup:
            frac = min(1.0, (step - self.warmup) / max(1, self.steps - self.warmup))
            return lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))
        return lr


@dataclass
class Checkpoint:
    model: FlowDPT
    optimizer: nd.Adam
    step: int = 0
    losses: list[tuple[int, float]] = field(default_factory=list)
    trainer: dict = field(default_factory=dict)

    def save(self, directory: str | Path) -> Path:
        meta = {"step": self.step, "adam_t": self.optimizer.t, "trainer": self.trainer}
        return save_model(directory, self.model, self.optimizer.state_arrays(), meta)

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        model, arrays, meta = load_model(directory)
        tr = meta.get("trainer") or {}
        opt = nd.Adam(model.parameters(), lr=tr.get("lr", 5e-5), betas=tuple(tr.get("betas", (0.9, 0.99))))
        if any(k.startswith("adam.") for k in arrays):
            opt.load_state_arrays(arrays, int(meta.get("adam_t", 0)))
        return cls(model, opt, int(meta.get("step", 0)), [], tr)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_good: Checkpoint, cause: Exception):
        super().__init__(f"training diverged at step {step}: {cause}")
        self.step = step
        self.last_good = last_good


def new_checkpoint(model_cfg: ModelConfig, groups: Sequence[TaskGroup], cfg: TrainerConfig) -> Checkpoint:
    model_cfg.head = cfg.head
    model = FlowDPT(model_cfg, groups, seed=cfg.seed)
    opt = nd.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    return Checkpoint(model, opt, 0, [], asdict(cfg))


def groups_of(dataset: Dataset) -> list[TaskGroup]:
    out = {}
    for s in dataset.shards:
        out.setdefault(s.group_id, TaskGroup(s.group_id, s.obs_dim, s.act_dim, reward_scale=s.reward_scale))
    return list(out.values())


def train(cfg: TrainerConfig, dataset: Dataset, model_cfg: ModelConfig | None = None,
          checkpoint: Checkpoint | None = None, loss_csv: str | Path | None = None) -> Checkpoint:
    """Run ``cfg.steps`` optimisation steps (continuing from ``checkpoint`` if given)."""
    if not dataset.shards:
        raise ValueError("empty dataset")
    ck = checkpoint or new_checkpoint(model_cfg or ModelConfig(), groups_of(dataset), cfg)
    model, opt = ck.model, ck.optimizer
    if cfg.L > model.L_max:
        raise ValueError(f"training context L={cfg.L} exceeds model L_max={model.L_max}")
    params = model.parameters()
    by_group = dataset.groups()
    weights = dataset.group_weights()
    gids = sorted(weights)
    probs = np.array([weights[g] for g in gids])
    last_good = (ck.step, model.state_arrays(), opt.state_arrays(), opt.t)
    start = ck.step
    for step in range(start, start + cfg.steps):
        rng = nd.stream(cfg.seed, f"train/{step}")
        gid = gids[rng.choice(len(gids), p=probs)] if len(gids) > 1 else gids[0]
        batch = sample_batch(by_group[gid], cfg.L, cfg.batch_size, rng,
                             exclude_query=cfg.exclude_query, mix_levels=cfg.mix_levels)
        try:
            loss = model.loss(batch, rng)
            grads = nd.backward(loss, params)
            grads, _ = nd.clip_global_norm(grads, cfg.clip_norm)
            opt.step(grads, lr=cfg.lr_at(step))
        except FloatingPointError as exc:
            good_step, arrays, opt_arrays, t = last_good
            model.load_state_arrays(arrays)
            opt.load_state_arrays(opt_arrays, t)
            ck.step = good_step
            raise TrainingDiverged(step, ck, exc) from exc
        ck.step = step + 1
        ck.losses.append((step, float(loss.data)))
        if cfg.checkpoint_every and ck.step % cfg.checkpoint_every == 0:
            last_good = (ck.step, _copy(model.state_arrays()), _copy(opt.state_arrays()), opt.t)
            log.info("step %d loss %.4f", ck.step, float(np.mean([l for _, l in ck.losses[-cfg.checkpoint_every:]])))
    if loss_csv is not None:
        write_loss_csv(loss_csv, ck.losses)
    return ck


def _copy(arrays: dict) -> dict:
    return {k: v.copy() for k, v in arrays.items()}


def write_loss_csv(path: str | Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for s, l in losses:
            w.writerow([s, repr(l)])


# -- context -----------------------------------------------------------------------------

class ContextBuffer:
    """Bounded FIFO of transitions; pushing past capacity drops the oldest."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.entries: deque[Transition] = deque(maxlen=capacity)

    def push(self, t: Transition) -> None:
        if self.capacity:
            self.entries.append(t)

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def arrays(self, obs_dim: int, act_dim: int):
        return transitions_to_arrays(list(self.entries), obs_dim, act_dim)


def transitions_to_arrays(ts: Sequence[Transition], obs_dim: int, act_dim: int):
    n = len(ts)
    obs = np.array([t.obs for t in ts], dtype=np.float64).reshape(n, obs_dim)
    act = np.array([t.action for t in ts], dtype=np.float64).reshape(n, act_dim)
    rew = np.array([t.reward for t in ts], dtype=np.float64).reshape(n)
    return obs, act, rew


def _as_arrays(context, group: TaskGroup):
    if context is None:
        return transitions_to_arrays([], group.obs_dim, group.act_dim)
    if isinstance(context, ContextBuffer):
        return context.arrays(group.obs_dim, group.act_dim)
    if isinstance(context, tuple) and len(context) == 3 and isinstance(context[0], np.ndarray):
        return context
    return transitions_to_arrays(list(context), group.obs_dim, group.act_dim)


def act(model: FlowDPT, group: str, context, o_q, rng: np.random.Generator,
        M: int = 32, solver: str = "heun") -> np.ndarray:
    """Single action for query ``o_q`` given a context (buffer, transitions, or arrays)."""
    g = model.groups[group]
    obs, a, r = _as_arrays(context, g)
    if len(r) > model.L_max:
        raise ValueError(f"context of {len(r)} exceeds L_max={model.L_max}")
    out = model.act(group, np.asarray(o_q)[None], obs[None], a[None], r[None], rng, FlowConfig(M, solver))
    return out[0]


# -- rollouts -----------------------------------------------------------------------------

def _check_lockstep(tasks: Sequence[TaskInstance]) -> None:
    if len({t.group.group_id for t in tasks}) != 1 or len({t.horizon for t in tasks}) != 1:
        raise ValueError("lockstep rollouts need tasks from one group with equal horizons")


def rollout_online_many(model: FlowDPT, tasks: Sequence[TaskInstance], episodes: int, L: int,
                        rngs: Sequence[np.random.Generator], flow: FlowConfig | None = None,
                        reset_context: bool = False, buffers: list[ContextBuffer] | None = None,
                        trace: list | None = None) -> np.ndarray:
    """Online evaluation of several tasks in lockstep; returns (n_tasks, episodes) returns.

    Buffers start empty and are carried across episodes unless ``reset_context``.
    Each realized (obs, action, reward) is appended after its environment step.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    _check_lockstep(tasks)
    if L > model.L_max:
        raise ValueError(f"L={L} exceeds L_max={model.L_max}")
    flow = flow or FlowConfig()
    g = model.groups[tasks[0].group.group_id]
    n = len(tasks)
    buffers = buffers if buffers is not None else [ContextBuffer(L) for _ in range(n)]
    policy_rng, env_rngs = rngs[0], rngs
    returns = np.zeros((n, episodes))
    for ep in range(episodes):
        if reset_context:
            for b in buffers:
                b.clear()
        states = [env.reset(t, r) for t, r in zip(tasks, env_rngs)]
        for _ in range(tasks[0].horizon):
            ctx = [b.arrays(g.obs_dim, g.act_dim) for b in buffers]
            o_q = np.stack([s.obs for s in states])
            acts = model.act(g.group_id, o_q, np.stack([c[0] for c in ctx]), np.stack([c[1] for c in ctx]),
                             np.stack([c[2] for c in ctx]), policy_rng, flow)
            for i, task in enumerate(tasks):
                nxt, r, _ = env.step(task, states[i], acts[i], env_rngs[i])
                buffers[i].push(Transition(states[i].obs.copy(), np.array(acts[i], dtype=np.float64), r))
                returns[i, ep] += r
                states[i] = nxt
            if trace is not None:
                trace.append([list(b) for b in buffers])
    return returns


def rollout_online(model: FlowDPT, task: TaskInstance, episodes: int, L: int,
                   rng: np.random.Generator, flow: FlowConfig | None = None,
                   reset_context: bool = False) -> np.ndarray:
    return rollout_online_many(model, [task], episodes, L, [rng], flow, reset_context)[0]


def rollout_offline_many(model: FlowDPT, tasks: Sequence[TaskInstance], prompts: Sequence[tuple],
                         episodes: int, rngs: Sequence[np.random.Generator],
                         flow: FlowConfig | None = None) -> np.ndarray:
    """Offline evaluation: every action conditions on the same fixed prompt (obs, act, rew)."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    _check_lockstep(tasks)
    flow = flow or FlowConfig()
    g = model.groups[tasks[0].group.group_id]
    fixed = []
    for p in prompts:
        obs, a, r = (np.array(x, dtype=np.float64) for x in _as_arrays(p, g))
        if len(r) > model.L_max:
            raise ValueError(f"prompt of {len(r)} transitions exceeds L_max={model.L_max}")
        for x in (obs, a, r):
            x.flags.writeable = False
        fixed.append((obs, a, r))
    if len({len(f[2]) for f in fixed}) != 1:
        raise ValueError("lockstep offline rollouts need equal prompt lengths")
    c_o = np.stack([f[0] for f in fixed])
    c_a = np.stack([f[1] for f in fixed])
    c_r = np.stack([f[2] for f in fixed])
    n = len(tasks)
    returns = np.zeros((n, episodes))
    for ep in range(episodes):
        states = [env.reset(t, r) for t, r in zip(tasks, rngs)]
        for _ in range(tasks[0].horizon):
            o_q = np.stack([s.obs for s in states])
            acts = model.act(g.group_id, o_q, c_o, c_a, c_r, rngs[0], flow)
            for i, task in enumerate(tasks):
                states[i], r, _ = env.step(task, states[i], acts[i], rngs[i])
                returns[i, ep] += r
    return returns


def rollout_offline(model: FlowDPT, task: TaskInstance, prompt, episodes: int,
                    rng: np.random.Generator, flow: FlowConfig | None = None) -> np.ndarray:
    return rollout_offline_many(model, [task], [prompt], episodes, [rng], flow)[0]
