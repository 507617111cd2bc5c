"""Analytic toy control tasks with exact demonstrators.

* ``goal_bandit``: one-step bandit, reward ``-|a - g|^2``; the goal is unobservable.
* ``bimodal_reach``: like the bandit but both ``+g`` and ``-g`` are optimal.
* ``linear_control``: noisy linear system with quadratic cost, LQR demonstrator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import TaskGroup, Transition

KINDS = ("goal_bandit", "bimodal_reach", "linear_control")
PROCESS_NOISE_STD = 0.1
INIT_STATE_VAR = 0.5


class LQRNotConverged(RuntimeError):
    pass


def solve_lqr(A, B, Q, R, max_iters: int = 10_000, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Discrete-time LQR gain via Riccati fixed-point iteration. Returns (K, P) with u = -K x."""
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, B, Q, R))
    if np.any(np.linalg.eigvalsh(0.5 * (Q + Q.T)) < -1e-12):
        raise ValueError("Q must be positive semidefinite")
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise ValueError("R must be positive definite")
    P = Q.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        return _iterate_riccati(A, B, Q, R, P, max_iters, tol)


def _iterate_riccati(A, B, Q, R, P, max_iters, tol):
    for _ in range(max_iters):
        BtP = B.T @ P
        gain_term = A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - gain_term
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            return K, P
        P = P_next
    raise LQRNotConverged(f"Riccati iteration did not converge in {max_iters} iterations")


def riccati_residual(A, B, Q, R, P) -> float:
    A, B, Q, R, P = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, B, Q, R, P))
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return float(np.max(np.abs(P - rhs)))


@dataclass(frozen=True)
class TaskInstance:
    kind: str
    params: dict
    horizon: int
    group: TaskGroup
    task_id: str = ""
    split: str = "train"
    action_bound: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def goal(self) -> np.ndarray:
        return np.asarray(self.params["goal"], dtype=np.float64)

    def matrices(self):
        p = self.params
        return tuple(np.atleast_2d(np.asarray(p[k], dtype=np.float64)) for k in ("A", "B", "Q", "R", "K"))

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "kind": self.kind, "params": _jsonable(self.params),
                "horizon": self.horizon, "group_id": self.group.group_id,
                "obs_dim": self.group.obs_dim, "act_dim": self.group.act_dim,
                "split": self.split, "action_bound": self.action_bound}

    @classmethod
    def from_json(cls, d: dict) -> "TaskInstance":
        group = TaskGroup(d["group_id"], int(d["obs_dim"]), int(d["act_dim"]))
        kind = d["kind"]
        if kind == "linear_control":
            p = d["params"]
            return make_linear_control(p["A"], p["B"], p["Q"], p["R"], horizon=d["horizon"],
                                       group_id=d["group_id"], task_id=d.get("task_id", ""),
                                       split=d.get("split", "train"),
                                       action_bound=d.get("action_bound", 10.0))
        return cls(kind, {"goal": list(map(float, d["params"]["goal"]))}, int(d["horizon"]), group,
                   d.get("task_id", ""), d.get("split", "train"), float(d.get("action_bound", 1.0)))


def _jsonable(p: dict) -> dict:
    return {k: np.asarray(v).tolist() for k, v in p.items()}


def make_goal_bandit(goal, horizon: int = 1, group_id: str = "bandit", task_id: str = "",
                     split: str = "train", kind: str = "goal_bandit") -> TaskInstance:
    goal = [float(x) for x in np.asarray(goal).reshape(-1)]
    d = len(goal)
    return TaskInstance(kind, {"goal": goal}, horizon, TaskGroup(group_id, d, d), task_id, split)


def make_bimodal_reach(goal, horizon: int = 1, group_id: str = "bandit", task_id: str = "",
                       split: str = "train") -> TaskInstance:
    return make_goal_bandit(goal, horizon, group_id, task_id, split, kind="bimodal_reach")


def make_linear_control(A, B, Q, R, horizon: int = 20, group_id: str = "lqr", task_id: str = "",
                        split: str = "train", action_bound: float = 10.0) -> TaskInstance:
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, B, Q, R))
    if B.shape[0] != A.shape[0]:
        raise ValueError(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
    K, _ = solve_lqr(A, B, Q, R)
    closed = A - B @ K
    if np.max(np.abs(np.linalg.eigvals(closed))) >= 1.0:
        raise ValueError("(A, B) is not stabilizable by the LQR gain")
    group = TaskGroup(group_id, A.shape[0], B.shape[1])
    return TaskInstance("linear_control", {"A": A, "B": B, "Q": Q, "R": R, "K": K}, horizon, group,
                        task_id, split, action_bound)


@dataclass
class EnvState:
    obs: np.ndarray
    t: int = 0


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def reset(task: TaskInstance, seed) -> EnvState:
    rng = _rng(seed)
    if task.kind == "linear_control":
        s = rng.normal(0.0, np.sqrt(INIT_STATE_VAR), task.group.obs_dim)
        return EnvState(s, 0)
    return EnvState(np.zeros(task.group.obs_dim), 0)


def step(task: TaskInstance, state: EnvState, a, rng: np.random.Generator | None = None
         ) -> tuple[EnvState, float, bool]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (task.group.act_dim,):
        raise ValueError(f"action has {a.size} entries, task expects {task.group.act_dim}")
    t = state.t + 1
    done = t >= task.horizon
    if task.kind == "goal_bandit":
        g = task.goal
        return EnvState(state.obs, t), -float(np.sum((a - g) ** 2)), done
    if task.kind == "bimodal_reach":
        g = task.goal
        r = -min(float(np.sum((a - g) ** 2)), float(np.sum((a + g) ** 2)))
        return EnvState(state.obs, t), r, done
    A, B, Q, R, _ = task.matrices()
    noise = _rng(rng).normal(0.0, PROCESS_NOISE_STD, A.shape[0])
    s_next = A @ state.obs + B @ a + noise
    r = -float(s_next @ Q @ s_next) - float(a @ R @ a)
    return EnvState(s_next, t), r, done


def demonstrator_action(task: TaskInstance, obs, rng: np.random.Generator | None = None) -> np.ndarray:
    if task.kind == "goal_bandit":
        return task.goal.copy()
    if task.kind == "bimodal_reach":
        sign = 1.0 if _rng(rng).random() < 0.5 else -1.0
        return sign * task.goal
    _, _, _, _, K = task.matrices()
    return -K @ np.asarray(obs, dtype=np.float64)


@dataclass
class EpisodeResult:
    total_return: float
    transitions: list[Transition] = field(default_factory=list)


def run_episode(task: TaskInstance, policy, rng: np.random.Generator) -> EpisodeResult:
    """Roll one episode with ``policy(obs) -> action``."""
    state = reset(task, rng)
    out = EpisodeResult(0.0)
    done = False
    while not done:
        a = np.asarray(policy(state.obs), dtype=np.float64)
        nxt, r, done = step(task, state, a, rng)
        out.transitions.append(Transition(state.obs.copy(), a, r))
        out.total_return += r
        state = nxt
    return out


def random_policy_score(task: TaskInstance, n_episodes: int, rng: np.random.Generator) -> float:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    d = task.group.act_dim
    returns = [run_episode(task, lambda _o: rng.uniform(-1.0, 1.0, d), rng).total_return
               for _ in range(n_episodes)]
    return float(np.mean(returns))


def expert_score(task: TaskInstance, n_episodes: int, rng: np.random.Generator) -> float:
    """Mean demonstrator return; exactly zero for the bandit kinds."""
    if task.kind in ("goal_bandit", "bimodal_reach"):
        return 0.0
    returns = [run_episode(task, lambda o: demonstrator_action(task, o, rng), rng).total_return
               for _ in range(n_episodes)]
    return float(np.mean(returns))


# -- registries ------------------------------------------------------------------

def save_registry(path: str | Path, tasks: list[TaskInstance]) -> None:
    Path(path).write_text(json.dumps([t.to_json() for t in tasks], indent=1))


def load_registry(path: str | Path) -> list[TaskInstance]:
    tasks = [TaskInstance.from_json(d) for d in json.loads(Path(path).read_text())]
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task ids in registry")
    dims: dict[str, tuple[int, int]] = {}
    for t in tasks:
        key = (t.group.obs_dim, t.group.act_dim)
        if dims.setdefault(t.group.group_id, key) != key:
            raise ValueError(f"group {t.group.group_id!r} mixes dimensions")
    return tasks


def goal_registry(kind: str = "goal_bandit", n_train: int = 64, n_test: int = 16, act_dim: int = 2,
                  seed: int = 0, group_id: str = "bandit") -> list[TaskInstance]:
    """Goals drawn uniformly from the action box; first ``n_train`` train, the rest test."""
    rng = np.random.default_rng(seed)
    goals = rng.uniform(-1.0, 1.0, (n_train + n_test, act_dim))
    make = make_goal_bandit if kind == "goal_bandit" else make_bimodal_reach
    return [make(g, group_id=group_id, task_id=f"{kind}_{i:03d}", split="train" if i < n_train else "test")
            for i, g in enumerate(goals)]


def linear_control_registry(n_train: int = 8, n_test: int = 2, seed: int = 0,
                            group_id: str = "lqr") -> list[TaskInstance]:
    """Random stable-ish 2-state / 1-input systems with identity costs."""
    rng = np.random.default_rng(seed)
    tasks = []
    while len(tasks) < n_train + n_test:
        A = np.eye(2) + rng.uniform(-0.2, 0.2, (2, 2))
        B = rng.uniform(-1.0, 1.0, (2, 1))
        try:
            i = len(tasks)
            tasks.append(make_linear_control(A, B, np.eye(2), np.eye(1), group_id=group_id,
                                             task_id=f"linear_control_{i:03d}",
                                             split="train" if i < n_train else "test"))
        except (ValueError, LQRNotConverged):
            continue
    return tasks
