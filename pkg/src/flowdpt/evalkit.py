"""Scoring, aggregation and the action-posterior diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import envsuite as env
from . import ndgrad as nd
from .datagen import demonstrator_prompt
from .envsuite import TaskInstance
from .flowhead import FlowConfig
from .model import FlowDPT
from .runtime import rollout_offline_many

ENTROPY_EPS = 1e-6
SCORE_FIELDS = ["task", "split", "seed", "raw", "random", "expert", "normalized"]


class DegenerateBaseline(ValueError):
    pass


def normalized_score(raw: float, random: float, expert: float) -> float:
    if expert == random:
        raise DegenerateBaseline(f"expert score equals random score ({expert})")
    return (raw - random) / (expert - random)


def iqm(values) -> float:
    """Mean after dropping floor(n/4) values from each end."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("iqm of empty input")
    k = v.size // 4
    return float(v[k:v.size - k].mean())


@dataclass
class ScoreRecord:
    task_id: str
    split: str
    seed: int
    raw: float
    random: float
    expert: float
    normalized: float = field(init=False)

    def __post_init__(self):
        self.normalized = normalized_score(self.raw, self.random, self.expert)

    def row(self) -> list:
        return [self.task_id, self.split, self.seed, repr(self.raw), repr(self.random),
                repr(self.expert), repr(self.normalized)]


def write_scores_csv(path: str | Path, records: Sequence[ScoreRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_FIELDS)
        for r in records:
            w.writerow(r.row())


def task_baselines(task: TaskInstance, n_episodes: int = 2000, seed: int = 0) -> tuple[float, float]:
    """(random, expert) mean returns from fixed streams, so they are reproducible."""
    rnd = env.random_policy_score(task, n_episodes, nd.stream(seed, f"random/{task.task_id}"))
    exp = env.expert_score(task, max(1, n_episodes // 10), nd.stream(seed, f"expert/{task.task_id}"))
    return rnd, exp


# -- projections and entropy -------------------------------------------------------------

def tsvd_2d(samples) -> np.ndarray:
    """Centre the samples and project them on the two leading principal axes."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least 2 samples of shape (n, d)")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(x)
    w, V = np.linalg.eigh(cov)
    V = V[:, np.argsort(w)[::-1][:2]]
    proj = xc @ V
    if proj.shape[1] < 2:
        proj = np.concatenate([proj, np.zeros((len(x), 2 - proj.shape[1]))], axis=1)
    return proj


def entropy_proxy(samples, eps: float = ENTROPY_EPS) -> float:
    """Gaussian plug-in entropy 0.5 log det(cov + eps I) + (d/2) log(2 pi e)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(x) < 1 or eps <= 0:
        raise ValueError("need >= 1 sample and eps > 0")
    d = x.shape[1]
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(x)
    _, logdet = np.linalg.slogdet(cov + eps * np.eye(d))
    return 0.5 * logdet + 0.5 * d * math.log(2 * math.pi * math.e)


@dataclass
class ContractionReport:
    task_id: str
    sizes: list[int]
    samples: dict[int, np.ndarray]
    projections: dict[int, np.ndarray]
    entropy: dict[int, float]

    def rows(self) -> list[list]:
        out = []
        for s in self.sizes:
            for i, (p, a) in enumerate(zip(self.projections[s], self.samples[s])):
                out.append([self.task_id, s, i, repr(float(p[0])), repr(float(p[1])), repr(self.entropy[s])]
                           + [repr(float(v)) for v in a])
        return out


def contraction_analysis(model: FlowDPT, task: TaskInstance, o_q, sizes: Sequence[int], n_samples: int,
                         rng: np.random.Generator, prompt_rng: np.random.Generator | None = None,
                         flow: FlowConfig | None = None) -> ContractionReport:
    """Action samples at a fixed query for nested demonstrator prompts of growing size.

    Sizes are clipped to the model's L_max (duplicates after clipping dropped). The 2-D projection is fitted on all
    samples pooled, so every size shares one set of axes.
    """
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    sizes = list(dict.fromkeys(min(s, model.L_max) for s in sizes))
    prompt_rng = prompt_rng or nd.stream(0, f"contraction/{task.task_id}")
    obs, act, rew = demonstrator_prompt(task, max(sizes) if sizes else 0, prompt_rng)
    o_q = np.asarray(o_q, dtype=np.float64)
    samples, ent = {}, {}
    for s in sizes:
        rep = lambda a: np.repeat(a[None, :s], n_samples, axis=0)
        acts = model.act(task.group.group_id, np.repeat(o_q[None], n_samples, axis=0),
                         rep(obs), rep(act), rep(rew), rng, flow)
        samples[s] = acts
        ent[s] = float(entropy_proxy(acts))
    pooled = np.concatenate([samples[s] for s in sizes])
    if len(pooled) >= 2:
        proj = tsvd_2d(pooled)
    else:
        proj = np.zeros((len(pooled), 2))
    cuts = np.cumsum([n_samples] * len(sizes))[:-1]
    projections = dict(zip(sizes, np.split(proj, cuts)))
    return ContractionReport(task.task_id, sizes, samples, projections, ent)


def write_contraction_csv(path: str | Path, reports: Sequence[ContractionReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "size", "sample", "proj0", "proj1", "entropy", "action..."])
        for r in reports:
            w.writerows(r.rows())


# -- demonstration sweep ---------------------------------------------------------------

@dataclass
class SweepCell:
    task_id: str
    size: int
    per_seed: list[float]
    iqm: float


def offline_scores(model: FlowDPT, tasks: Sequence[TaskInstance], size: int, seed: int, episodes: int,
                   baselines: dict[str, tuple[float, float]], flow: FlowConfig | None = None) -> list[ScoreRecord]:
    """Offline evaluation of each task with a fresh ``size``-transition demonstrator prompt."""
    prompts = [demonstrator_prompt(t, size, nd.stream(seed, f"prompt/{t.task_id}/{size}")) for t in tasks]
    rngs = [nd.stream(seed, f"offline/{t.task_id}/{size}") for t in tasks]
    R = rollout_offline_many(model, tasks, prompts, episodes, rngs, flow)
    out = []
    for t, r in zip(tasks, R):
        rnd, exp = baselines[t.task_id]
        out.append(ScoreRecord(t.task_id, t.split, seed, float(r.mean()), rnd, exp))
    return out


def demo_sweep(model: FlowDPT, tasks: Sequence[TaskInstance], prompt_sizes: Sequence[int],
               seeds: Sequence[int], episodes: int = 10, baselines: dict | None = None,
               flow: FlowConfig | None = None) -> list[SweepCell]:
    """Offline normalised score per (task, prompt size); IQM over seeds per cell."""
    for s in prompt_sizes:
        if s > model.L_max:
            raise ValueError(f"prompt size {s} exceeds L_max={model.L_max}")
    baselines = baselines or {t.task_id: task_baselines(t) for t in tasks}
    per = {(t.task_id, s): [] for t in tasks for s in prompt_sizes}
    for size in prompt_sizes:
        for seed in seeds:
            for rec in _lockstep_groups(model, tasks, size, seed, episodes, baselines, flow):
                per[(rec.task_id, size)].append(rec.normalized)
    return [SweepCell(t.task_id, s, per[(t.task_id, s)], iqm(per[(t.task_id, s)]))
            for t in tasks for s in prompt_sizes]


def _lockstep_groups(model, tasks, size, seed, episodes, baselines, flow):
    keyed: dict[tuple, list[TaskInstance]] = {}
    for t in tasks:
        keyed.setdefault((t.group.group_id, t.horizon), []).append(t)
    for group in keyed.values():
        yield from offline_scores(model, group, size, seed, episodes, baselines, flow)


def write_sweep_csv(path: str | Path, cells: Sequence[SweepCell]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "size", "iqm", "per_seed"])
        for c in cells:
            w.writerow([c.task_id, c.size, repr(c.iqm), ";".join(repr(v) for v in c.per_seed)])


def sweep_iqm_by_size(cells: Sequence[SweepCell]) -> dict[int, float]:
    """IQM across seeds of the task-averaged score, per prompt size."""
    sizes = sorted({c.size for c in cells})
    out = {}
    for s in sizes:
        rows = np.array([c.per_seed for c in cells if c.size == s])
        out[s] = iqm(rows.mean(axis=0))
    return out


# -- plots ---------------------------------------------------------------------------------

def save_svg_plots(out_dir: str | Path, losses=None, returns=None, contraction: ContractionReport | None = None):
    """Loss curve, per-episode return and contraction scatter as standalone SVGs (needs matplotlib)."""
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    if losses:
        fig, ax = plt.subplots(figsize=(5, 3))
        s, l = zip(*losses)
        ax.plot(s, l, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        written.append(out_dir / "loss.svg")
        fig.savefig(written[-1])
        plt.close(fig)
    if returns is not None:
        fig, ax = plt.subplots(figsize=(5, 3))
        r = np.atleast_2d(returns)
        ax.plot(np.arange(1, r.shape[1] + 1), r.mean(axis=0))
        ax.set_xlabel("episode")
        ax.set_ylabel("return")
        written.append(out_dir / "returns.svg")
        fig.savefig(written[-1])
        plt.close(fig)
    if contraction is not None:
        fig, ax = plt.subplots(figsize=(4, 4))
        for s in contraction.sizes:
            p = contraction.projections[s]
            ax.scatter(p[:, 0], p[:, 1], s=4, label=f"{s} ({contraction.entropy[s]:.2f} nats)")
        ax.legend(fontsize=7)
        written.append(out_dir / "contraction.svg")
        fig.savefig(written[-1])
        plt.close(fig)
    return written

