"""Noise-distilled data collection, shard files and DPT-style batch sampling.

Behaviour actions are the demonstrator's action plus Gaussian noise whose scale
steps through a schedule; every stored transition is relabeled with the
demonstrator's action at that state.

Shard layout (``<stem>.json`` + ``<stem>.bin``): the JSON manifest describes the
group, dims, reward scale, task and episode boundaries. The binary file holds
little-endian float32 records ``[o | a_behavior | r | a_star]`` in blocks of
``block_size`` records, each block followed by its CRC32 (uint32, LE).
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envsuite as env
from .envsuite import TaskInstance

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_LEVELS = (0.0, 0.25, 0.5, 1.0, 2.0)


class ShardError(IOError):
    pass


class ShardVersionError(ShardError):
    pass


class ShardTruncatedError(ShardError):
    pass


class ShardChecksumError(ShardError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    levels: tuple[float, ...] = DEFAULT_LEVELS
    episodes_per_level: int = 40

    def __post_init__(self):
        if not self.levels or any(s < 0 for s in self.levels):
            raise ValueError("noise levels must be non-negative and non-empty")
        if 0.0 not in self.levels:
            raise ValueError("schedule must include the clean level sigma=0")
        if self.episodes_per_level < 1:
            raise ValueError("episodes_per_level must be positive")


@dataclass
class Shard:
    """Transitions of one task, all float32."""

    task: dict
    group_id: str
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    a_star: np.ndarray
    episodes: list[tuple[int, int, float]] = field(default_factory=list)
    reward_scale: float = 1.0

    @property
    def n(self) -> int:
        return len(self.rew)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.act.shape[1]

    def levels(self) -> np.ndarray:
        """Noise level of every transition."""
        out = np.zeros(self.n)
        for start, length, sigma in self.episodes:
            out[start:start + length] = sigma
        return out

    def manifest(self, block_size: int = 1024) -> dict:
        return {"format_version": FORMAT_VERSION, "group_id": self.group_id, "obs_dim": self.obs_dim,
                "act_dim": self.act_dim, "reward_scale": self.reward_scale, "n_transitions": self.n,
                "block_size": block_size, "task": self.task,
                "episodes": [[int(s), int(n), float(sig)] for s, n, sig in self.episodes]}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Shard):
            return NotImplemented
        return (self.manifest() == other.manifest()
                and all(a.tobytes() == b.tobytes() for a, b in
                        zip((self.obs, self.act, self.rew, self.a_star),
                            (other.obs, other.act, other.rew, other.a_star))))


def empty_shard(task: TaskInstance) -> Shard:
    od, ad = task.group.obs_dim, task.group.act_dim
    z = np.zeros
    return Shard(task.to_json(), task.group.group_id, z((0, od), np.float32), z((0, ad), np.float32),
                 z(0, np.float32), z((0, ad), np.float32))


def collect_cnd(task: TaskInstance, schedule: NoiseSchedule, seed) -> Shard:
    """Roll ``episodes_per_level`` noised-demonstrator episodes per level and relabel."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    obs, act, rew, star, episodes = [], [], [], [], []
    bound = task.action_bound
    for sigma in schedule.levels:
        for ep in range(schedule.episodes_per_level):
            start = len(rew)
            try:
                state = env.reset(task, rng)
                done = False
                while not done:
                    a_star = env.demonstrator_action(task, state.obs, rng)
                    a = a_star if sigma == 0 else np.clip(a_star + sigma * rng.standard_normal(a_star.shape),
                                                          -bound, bound)
                    nxt, r, done = env.step(task, state, a, rng)
                    obs.append(state.obs)
                    act.append(a)
                    rew.append(r)
                    star.append(a_star)
                    state = nxt
            except Exception as exc:
                raise RuntimeError(f"task {task.task_id!r}: episode {ep} at sigma={sigma} failed: {exc}") from exc
            episodes.append((start, len(rew) - start, float(sigma)))
    od, ad = task.group.obs_dim, task.group.act_dim
    f32 = np.float32
    return Shard(task.to_json(), task.group.group_id,
                 np.asarray(obs, f32).reshape(-1, od), np.asarray(act, f32).reshape(-1, ad),
                 np.asarray(rew, f32).reshape(-1), np.asarray(star, f32).reshape(-1, ad), episodes)


# -- shard files ---------------------------------------------------------------------

def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def write_shard(path: str | Path, shard: Shard, block_size: int = 1024) -> Path:
    mpath, bpath = _paths(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    records = np.concatenate([shard.obs, shard.act, shard.rew[:, None], shard.a_star], axis=1)
    records = np.ascontiguousarray(records, dtype="<f4")
    out = bytearray()
    for i in range(0, len(records), block_size):
        block = records[i:i + block_size].tobytes()
        out += block
        out += struct.pack("<I", zlib.crc32(block))
    bpath.write_bytes(bytes(out))
    mpath.write_text(json.dumps(shard.manifest(block_size), indent=1))
    return mpath


def read_shard(path: str | Path) -> Shard:
    mpath, bpath = _paths(path)
    man = json.loads(mpath.read_text())
    if man.get("format_version") != FORMAT_VERSION:
        raise ShardVersionError(f"{mpath}: format_version {man.get('format_version')} != {FORMAT_VERSION}")
    od, ad, n, bs = man["obs_dim"], man["act_dim"], man["n_transitions"], man["block_size"]
    width = od + 2 * ad + 1
    raw = bpath.read_bytes()
    n_blocks = -(-n // bs)
    expected = n * width * 4 + 4 * n_blocks
    if len(raw) != expected:
        raise ShardTruncatedError(f"{bpath}: {len(raw)} bytes, expected {expected}")
    chunks = []
    pos = 0
    for b in range(n_blocks):
        rows = min(bs, n - b * bs)
        block = raw[pos:pos + rows * width * 4]
        pos += len(block)
        (crc,) = struct.unpack("<I", raw[pos:pos + 4])
        pos += 4
        if zlib.crc32(block) != crc:
            raise ShardChecksumError(f"{bpath}: checksum mismatch in block {b}")
        chunks.append(block)
    rec = np.frombuffer(b"".join(chunks), dtype="<f4").astype(np.float32).reshape(n, width)
    return Shard(man["task"], man["group_id"], rec[:, :od].copy(), rec[:, od:od + ad].copy(),
                 rec[:, od + ad].copy(), rec[:, od + ad + 1:].copy(),
                 [tuple(e) for e in man["episodes"]], float(man["reward_scale"]))


# -- sampling -------------------------------------------------------------------------

@dataclass
class Batch:
    group_id: str
    o_q: np.ndarray
    ctx_obs: np.ndarray
    ctx_act: np.ndarray
    ctx_rew: np.ndarray
    a_star: np.ndarray

    def __len__(self) -> int:
        return len(self.o_q)


@dataclass
class Dataset:
    shards: list[Shard]

    def groups(self) -> dict[str, list[Shard]]:
        out: dict[str, list[Shard]] = {}
        for s in self.shards:
            out.setdefault(s.group_id, []).append(s)
        return out

    def group_weights(self) -> dict[str, float]:
        """Sampling probability per group, proportional to transition count."""
        counts = {g: sum(s.n for s in ss) for g, ss in self.groups().items()}
        total = sum(counts.values())
        return {g: c / total for g, c in counts.items()} if total else {}

    @property
    def n_transitions(self) -> int:
        return sum(s.n for s in self.shards)


def load_dataset(directory: str | Path) -> Dataset:
    return Dataset([read_shard(p) for p in sorted(Path(directory).glob("*.json"))])


def sample_batch(shards: list[Shard], L: int, batch_size: int, rng: np.random.Generator,
                 exclude_query: bool = True, mix_levels: bool = True) -> Batch:
    """Draw ``batch_size`` (query, permuted context, a*) samples from one group.

    A task is picked uniformly, then a query transition uniformly, then ``L``
    distinct other transitions of the same task in uniformly random order.
    """
    need = L + 1 if exclude_query else max(L, 1)
    usable = []
    for s in shards:
        if s.n >= need:
            usable.append(s)
        else:
            log.warning("skipping task %s: %d transitions < %d needed", s.task.get("task_id"), s.n, need)
    if not usable:
        raise ValueError(f"no task has the {need} transitions needed for L={L}")
    g = usable[0]
    B, od, ad = batch_size, g.obs_dim, g.act_dim
    o_q = np.empty((B, od), np.float32)
    a_star = np.empty((B, ad), np.float32)
    c_o = np.empty((B, L, od), np.float32)
    c_a = np.empty((B, L, ad), np.float32)
    c_r = np.empty((B, L), np.float32)
    for b in range(B):
        s = usable[rng.integers(len(usable))]
        q = int(rng.integers(s.n))
        pool = np.arange(s.n)
        if not mix_levels:
            lv = s.levels()
            pool = pool[lv == lv[q]]
        if exclude_query:
            pool = pool[pool != q]
        if len(pool) < L:
            pool = np.arange(s.n)[np.arange(s.n) != q] if exclude_query else np.arange(s.n)
        idx = pool[rng.choice(len(pool), size=L, replace=False)] if L else pool[:0]
        o_q[b], a_star[b] = s.obs[q], s.a_star[q]
        c_o[b], c_a[b], c_r[b] = s.obs[idx], s.act[idx], s.rew[idx]
    return Batch(g.group_id, o_q, c_o, c_a, c_r, a_star)


def demonstrator_prompt(task: TaskInstance, size: int, rng: np.random.Generator):
    """``size`` clean demonstrator transitions as (obs, act, rew) arrays."""
    od, ad = task.group.obs_dim, task.group.act_dim
    obs, act, rew = [], [], []
    while len(rew) < size:
        state = env.reset(task, rng)
        done = False
        while not done and len(rew) < size:
            a = env.demonstrator_action(task, state.obs, rng)
            nxt, r, done = env.step(task, state, a, rng)
            obs.append(state.obs)
            act.append(a)
            rew.append(r)
            state = nxt
    return (np.asarray(obs, np.float64).reshape(-1, od), np.asarray(act, np.float64).reshape(-1, ad),
            np.asarray(rew, np.float64).reshape(-1))
