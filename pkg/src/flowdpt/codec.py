"""Per-group observation/action/reward encoders and sequence assembly.

A token for a context transition is ``cat(phi_o(o), phi_a(a), phi_r(r))``; the
query token keeps only the observation slice and zeros the rest. Sequences are
laid out as ``[BOS, query, context...]`` with the context permuted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .layers import MLP, Module
from .ndgrad import Tensor


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float


@dataclass(frozen=True)
class TaskGroup:
    group_id: str
    obs_dim: int
    act_dim: int
    widths: tuple[int, int, int] | None = None
    reward_scale: float = 1.0

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError(f"group {self.group_id!r}: dimensions must be positive")

    def slice_widths(self, d_model: int) -> tuple[int, int, int]:
        if self.widths is not None:
            if sum(self.widths) != d_model:
                raise ValueError(f"group {self.group_id!r}: widths {self.widths} do not sum to {d_model}")
            return tuple(self.widths)
        d_o = d_model // 2
        d_a = d_model // 4
        return d_o, d_a, d_model - d_o - d_a

    def to_json(self, d_model: int) -> dict:
        return {"obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "widths": list(self.slice_widths(d_model)), "reward_scale": self.reward_scale}

    @classmethod
    def from_json(cls, group_id: str, d: dict) -> "TaskGroup":
        return cls(group_id, int(d["obs_dim"]), int(d["act_dim"]),
                   tuple(d["widths"]) if d.get("widths") else None, float(d.get("reward_scale", 1.0)))


@dataclass
class GroupRegistry:
    groups: dict[str, TaskGroup] = field(default_factory=dict)

    def add(self, group: TaskGroup) -> None:
        old = self.groups.get(group.group_id)
        if old is not None and (old.obs_dim, old.act_dim) != (group.obs_dim, group.act_dim):
            raise ValueError(f"group {group.group_id!r} already registered with different dimensions")
        self.groups[group.group_id] = group

    def __getitem__(self, gid: str) -> TaskGroup:
        return self.groups[gid]

    def __iter__(self):
        return iter(self.groups.values())

    def __len__(self):
        return len(self.groups)


class GroupCodec(Module):
    def __init__(self, group: TaskGroup, d_model: int, rng: np.random.Generator,
                 dtype=np.float64, activation: str = "gelu"):
        self.group = group
        d_o, d_a, d_r = group.slice_widths(d_model)
        self.d_model = d_model
        self.phi_o = MLP([group.obs_dim, d_model, d_o], rng, dtype, activation)
        self.phi_a = MLP([group.act_dim, d_model, d_a], rng, dtype, activation)
        self.phi_r = MLP([1, d_model, d_r], rng, dtype, activation)

    @property
    def widths(self) -> tuple[int, int, int]:
        return self.group.slice_widths(self.d_model)

    def _check(self, what: str, arr: np.ndarray, dim: int) -> None:
        if arr.shape[-1] != dim:
            raise nd.ShapeError(f"{self.group.group_id}.{what}", (dim,), arr.shape)

    def encode_context(self, obs: np.ndarray, act: np.ndarray, rew: np.ndarray) -> Tensor:
        """Tokens for a batch of contexts: obs (..., n, obs_dim), act (..., n, act_dim), rew (..., n)."""
        dt = self.phi_o.layers[0].weight.dtype
        obs, act = np.asarray(obs, dtype=dt), np.asarray(act, dtype=dt)
        self._check("obs", obs, self.group.obs_dim)
        self._check("action", act, self.group.act_dim)
        rew = np.asarray(rew, dtype=dt)[..., None] * self.group.reward_scale
        if rew.shape[:-1] != obs.shape[:-1] or act.shape[:-1] != obs.shape[:-1]:
            raise nd.ShapeError("encode_context", obs.shape, act.shape)
        return nd.concat([self.phi_o(Tensor(obs)), self.phi_a(Tensor(act)), self.phi_r(Tensor(rew))], axis=-1)

    def encode_query_batch(self, obs: np.ndarray) -> Tensor:
        dt = self.phi_o.layers[0].weight.dtype
        obs = np.asarray(obs, dtype=dt)
        self._check("query", obs, self.group.obs_dim)
        e = self.phi_o(Tensor(obs))
        _, d_a, d_r = self.widths
        zeros = Tensor(np.zeros(obs.shape[:-1] + (d_a + d_r,), dtype=dt))
        return nd.concat([e, zeros], axis=-1)


def encode_transition(codec: GroupCodec, t: Transition) -> Tensor:
    return codec.encode_context(np.asarray(t.obs)[None], np.asarray(t.action)[None],
                                np.asarray([t.reward]))[0]


def encode_query(codec: GroupCodec, o_q: np.ndarray) -> Tensor:
    return codec.encode_query_batch(np.asarray(o_q)[None])[0]


def check_permutation(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64).reshape(-1)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError(f"not a permutation of range({n}): {perm.tolist()}")
    return perm


def assemble(bos: Tensor, query_token: Tensor, context_tokens: Tensor | None, perm=None) -> Tensor:
    """Stack ``[BOS, query, context[perm]]`` along the token axis.

    ``query_token`` has shape (..., d) and ``context_tokens`` (..., n, d); leading
    batch axes are shared. With ``perm`` omitted the context order is kept.
    """
    lead = query_token.shape[:-1]
    d = query_token.shape[-1]
    if bos.shape != (d,):
        raise nd.ShapeError("assemble", bos.shape, (d,))
    parts = [nd.broadcast_to(bos, lead + (1, d)), nd.reshape(query_token, lead + (1, d))]
    if context_tokens is not None and context_tokens.shape[-2] > 0:
        n = context_tokens.shape[-2]
        if perm is not None:
            perm = check_permutation(perm, n)
            if not np.array_equal(perm, np.arange(n)):
                context_tokens = nd.take(context_tokens, perm, axis=context_tokens.ndim - 2)
        parts.append(context_tokens)
    elif perm is not None:
        check_permutation(perm, 0)
    return nd.concat(parts, axis=-2)
