"""The full agent: per-group codecs, shared BOS and backbone, per-group action heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .backbone import Backbone, BackboneConfig
from .codec import GroupCodec, TaskGroup, assemble
from .datagen import Batch
from .flowhead import (ConditionalField, FlowConfig, GaussianHead, TimeEmbedding, VectorField,
                       gaussian_loss, gaussian_sample, rf_loss, sample_action)
from .layers import Module
from .ndgrad import Tensor

HEADS = ("flow", "gaussian")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: str = "flow"
    d_gamma: int = 32
    f_min: float = 1.0
    f_max: float = 1000.0
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")

    def to_json(self) -> dict:
        return asdict(self)


class FlowDPT(Module):
    def __init__(self, cfg: ModelConfig, groups, seed: int = 0):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        bb = cfg.backbone
        rng = nd.stream(seed, "init")
        self.groups = {g.group_id: g for g in groups}
        self.bos = nd.parameter(rng.normal(0.0, 1.0, bb.d_model).astype(dt))
        self.codecs = {gid: GroupCodec(g, bb.d_model, rng, dt, bb.activation) for gid, g in self.groups.items()}
        self.backbone = Backbone(bb, rng, dt)
        if cfg.head == "flow":
            self.time_embedding = TimeEmbedding(cfg.d_gamma, cfg.f_min, cfg.f_max, dt)
            self.heads = {gid: VectorField(g.act_dim, bb.d_model, cfg.d_gamma, rng, dt, bb.activation)
                          for gid, g in self.groups.items()}
        else:
            self.heads = {gid: GaussianHead(g.act_dim, bb.d_model, rng, dt, bb.activation)
                          for gid, g in self.groups.items()}

    @property
    def dtype(self):
        return self.bos.dtype

    @property
    def L_max(self) -> int:
        return self.cfg.backbone.L_max

    def tokens(self, gid: str, o_q, ctx_obs, ctx_act, ctx_rew) -> Tensor:
        """Token batch (B, n+2, d) for queries o_q (B, obs) and contexts (B, n, ...)."""
        codec = self.codecs[gid]
        q = codec.encode_query_batch(o_q)
        ctx = codec.encode_context(ctx_obs, ctx_act, ctx_rew) if np.shape(ctx_rew)[-1] else None
        return assemble(self.bos, q, ctx)

    def hidden(self, gid: str, o_q, ctx_obs, ctx_act, ctx_rew) -> Tensor:
        return self.backbone(self.tokens(gid, o_q, ctx_obs, ctx_act, ctx_rew))

    def field(self, gid: str) -> ConditionalField:
        return ConditionalField(self.time_embedding, self.heads[gid])

    def loss(self, batch: Batch, rng: np.random.Generator) -> Tensor:
        """Mean loss over every supervised position 1..L+1."""
        h = self.hidden(batch.group_id, batch.o_q, batch.ctx_obs, batch.ctx_act, batch.ctx_rew)
        h_sup = h[:, 1:, :]
        if self.cfg.head == "flow":
            return rf_loss(self.field(batch.group_id), h_sup, batch.a_star, rng)
        return gaussian_loss(self.heads[batch.group_id], h_sup, batch.a_star)

    def act(self, gid: str, o_q, ctx_obs, ctx_act, ctx_rew, rng: np.random.Generator,
            flow: FlowConfig | None = None) -> np.ndarray:
        """One action per row, conditioned on the last hidden state of each sequence."""
        flow = flow or FlowConfig()
        with nd.no_grad():
            h = self.hidden(gid, o_q, ctx_obs, ctx_act, ctx_rew)
            h_last = h.data[:, -1, :]
            if self.cfg.head == "flow":
                return sample_action(self.field(gid), h_last, flow, rng)
            return gaussian_sample(self.heads[gid], h_last, rng)


def group_registry_json(model: FlowDPT) -> dict:
    d = model.cfg.backbone.d_model
    return {gid: g.to_json(d) for gid, g in model.groups.items()}


def save_model(directory: str | Path, model: FlowDPT, extra_arrays=None, meta=None) -> Path:
    arrays = dict(model.state_arrays())
    if extra_arrays:
        arrays.update(extra_arrays)
    m = {"model": model.cfg.to_json(), "groups": group_registry_json(model)}
    m.update(meta or {})
    return nd.save_arrays(directory, arrays, m)


def load_model(directory: str | Path) -> tuple[FlowDPT, dict, dict]:
    """Returns (model, all stored arrays, meta)."""
    arrays, meta = nd.load_arrays(directory)
    cfg = ModelConfig(**meta["model"])
    groups = [TaskGroup.from_json(gid, g) for gid, g in meta["groups"].items()]
    model = FlowDPT(cfg, groups)
    model.load_state_arrays(arrays)
    return model, arrays, meta
