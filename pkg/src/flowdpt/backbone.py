"""Causal transformer backbone with no positional information."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndgrad as nd
from .layers import LayerNorm, Linear, Module
from .ndgrad import Tensor

_MASKED = -1e30


@dataclass
class BackboneConfig:
    # large-scale reference: 16 layers, 24 heads, d_model 1536, d_ff 6144, context 4096
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    L_max: int = 128
    activation: str = "gelu"

    def __post_init__(self):
        for k in ("n_layers", "n_heads", "d_model", "d_ff", "L_max"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_json(self) -> dict:
        return asdict(self)


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) matrix; entry [i, j] allows position i to attend to j iff j <= i."""
    if n < 1:
        raise ValueError("mask length must be >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


class SelfAttention(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype, scale=1.0 / np.sqrt(2 * cfg.n_layers))

    def __call__(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        H = self.n_heads
        dh = d // H

        def heads(t):
            return nd.transpose(nd.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        scores = nd.matmul(q, nd.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        att = nd.softmax(nd.where(causal_mask(T), scores, _MASKED), axis=-1)
        out = nd.reshape(nd.transpose(nd.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        return self.wo(out)


class Block(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype):
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.attn = SelfAttention(cfg, rng, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.ff_in = Linear(cfg.d_model, cfg.d_ff, rng, dtype)
        self.ff_out = Linear(cfg.d_ff, cfg.d_model, rng, dtype, scale=1.0 / np.sqrt(2 * cfg.n_layers))
        self.activation = cfg.activation

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        act = nd.ACTIVATIONS[self.activation]
        return x + self.ff_out(act(self.ff_in(self.ln2(x))))


class Backbone(Module):
    """Pre-norm transformer: tokens (B, T, d_model) -> hidden states of the same shape."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.blocks = [Block(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model, dtype)

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.d_model:
            raise nd.ShapeError("backbone", tokens.shape, ("B", "T", self.cfg.d_model))
        if tokens.shape[1] > self.cfg.L_max + 2:
            raise ValueError(f"sequence of {tokens.shape[1]} tokens exceeds L_max + 2 = {self.cfg.L_max + 2}")
        x = tokens
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)


def forward(backbone: Backbone, seq: Tensor) -> Tensor:
    """Hidden states for one sequence (T, d) or a batch (B, T, d)."""
    if seq.ndim == 2:
        return nd.reshape(backbone(nd.reshape(seq, (1,) + seq.shape)), seq.shape)
    return backbone(seq)
