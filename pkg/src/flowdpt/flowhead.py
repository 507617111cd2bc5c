"""Context-conditioned rectified-flow action head and a Gaussian baseline head.

The velocity network sees ``cat(gamma(t), h, x_t)`` and is trained to predict the
straight-line displacement ``a* - x0``. Sampling integrates the learned ODE from
Gaussian noise at t=0 to t=1 with M uniform Heun (or Euler) steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndgrad as nd
from .layers import MLP, Module
from .ndgrad import Tensor

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
SOLVERS = ("heun", "euler")


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite ODE state at integration step {step}")
        self.step = step


@dataclass
class FlowConfig:
    M: int = 32
    solver: str = "heun"

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")


def init_frequencies(f_min: float, f_max: float, d_gamma: int) -> np.ndarray:
    """Log-spaced frequencies ``f_k = f_min * (f_max / f_min) ** (k / (d_gamma/2 - 1))``."""
    if not (0 < f_min < f_max):
        raise ValueError(f"need 0 < f_min < f_max, got {f_min}, {f_max}")
    if d_gamma < 4 or d_gamma % 2:
        raise ValueError(f"d_gamma must be even and >= 4, got {d_gamma}")
    half = d_gamma // 2
    k = np.arange(half, dtype=np.float64)
    return f_min * (f_max / f_min) ** (k / (half - 1))


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError("time must lie in [0, 1]")
    return t


def gamma(t, f) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t f); cos(t f)]`` for scalar or array ``t``."""
    t = _check_time(t)
    tf = t[..., None] * np.asarray(f, dtype=np.float64)
    return np.concatenate([np.sin(tf), np.cos(tf)], axis=-1)


def interpolate(x0, a_star, t):
    x0, a_star = np.asarray(x0), np.asarray(a_star)
    if x0.shape[-1] != a_star.shape[-1]:
        raise nd.ShapeError("interpolate", x0.shape, a_star.shape)
    t = np.asarray(t)[..., None] if np.ndim(t) else t
    return (1.0 - t) * x0 + t * a_star


class TimeEmbedding(Module):
    """Learnable-frequency sinusoidal embedding; frequencies stored as log f so they stay positive."""

    def __init__(self, d_gamma: int = 32, f_min: float = 1.0, f_max: float = 1000.0, dtype=np.float64):
        self.d_gamma = d_gamma
        self.log_f = nd.parameter(np.log(init_frequencies(f_min, f_max, d_gamma)).astype(dtype))

    @property
    def frequencies(self) -> np.ndarray:
        return np.exp(self.log_f.data)

    def __call__(self, t) -> Tensor:
        t = _check_time(t).astype(self.log_f.dtype)
        tf = nd.mul(Tensor(t[..., None]), nd.exp(self.log_f))
        return nd.concat([nd.sin(tf), nd.cos(tf)], axis=-1)


def _head_width(act_dim: int) -> int:
    return 4 * act_dim + 64


class VectorField(Module):
    def __init__(self, act_dim: int, d_model: int, d_gamma: int, rng, dtype=np.float64, activation="gelu"):
        w = _head_width(act_dim)
        self.act_dim = act_dim
        self.net = MLP([d_gamma + d_model + act_dim, w, w, act_dim], rng, dtype, activation)

    def __call__(self, g_t: Tensor, h: Tensor, x: Tensor) -> Tensor:
        return self.net(nd.concat([g_t, h, x], axis=-1))


class ConditionalField:
    """Binds a time embedding to a vector-field net: ``(t, h, x) -> velocity``."""

    def __init__(self, temb: TimeEmbedding, vf: VectorField):
        self.temb = temb
        self.vf = vf

    def __call__(self, t, h, x) -> Tensor:
        h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=self.temb.log_f.dtype))
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.temb.log_f.dtype))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])
        return self.vf(self.temb(t), h, x)


def rf_loss(field: Callable, h: Tensor, a_star: np.ndarray, rng: np.random.Generator | None = None,
            x0: np.ndarray | None = None, t: np.ndarray | None = None) -> Tensor:
    """Rectified-flow matching loss.

    ``h`` holds hidden states (B, P, d) for P supervised positions and ``a_star``
    the targets (B, act). One noise draw x0 and one time t are taken per
    position. The squared error is summed over action dims and averaged over
    batch and positions.
    """
    a_star = np.asarray(a_star, dtype=h.dtype)
    B, P = h.shape[0], h.shape[1]
    act = a_star.shape[-1]
    if x0 is None:
        x0 = rng.standard_normal((B, P, act))
    if t is None:
        t = rng.random((B, P))
    x0 = np.asarray(x0, dtype=h.dtype)
    target = Tensor(a_star[:, None, :] - x0)
    xt = interpolate(x0, a_star[:, None, :], t)
    v = field(t, h, Tensor(xt.astype(h.dtype)))
    err = v - target
    loss = nd.sum(nd.square(err)) * (1.0 / (B * P))
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite flow loss (|h|max={np.abs(h.data).max():.3g})")
    return loss


def integrate(field: Callable[[float, np.ndarray], np.ndarray], x0: np.ndarray, M: int,
              solver: str = "heun") -> np.ndarray:
    """Integrate dx/dt = field(t, x) from 0 to 1 in M uniform steps."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    dt = 1.0 / M
    x = np.array(x0, dtype=np.float64 if np.asarray(x0).dtype.kind != "f" else np.asarray(x0).dtype)
    for m in range(M):
        t, t_next = m / M, (m + 1) / M
        k1 = np.asarray(field(t, x))
        if solver == "euler":
            x = x + k1 * dt
        else:
            k2 = np.asarray(field(t_next, x + k1 * dt))
            x = x + 0.5 * (k1 + k2) * dt
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(m)
    return x


def sample_action(field: Callable, h, cfg: FlowConfig, rng: np.random.Generator,
                  x0: np.ndarray | None = None) -> np.ndarray:
    """Draw actions for each row of ``h`` (N, d) or a single hidden vector (d,).

    ``field(t, h, x)`` may return a Tensor or an ndarray.
    """
    h_arr = h.data if isinstance(h, Tensor) else np.asarray(h)
    single = h_arr.ndim == 1
    hb = h_arr[None] if single else h_arr
    act_dim = _act_dim(field)
    if x0 is None:
        x0 = rng.standard_normal((hb.shape[0], act_dim))
    x0 = np.asarray(x0).reshape(hb.shape[0], -1)
    hT = Tensor(hb)

    def f(t, x):
        v = field(t, hT, x)
        return v.data if isinstance(v, Tensor) else np.asarray(v)

    with nd.no_grad():
        x = integrate(f, x0, cfg.M, cfg.solver)
    return x[0] if single else x


def _act_dim(field) -> int:
    if isinstance(field, ConditionalField):
        return field.vf.act_dim
    dim = getattr(field, "act_dim", None)
    if dim is None:
        raise TypeError("field must expose act_dim or an explicit x0 must be given")
    return int(dim)


class GaussianHead(Module):
    """Diagonal Gaussian policy head: h -> (mean, clamped log_std)."""

    def __init__(self, act_dim: int, d_model: int, rng, dtype=np.float64, activation="gelu"):
        w = _head_width(act_dim)
        self.act_dim = act_dim
        self.net = MLP([d_model, w, w, 2 * act_dim], rng, dtype, activation)

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        out = self.net(h)
        a = self.act_dim
        mean = out[..., :a]
        log_std = nd.clip(out[..., a:], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std


def gaussian_nll(mean: Tensor, log_std: Tensor, a_star) -> Tensor:
    """Per-row NLL summed over action dims (shape = mean.shape[:-1])."""
    a_star = Tensor(np.asarray(a_star, dtype=mean.dtype))
    z = nd.mul(a_star - mean, nd.exp(-log_std))
    per_dim = nd.square(z) * 0.5 + log_std + 0.5 * math.log(2 * math.pi)
    return nd.sum(per_dim, axis=-1)


def gaussian_loss(head: GaussianHead, h: Tensor, a_star: np.ndarray) -> Tensor:
    """Mean NLL over batch and supervised positions; h (B, P, d), a_star (B, act)."""
    mean, log_std = head(h)
    a = np.asarray(a_star)[:, None, :]
    nll = gaussian_nll(mean, log_std, np.broadcast_to(a, mean.shape))
    return nd.mean(nll)


def gaussian_sample(head: GaussianHead, h, rng: np.random.Generator) -> np.ndarray:
    h_arr = h.data if isinstance(h, Tensor) else np.asarray(h)
    with nd.no_grad():
        mean, log_std = head(Tensor(h_arr))
    return mean.data + np.exp(log_std.data) * rng.standard_normal(mean.shape)
