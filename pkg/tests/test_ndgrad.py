import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowdpt import ndgrad as nd
from flowdpt.ndgrad import Tensor


def central_jvp(f, xs, vs, h=1e-5):
    plus = f(*[x + h * v for x, v in zip(xs, vs)])
    minus = f(*[x - h * v for x, v in zip(xs, vs)])
    return (plus - minus) / (2 * h)


def check_op(f, *shapes, seed=0, positive=False):
    """Compare the adjoint of f against central differences along a random direction."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    vs = [rng.normal(size=s) for s in shapes]
    w = None

    def scalar(*arrays):
        nonlocal w
        out = f(*[Tensor(a) for a in arrays]).data
        if w is None:
            w = np.random.default_rng(seed + 1).normal(size=out.shape)
        return float(np.sum(out * w))

    fd = central_jvp(scalar, xs, vs)
    ts = [nd.parameter(x) for x in xs]
    out = f(*ts)
    loss = nd.sum(nd.mul(out, Tensor(w)))
    grads = nd.backward(loss, {str(i): t for i, t in enumerate(ts)})
    analytic = sum(float(np.sum(grads[str(i)] * v)) for i, v in enumerate(vs))
    assert abs(analytic - fd) <= 1e-4 * max(1.0, abs(fd)), (analytic, fd)


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "mul": (lambda a, b: a * b, [(2, 3, 4), (3, 1)]),
    "matmul": (lambda a, b: a @ b, [(2, 3, 5), (5, 4)]),
    "concat": (lambda a, b: nd.concat([a, b], axis=-1), [(3, 2), (3, 5)]),
    "slice": (lambda a: a[:, 1:3], [(4, 5)]),
    "fancy": (lambda a: a[np.array([0, 0, 2])], [(3, 4)]),
    "softmax": (lambda a: nd.softmax(a), [(3, 6)]),
    "layer_norm": (lambda a, w, b: nd.layer_norm(a, w, b), [(4, 8), (8,), (8,)]),
    "gelu": (nd.gelu, [(5, 7)]),
    "silu": (nd.silu, [(5, 7)]),
    "take": (lambda a: nd.take(a, [2, 0, 1, 2], axis=0), [(3, 4)]),
    "take_axis1": (lambda a: nd.take(a, [1, 0], axis=1), [(2, 3, 4)]),
    "exp": (nd.exp, [(3, 3)]),
    "sin_cos": (lambda a: nd.sin(a) * nd.cos(a), [(6,)]),
    "square": (nd.square, [(2, 2)]),
    "sum_axis": (lambda a: nd.sum(a, axis=1), [(3, 4, 2)]),
    "mean": (lambda a: nd.mean(a, axis=-1, keepdims=True), [(3, 4)]),
    "transpose": (lambda a: nd.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: nd.reshape(a, (6, 2)), [(3, 4)]),
    "broadcast_to": (lambda a: nd.broadcast_to(a, (3, 2, 4)), [(4,)]),
    "where": (lambda a: nd.where(np.tri(4, dtype=bool), a, 0.0), [(2, 4, 4)]),
    "neg_sub": (lambda a, b: a - (-b), [(3,), (3,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_adjoint_matches_finite_differences(name):
    f, shapes = OPS[name]
    for seed in range(3):
        check_op(f, *shapes, seed=seed)


def test_clip_adjoint_away_from_kinks():
    check_op(lambda a: nd.clip(a, -5.0, 0.0), (4, 4), seed=3)


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 8), k=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_matmul_jvp_random_shapes(m, k, n, seed):
    check_op(lambda a, b: a @ b, (m, k), (k, n), seed=seed)


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 8), n=st.integers(2, 8), seed=st.integers(0, 10_000))
def test_normalisers_jvp_random_shapes(m, n, seed):
    check_op(nd.softmax, (m, n), seed=seed)
    check_op(lambda a: nd.layer_norm(a), (m, n), seed=seed)
    check_op(nd.gelu, (m, n), seed=seed)


def test_identity_matmul():
    M = np.arange(9.0).reshape(3, 3)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(M)).data, M)


def test_softmax_symmetric():
    assert np.allclose(nd.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_layer_norm_constant_row_is_zero():
    y = nd.layer_norm(Tensor(np.full((2, 5), 3.7)))
    assert np.array_equal(y.data, np.zeros((2, 5)))
    x = nd.parameter(np.full((1, 4), 2.0))
    g = nd.backward(nd.sum(nd.layer_norm(x) * Tensor([[1.0, 2.0, 3.0, 4.0]])), {"x": x})
    assert np.all(np.isfinite(g["x"]))


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(nd.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))
    with pytest.raises(nd.ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_square_derivative():
    x = nd.parameter(3.0)
    g = nd.backward(x * x, {"x": x})
    assert g["x"] == 6.0


def test_matmul_gradient_is_upstream_times_bt():
    rng = np.random.default_rng(0)
    a, b, up = nd.parameter(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2))), rng.normal(size=(3, 2))
    g = nd.backward(nd.sum(nd.mul(a @ b, Tensor(up))), {"a": a})
    assert np.allclose(g["a"], up @ b.data.T)


def test_backward_rejects_non_scalar():
    x = nd.parameter(np.ones(3))
    with pytest.raises(ValueError):
        nd.backward(x * 2.0, {"x": x})


def test_unreachable_parameter_gets_zero_gradient():
    x, y = nd.parameter(np.ones(3)), nd.parameter(np.ones((2, 2)))
    g = nd.backward(nd.sum(x), {"x": x, "y": y})
    assert np.array_equal(g["y"], np.zeros((2, 2)))


def test_shared_node_visited_once():
    x = nd.parameter(2.0)
    y = x * x
    z = y + y  # d/dx 2x^2 = 4x
    assert nd.backward(z, {"x": x})["x"] == 8.0


def _two_layer_loss(params, x):
    h = nd.gelu(x @ params["w1"] + params["b1"])
    return nd.mean(nd.square(h @ params["w2"]))


def test_two_layer_net_gradients_vs_finite_differences():
    rng = np.random.default_rng(7)
    params = {"w1": nd.parameter(rng.normal(size=(5, 8))), "b1": nd.parameter(rng.normal(size=8)),
              "w2": nd.parameter(rng.normal(size=(8, 3)))}
    x = Tensor(rng.normal(size=(6, 5)))
    grads = nd.backward(_two_layer_loss(params, x), params)
    h = 1e-5
    worst = 0.0
    for name, p in params.items():
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = _two_layer_loss(params, x).item()
            p.data[idx] = orig - h
            down = _two_layer_loss(params, x).item()
            p.data[idx] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - grads[name][idx]) / max(1e-3, abs(fd)))
    assert worst < 1e-4


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(1)
    params = {"w1": nd.parameter(rng.normal(size=(5, 8))), "b1": nd.parameter(rng.normal(size=8)),
              "w2": nd.parameter(rng.normal(size=(8, 3)))}
    x = Tensor(rng.normal(size=(6, 5)))
    g1 = nd.backward(_two_layer_loss(params, x), params)
    g2 = nd.backward(_two_layer_loss(params, x), params)
    assert all(g1[k].tobytes() == g2[k].tobytes() for k in params)


def test_no_grad_records_nothing():
    x = nd.parameter(np.ones(2))
    with nd.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


# -- Adam ---------------------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = nd.parameter(np.zeros(4))
    opt = nd.Adam({"p": p}, lr=1e-3)
    opt.step({"p": np.ones(4)})
    assert np.allclose(p.data, -1e-3, rtol=1e-6)


def test_adam_zero_gradient_leaves_params():
    p = nd.parameter(np.arange(3.0))
    opt = nd.Adam({"p": p}, lr=0.1)
    opt.step({"p": np.zeros(3)})
    assert np.array_equal(p.data, np.arange(3.0))


def test_adam_two_steps_match_scalar_recurrence():
    lr, b1, b2, eps, g = 0.01, 0.9, 0.99, 1e-8, 0.3
    theta, m, v = 1.5, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = nd.parameter(np.array([1.5]))
    opt = nd.Adam({"p": p}, lr=lr, betas=(b1, b2), eps=eps)
    for _ in range(2):
        opt.step({"p": np.array([g])})
    assert p.data[0] == pytest.approx(theta, abs=1e-15)
    assert opt.t == 2


def test_adam_rejects_non_finite_gradient_with_name():
    p = nd.parameter(np.zeros(2))
    opt = nd.Adam({"weights": p}, lr=0.1)
    with pytest.raises(nd.NonFiniteGradient, match="weights"):
        opt.step({"weights": np.array([1.0, np.nan])})
    assert np.array_equal(p.data, np.zeros(2)) and opt.t == 0


# -- clipping --------------------------------------------------------------------------

def test_clip_scales_by_half():
    g = {"a": np.array([3.0, 4.0])}
    out, norm = nd.clip_global_norm(g, 2.5)
    assert norm == 5.0
    assert np.allclose(out["a"], [1.5, 2.0])


def test_clip_leaves_small_norm():
    g = {"a": np.array([0.6, 0.8])}
    out, _ = nd.clip_global_norm(g, 2.5)
    assert np.array_equal(out["a"], g["a"])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100.0), max_norm=st.floats(0.1, 10.0))
def test_clip_bound_and_idempotence(seed, scale, max_norm):
    rng = np.random.default_rng(seed)
    g = {"a": rng.normal(size=(3, 4)) * scale, "b": rng.normal(size=5) * scale}
    once, _ = nd.clip_global_norm(g, max_norm)
    total = math.sqrt(sum(float(np.sum(v * v)) for v in once.values()))
    assert total <= max_norm + 1e-9
    twice, _ = nd.clip_global_norm(once, max_norm)
    assert all(np.allclose(once[k], twice[k], rtol=1e-12, atol=0) for k in g)


# -- files ---------------------------------------------------------------------------------

def test_array_file_roundtrip(tmp_path):
    arrays = {"w": np.random.default_rng(0).normal(size=(3, 2)), "f": np.arange(4, dtype=np.float32)}
    nd.save_arrays(tmp_path / "ck", arrays, {"step": 3})
    back, meta = nd.load_arrays(tmp_path / "ck")
    assert meta == {"step": 3}
    assert all(back[k].tobytes() == arrays[k].tobytes() and back[k].dtype == arrays[k].dtype for k in arrays)


def test_named_streams_are_reproducible_and_distinct():
    a = nd.stream(3, "train").random(4)
    assert np.array_equal(a, nd.stream(3, "train").random(4))
    assert not np.array_equal(a, nd.stream(3, "eval").random(4))
