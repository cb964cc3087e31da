import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fxarb.neural import Adam, GraphBatch, Tape, TapeError, count_params, forward, gradients, init_gnn, width_for_budget
from fxarb.neural import autodiff as ad
from fxarb.neural import checkpoint
from fxarb.neural.gnn import FeatureScaler, edge_conv, node_conv

SLOPE = 0.01


def leaky(x):
    return np.where(x > 0, x, SLOPE * x)


def loop_node_conv(n, e, w, b, mask):
    """Per-node loop over in-neighbours; the reference for the vectorised version."""
    B, m, dn = n.shape
    out = np.zeros((B, m, w.shape[0]))
    for bb in range(B):
        for i in range(m):
            msgs = [leaky(w @ np.concatenate([n[bb, i], e[bb, j, i], n[bb, j]]) + b)
                    for j in range(m) if mask[bb, j, i]]
            if msgs:
                out[bb, i] = np.mean(msgs, axis=0)
    return out


def loop_edge_conv(n, e, w, b):
    B, m, _ = n.shape
    out = np.zeros((B, m, m, w.shape[0]))
    for bb in range(B):
        for i in range(m):
            for j in range(m):
                out[bb, i, j] = leaky(w @ np.concatenate([n[bb, i], e[bb, i, j], n[bb, j]]) + b)
    return out


def random_batch(rng, B=2, m=5, dn=3, de=2, p=0.6):
    mask = rng.random((B, m, m)) < p
    mask[:, np.arange(m), np.arange(m)] = False
    return GraphBatch(rng.normal(size=(B, m, dn)), rng.normal(size=(B, m, m, de)), np.ones((B, m), bool), mask)


def test_node_conv_hand_example():
    # two nodes, one edge 1 -> 0; node 1 has no in-neighbour
    n = np.array([[[1.0], [2.0]]])
    e = np.zeros((1, 2, 2, 1))
    e[0, 1, 0, 0] = 0.5
    mask = np.array([[[False, False], [True, False]]])
    w = np.array([[1.0, 1.0, 1.0]])  # [self | edge | neighbour]
    out = node_conv(ad.Var(n), ad.Var(e), ad.Var(w), ad.Var(np.zeros(1)), mask)
    np.testing.assert_allclose(out.value[0, :, 0], [3.5, 0.0])


def test_edge_conv_hand_example():
    n = np.array([[[1.0], [2.0]]])
    e = np.zeros((1, 2, 2, 1))
    e[0, 0, 1, 0] = 3.0
    w = np.array([[1.0, 1.0, 1.0]])
    out = edge_conv(ad.Var(n), ad.Var(e), ad.Var(w), ad.Var(np.array([0.5])))
    assert out.value[0, 0, 1, 0] == pytest.approx(6.5)
    # 1 -> 0 has no edge feature: 2 + 0 + 1 + 0.5
    assert out.value[0, 1, 0, 0] == pytest.approx(3.5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 5), h=st.integers(1, 4))
def test_convs_match_loop_oracle(seed, m, h):
    rng = np.random.default_rng(seed)
    g = random_batch(rng, m=m)
    w = rng.normal(size=(h, 2 * 3 + 2))
    b = rng.normal(size=h)
    got = node_conv(ad.Var(g.node_x), ad.Var(g.edge_x), ad.Var(w), ad.Var(b), g.edge_mask).value
    np.testing.assert_allclose(got, loop_node_conv(g.node_x, g.edge_x, w, b, g.edge_mask), atol=1e-12)
    got = edge_conv(ad.Var(g.node_x), ad.Var(g.edge_x), ad.Var(w), ad.Var(b)).value
    np.testing.assert_allclose(got, loop_edge_conv(g.node_x, g.edge_x, w, b), atol=1e-12)


def fd_check(params, batch, target, step=1e-5):
    def loss_of(p):
        out, _ = forward(p, batch)
        return float(np.mean((out.value - target) ** 2))

    tape = Tape()
    out, leaves = forward(params, batch, tape)
    loss = ad.vmean(ad.square(out - target))
    tape.backward(loss)
    grads = gradients(leaves)
    worst = 0.0
    tensors = params.tensors()
    for k, v in tensors.items():
        for idx in np.ndindex(v.shape):
            hi = {kk: vv.copy() for kk, vv in tensors.items()}
            lo = {kk: vv.copy() for kk, vv in tensors.items()}
            hi[k][idx] += step
            lo[k][idx] -= step
            fd = (loss_of(params.with_tensors(hi)) - loss_of(params.with_tensors(lo))) / (2 * step)
            worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd), abs(grads[k][idx]), 1e-8))
    return worst


@pytest.mark.parametrize("mode", ["edge_output", "node_output"])
def test_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(3)
    batch = random_batch(rng, B=2, m=5, p=0.7)
    params = init_gnn(3, 2, 3, 2, mode, seed=4)
    params.head.bias[:] = 0.1
    shape = (2, 5, 5) if mode == "edge_output" else (2, 5)
    assert fd_check(params, batch, rng.normal(size=shape)) < 1e-5


@pytest.mark.parametrize("mode", ["edge_output", "node_output"])
@pytest.mark.parametrize("layers", [1, 2, 3])
def test_count_params_matches_tensors(mode, layers):
    for h in (1, 4, 7):
        p = init_gnn(4, 6, h, layers, mode)
        assert p.count() == count_params(4, 6, h, layers, mode)


def test_width_for_budget_is_largest_fit():
    for budget in (200, 1000, 5000):
        h = width_for_budget(budget, 2, 2, 6)
        assert count_params(2, 6, h, 2) <= budget < count_params(2, 6, h + 1, 2)
    with pytest.raises(ValueError):
        width_for_budget(5, 2, 2, 6)


def test_zero_head_gives_zero_output():
    rng = np.random.default_rng(0)
    p = init_gnn(3, 2, 4, 2, "edge_output", zero_head=True)
    out, _ = forward(p, random_batch(rng))
    assert np.all(out.value == 0.0)


def test_feature_width_mismatch_raises():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        forward(init_gnn(4, 2, 3, 1), random_batch(rng))


def test_tape_single_use_and_order():
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(TapeError):
        tape.backward(ad.Var(np.ones(3)))
    y = ad.vsum(x * 2.0)
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])
    with pytest.raises(TapeError):
        tape.backward(y)


def test_leaky_derivative_at_zero_is_slope():
    tape = Tape()
    x = tape.watch(np.array([0.0, -1.0, 1.0]))
    tape.backward(ad.vsum(ad.leaky_relu(x, SLOPE)))
    np.testing.assert_allclose(x.grad, [SLOPE, SLOPE, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    x = tape.watch(np.array([0.0, -1.0, 2.0]))
    tape.backward(ad.vsum(ad.relu(x)))
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_elementwise_ops_fd(seed):
    rng = np.random.default_rng(seed)
    a0 = rng.normal(size=(3, 4))
    b0 = rng.uniform(0.5, 2.0, size=(4,))
    mat = rng.normal(size=(2, 3, 3))

    def f(a, b):
        q = a * b - a / b + ad.square(a)
        s = ad.vsum(q, axis=1)
        r = ad.batch_matvec(mat, ad.reshape(ad.expand(s, 0) * ad.Var(np.ones((2, 1))), (2, 3)))
        return ad.vmean(r) + ad.vsum(q[1:, ::2])

    tape = Tape()
    a, b = tape.watch(a0), tape.watch(b0)
    tape.backward(f(a, b))
    for var, base, other in ((a, a0, lambda x: f(ad.Var(x), ad.Var(b0))), (b, b0, lambda x: f(ad.Var(a0), ad.Var(x)))):
        for idx in np.ndindex(base.shape):
            hi, lo = base.copy(), base.copy()
            hi[idx] += 1e-6
            lo[idx] -= 1e-6
            fd = (other(hi).value - other(lo).value) / 2e-6
            assert fd == pytest.approx(var.grad[idx], rel=1e-5, abs=1e-7)


def test_adam_rejects_nonfinite_and_descends():
    opt = Adam(lr=0.1)
    params = {"x": np.array([3.0])}
    same, ok = opt.step(params, {"x": np.array([np.nan])})
    assert not ok and same is params and opt.step_count == 0
    for _ in range(200):
        params, _ = opt.step(params, {"x": 2 * params["x"]})
    assert abs(params["x"][0]) < 0.1


def test_training_loss_decreases_on_random_data():
    rng = np.random.default_rng(1)
    batch = random_batch(rng, B=8, m=4)
    target = rng.normal(size=(8, 4, 4))
    p = init_gnn(3, 2, 6, 2, "edge_output", seed=2)
    opt = Adam(lr=1e-2)
    losses = []
    for _ in range(10):
        tape = Tape()
        out, leaves = forward(p, batch, tape)
        loss = ad.vmean(ad.square(out - target))
        tape.backward(loss)
        losses.append(float(loss.value))
        new, _ = opt.step(p.tensors(), gradients(leaves))
        p = p.with_tensors(new)
    assert losses[-1] < losses[0]


def test_scaler_fit_and_degenerate_flag():
    rng = np.random.default_rng(0)
    g = random_batch(rng, B=4, m=5)
    g.node_x[..., 0] = 2.0
    s = FeatureScaler.fit([g])
    assert "node0" in s.degenerate
    z = s.scale_edges(g.edge_x)[g.edge_mask]
    np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(s.unscale_edges(s.scale_edges(g.edge_x)), g.edge_x, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    p = init_gnn(3, 2, 4, 2, "node_output", seed=5)
    p.target_scale = 0.0123
    path = tmp_path / "m.npz"
    checkpoint.save(p, path)
    q = checkpoint.load(path)
    batch = random_batch(rng)
    np.testing.assert_array_equal(forward(p, batch)[0].value, forward(q, batch)[0].value)
    assert checkpoint.to_bytes(p) == checkpoint.to_bytes(q)
