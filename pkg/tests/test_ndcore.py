import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointdiff import ndcore as nd
from jointdiff.ndcore import Tensor, parameter


def conv_loop_oracle(x, k, stride, pad):
    """Direct sum-of-window loops, float64 accumulation, row-major (i, j, c) order."""
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin), dtype=np.float64)
    xp[pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, cout), dtype=np.float64)
    for oy in range(ho):
        for ox in range(wo):
            for o in range(cout):
                s = 0.0
                for i in range(kh):
                    for j in range(kw):
                        for c in range(cin):
                            s += float(xp[oy * stride + i, ox * stride + j, c]) * float(k[i, j, c, o])
                out[oy, ox, o] = s
    return out.astype(np.float32)


# ------------------------------------------------------------------ conv2d


def test_conv_scalar_scaling():
    x = Tensor(np.array([[1, 2], [3, 4]], np.float32)[..., None])
    k = Tensor(np.full((1, 1, 1, 1), 2.0, np.float32))
    np.testing.assert_array_equal(nd.conv2d(x, k).data[..., 0], [[2, 4], [6, 8]])


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(5, 6, 3)).astype(np.float32)
    k = np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(nd.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_window_sum():
    out = nd.conv2d(Tensor(np.ones((3, 3, 1), np.float32)), Tensor(np.ones((2, 2, 1, 1), np.float32)))
    np.testing.assert_array_equal(out.data[..., 0], np.full((2, 2), 4.0))


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="channels"):
        nd.conv2d(Tensor(np.zeros((4, 4, 3), np.float32)), Tensor(np.zeros((3, 3, 2, 1), np.float32)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
@pytest.mark.parametrize("seed", range(3))
def test_conv_matches_loop_oracle_exactly(stride, pad, seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(3, 9, size=2)
    x = rng.normal(size=(h, w, 3)).astype(np.float32)
    k = rng.normal(size=(3, 3, 3, 2)).astype(np.float32)
    got = nd.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
    want = conv_loop_oracle(x, k, stride, pad)
    assert got.shape == want.shape == ((h + 2 * pad - 3) // stride + 1, (w + 2 * pad - 3) // stride + 1, 2)
    np.testing.assert_array_equal(got, want)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6, 6, 2)).astype(np.float32)
    k = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
    batched = nd.conv2d(Tensor(x), Tensor(k), pad=1).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], nd.conv2d(Tensor(x[i]), Tensor(k), pad=1).data)


# ------------------------------------------------------------------ backward


def test_backward_square():
    x = parameter(np.array(3.0))
    (g,) = nd.backward(nd.mul(x, x), [x])
    assert float(g) == 6.0


def test_backward_sum_product():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(4, 5)).astype(np.float32))
    b = parameter(rng.normal(size=(4, 5)))
    (g,) = nd.backward(nd.total(nd.mul(a, b)), [b])
    np.testing.assert_array_equal(g, a.data)


def test_backward_rejects_non_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        nd.backward(nd.mul(x, 2.0), [x])


def test_unreached_parameter_gets_zero():
    x = parameter(np.ones(3))
    y = parameter(np.ones(2))
    grads = nd.backward(nd.total(nd.mul(x, x)), {"x": x, "y": y})
    np.testing.assert_array_equal(grads["y"], np.zeros(2))


def test_fanout_accumulates():
    x = parameter(np.array([2.0]))
    loss = nd.total(nd.add(nd.mul(x, 3.0), nd.mul(x, x)))
    (g,) = nd.backward(loss, [x])
    assert float(g[0]) == pytest.approx(3.0 + 4.0)


def test_topological_order():
    x = parameter(np.ones(2))
    y = nd.silu(x)
    z = nd.total(nd.mul(y, x))
    order = nd.topological_order(z)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with nd.no_grad():
        y = nd.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def _f64(rng, *shape):
    return parameter(rng.normal(size=shape).astype(np.float64))


def _case_conv_s1(r):
    x, k = _f64(r, 2, 5, 5, 3), _f64(r, 3, 3, 3, 2)
    return {"x": x, "k": k}, lambda: nd.conv2d(x, k, 1, 1)


def _case_conv_s2(r):
    x, k = _f64(r, 2, 6, 6, 2), _f64(r, 3, 3, 2, 3)
    return {"x": x, "k": k}, lambda: nd.conv2d(x, k, 2, 1)


def _case_conv_transpose(r):
    x, k = _f64(r, 2, 3, 3, 2), _f64(r, 2, 2, 2, 3)
    return {"x": x, "k": k}, lambda: nd.conv_transpose2x(x, k)


def _case_dense(r):
    x, w, b = _f64(r, 4, 5), _f64(r, 5, 3), _f64(r, 3)
    return {"x": x, "w": w, "b": b}, lambda: nd.dense(x, w, b)


def _case_mul(r):
    x, s = _f64(r, 2, 3, 3, 4), _f64(r, 2, 1, 1, 4)
    return {"x": x, "s": s}, lambda: nd.mul(x, s)


def _case_add(r):
    x, s = _f64(r, 2, 3, 3, 4), _f64(r, 4)
    return {"x": x, "s": s}, lambda: nd.add(x, s)


def _case_concat(r):
    x, y = _f64(r, 3, 3, 2), _f64(r, 3, 3, 3)
    return {"x": x, "y": y}, lambda: nd.concat([x, y], -1)


GRAD_CASES = {
    "conv2d_s1": _case_conv_s1,
    "conv2d_s2": _case_conv_s2,
    "conv_transpose2x": _case_conv_transpose,
    "dense": _case_dense,
    "mul_broadcast": _case_mul,
    "add_broadcast": _case_add,
    "concat": _case_concat,
}


@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_multi_input_op_gradients(case):
    rng = np.random.default_rng(7)
    params, f = GRAD_CASES[case](rng)
    proj = Tensor(rng.normal(size=f().shape))
    res = nd.check_gradients(lambda: nd.total(nd.mul(f(), proj)), params, n_samples=None)
    assert res.ok, res.failures


UNARY = {
    "sigmoid": nd.sigmoid,
    "silu": nd.silu,
    "softmax": nd.softmax,
    "upsample": lambda x: nd.upsample_nearest(x, 2),
    "resize": lambda x: nd.resize_nearest(x, 7, 5),
    "mean_axis": lambda x: nd.mean(x, axis=(1, 2)),
    "reshape": lambda x: nd.reshape(x, (-1,)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(3)
    x = _f64(rng, 2, 4, 3, 3)
    proj = Tensor(rng.normal(size=UNARY[name](x).shape))
    res = nd.check_gradients(lambda: nd.total(nd.mul(UNARY[name](x), proj)), {"x": x}, n_samples=None)
    assert res.ok, res.failures


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(4, 4))
    v = np.where(np.abs(v) < 0.1, 0.5, v)
    x = parameter(v)
    res = nd.check_gradients(lambda: nd.total(nd.mul(nd.relu(x), nd.relu(x))), {"x": x}, n_samples=None)
    assert res.ok


def test_loss_gradients():
    rng = np.random.default_rng(9)
    logits = _f64(rng, 2, 3, 3, 4)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    res = nd.check_gradients(lambda: nd.cross_entropy(logits, labels), {"l": logits}, n_samples=None)
    assert res.ok
    p, t = _f64(rng, 3, 4), _f64(rng, 3, 4)
    res = nd.check_gradients(lambda: nd.mse_loss(p, t), {"p": p, "t": t}, n_samples=None)
    assert res.ok


def test_cross_entropy_all_ignored_is_zero():
    logits = parameter(np.random.default_rng(0).normal(size=(3, 3, 4)))
    labels = np.full((3, 3), 255)
    loss = nd.cross_entropy(logits, labels)
    (g,) = nd.backward(loss, [logits])
    assert float(loss.data) == 0.0
    assert not np.any(g)


def test_cross_entropy_value():
    logits = Tensor(np.array([[0.0, math.log(3.0)]]))
    loss = nd.cross_entropy(logits, np.array([1]))
    assert float(loss.data) == pytest.approx(-math.log(0.75))


def test_two_layer_conv_net_finite_differences():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 6, 6, 2)))
    p = {
        "k1": _f64(rng, 3, 3, 2, 4),
        "b1": _f64(rng, 4),
        "k2": _f64(rng, 3, 3, 4, 2),
    }
    target = Tensor(rng.normal(size=(2, 3, 3, 2)))

    def loss():
        h = nd.silu(nd.add(nd.conv2d(x, p["k1"], 1, 1), p["b1"]))
        return nd.mse_loss(nd.conv2d(h, p["k2"], 2, 1), target)

    res = nd.check_gradients(loss, p, n_samples=20, h=1e-3)
    assert res.ok and res.checked == 20
    assert res.max_rel_error <= 1e-2


def test_backward_linearity():
    rng = np.random.default_rng(2)
    w = _f64(rng, 3, 3, 2, 2)
    x = Tensor(rng.normal(size=(5, 5, 2)))
    f = lambda: nd.total(nd.sigmoid(nd.conv2d(x, w, 1, 1)))
    g = lambda: nd.mse_loss(nd.conv2d(x, w), Tensor(np.zeros((3, 3, 2))))
    a, b = 0.7, -2.5
    (gf,), (gg,) = nd.backward(f(), [w]), nd.backward(g(), [w])
    (gc,) = nd.backward(nd.add(nd.mul(f(), a), nd.mul(g(), b)), [w])
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-10, atol=1e-12)


def test_accumulation_f32_close_to_f64():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 8, 8, 4)).astype(np.float32))
    k = Tensor(rng.normal(size=(3, 3, 4, 4)).astype(np.float32))
    ref = nd.conv2d(x, k, 1, 1).data
    with nd.accumulation(np.float32):
        fast = nd.conv2d(x, k, 1, 1).data
    assert fast.dtype == np.float32
    np.testing.assert_allclose(fast, ref, rtol=1e-4, atol=1e-5)


# ------------------------------------------------------------------ adam


def test_adam_zero_grad_leaves_params():
    p = {"w": np.array([1.0, -2.0], np.float32)}
    new, state = nd.adam_step(p, {"w": np.zeros(2, np.float32)}, None, lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_adam_first_step_closed_form(g):
    lr, eps = 0.01, 1e-8
    new, _ = nd.adam_step({"w": np.array([0.0])}, {"w": np.array([g])}, None, lr=lr, eps=eps)
    # bias-corrected moments equal g and g^2 exactly at step 1
    assert -new["w"][0] == pytest.approx(lr * g / (abs(g) + eps), rel=1e-12)
    assert abs(new["w"][0]) == pytest.approx(lr, rel=1e-4)


def test_adam_rejects_nan_with_name():
    with pytest.raises(FloatingPointError, match="enc.w"):
        nd.adam_step({"enc.w": np.zeros(2)}, {"enc.w": np.array([0.0, np.nan])}, None, lr=0.1)


def test_adam_deterministic():
    def run():
        rng = nd.Rng(3)
        p = {"w": rng.generator("init").normal(size=5).astype(np.float32)}
        st = None
        for i in range(10):
            g = {"w": rng.generator("g", i).normal(size=5).astype(np.float32)}
            p, st = nd.adam_step(p, g, st, lr=0.01)
        return p["w"]

    assert run().tobytes() == run().tobytes()


# ------------------------------------------------------------------ rng


def test_gaussian_moments():
    z = nd.gaussian(nd.Rng(1234), "eps", (100_000,)).data.astype(np.float64)
    assert abs(z.mean()) < 3 / math.sqrt(1e5)
    assert 0.97 <= z.var() <= 1.03


def test_gaussian_reproducible_and_independent_of_interleaving():
    a = nd.Rng(5)
    first = nd.gaussian(a, "s", (4, 4), index=3).data
    nd.gaussian(a, "other", (1000,))
    again = nd.gaussian(nd.Rng(5), "s", (4, 4), index=3).data
    assert first.tobytes() == again.tobytes()
    assert not np.array_equal(first, nd.gaussian(a, "s", (4, 4), index=4).data)


def test_stream_key_stable():
    # blake2b based, so the value must never change between processes
    assert nd.stream_key("eps") == nd.stream_key("eps")
    assert nd.stream_key(7) == 7


def test_gaussian_rejects_empty_shape():
    with pytest.raises(ValueError):
        nd.gaussian(nd.Rng(0), "s", ())


# ------------------------------------------------------------------ checkpoint


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"a.w": rng.normal(size=(3, 3, 2, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32), "s": np.array(2.5, np.float32)}
    path = tmp_path / "m.satw"
    nd.save_checkpoint(path, t, metadata={"mode": "eps"})
    back = nd.load_checkpoint(path)
    assert list(back) == list(t)
    for k in t:
        assert back[k].tobytes() == t[k].tobytes() and back[k].shape == t[k].shape
    assert nd.load_metadata(path) == {"mode": "eps"}
    raw = path.read_bytes()
    assert raw[:4] == b"SATW" and struct.unpack_from("<II", raw, 4) == (1, 3)
    # header + per tensor (2 + name + 1 + 4*rank + 4*size)
    expect = 12 + (2 + 3 + 1 + 16 + 4 * 72) + (2 + 1 + 1 + 4 + 20) + (2 + 1 + 1 + 0 + 4)
    assert len(raw) == expect


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.satw"
    path.write_bytes(b"XXXX" + b"\0" * 8)
    with pytest.raises(nd.CheckpointError, match="magic"):
        nd.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "t.satw"
    nd.save_checkpoint(path, {"w": np.ones((10, 10), np.float32)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(nd.CheckpointError, match="truncated"):
        nd.load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(1, 3))
def test_conv_output_size_law(h, w, k, stride):
    pad = 1
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    out = nd.conv2d(Tensor(np.ones((h, w, 1), np.float32)), Tensor(np.ones((k, k, 1, 1), np.float32)), stride, pad)
    assert out.shape == ((h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1, 1)
