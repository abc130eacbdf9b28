"""Numeric-core checks against independent oracles.

Each operation is compared with a brute-force implementation written
directly from its definition (nested loops, central finite differences,
scalar Adam), so the fast paths are never checked against themselves.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchad import engine as E
from patchad.errors import ConfigError, NumericError, ShapeError

# ---------------------------------------------------------------------------
# oracles


def conv2d_loops(x, k, b, stride, padding):
    """Six-nested-loop cross-correlation, float64."""
    x = np.asarray(x, np.float64)
    k = np.asarray(k, np.float64)
    b = np.asarray(b, np.float64)
    c_out, c_in, kh, kw = k.shape
    c, h, w = x.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[o, ci, u, v] * xp[ci, i * stride + u, j * stride + v]
                out[o, i, j] = acc + b[o]
    return out


def dense_loops(x, w, b):
    m, n = w.shape
    out = np.zeros(m)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += w[i, j] * x[j]
        out[i] = acc + b[i]
    return out


def mean_sq_loops(a, b):
    acc = 0.0
    for p, t in zip(np.ravel(a), np.ravel(b)):
        acc += (p - t) ** 2
    return acc / np.size(a)


def mean_abs_loops(a, b):
    acc = 0.0
    for p, t in zip(np.ravel(a), np.ravel(b)):
        acc += abs(p - t)
    return acc / np.size(a)


def finite_difference(fn, params, h=1e-4):
    """Central differences of a scalar-valued fn over a list of float64 arrays."""
    grads = []
    for arr in params:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn()
            flat[i] = orig - h
            lo = fn()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    x = E.Tensor(np.array([[[5.0]]]))
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1.0
    out = E.conv2d(x, E.Tensor(k), E.Tensor(np.zeros(1)), stride=1, padding=1)
    np.testing.assert_allclose(out.data, [[[5.0]]])


def test_conv2d_stride2_halves_64():
    x = E.Tensor(np.zeros((1, 64, 64), np.float32))
    k = E.Tensor(np.zeros((4, 1, 3, 3), np.float32))
    out = E.conv2d(x, k, E.Tensor(np.zeros(4)), stride=2, padding=1)
    assert out.shape == (4, 32, 32)


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = rng.standard_normal((1, 5, 5))
    k = rng.standard_normal((2, 1, 3, 3))
    b = rng.standard_normal(2)
    got = E.conv2d(E.Tensor(x), E.Tensor(k), E.Tensor(b), stride, padding)
    want = conv2d_loops(x, k, b, stride, padding)
    np.testing.assert_allclose(got.data, want, atol=1e-6)


def test_conv2d_loop_oracle_all_small_shapes():
    rng = np.random.default_rng(7)
    for c_in in (1, 2, 3):
        for h in (3, 5, 8):
            for stride in (1, 2):
                x = rng.standard_normal((c_in, h, h))
                k = rng.standard_normal((2, c_in, 3, 3))
                b = rng.standard_normal(2)
                got = E.conv2d(E.Tensor(x), E.Tensor(k), E.Tensor(b), stride, 1)
                want = conv2d_loops(x, k, b, stride, 1)
                np.testing.assert_allclose(got.data, want, atol=1e-6)


def test_conv2d_rejects_channel_mismatch():
    x = E.Tensor(np.zeros((3, 8, 8)))
    k = E.Tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(ShapeError, match="channels"):
        E.conv2d(x, k, E.Tensor(np.zeros(4)), 1, 1)


def test_conv2d_batched_equals_per_sample():
    rng = np.random.default_rng(3)
    xs = rng.standard_normal((4, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    batched = E.conv2d(E.Tensor(xs), E.Tensor(k), E.Tensor(b), 2, 1)
    for i in range(4):
        single = E.conv2d(E.Tensor(xs[i]), E.Tensor(k), E.Tensor(b), 2, 1)
        np.testing.assert_allclose(batched.data[i], single.data, rtol=1e-12)


# ---------------------------------------------------------------------------
# conv2d_transpose


def test_conv2d_transpose_identity_kernel():
    x = E.Tensor(np.array([[[3.0]]]))
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1.0
    out = E.conv2d_transpose(x, E.Tensor(k), E.Tensor(np.zeros(1)), stride=1, padding=1)
    np.testing.assert_allclose(out.data, [[[3.0]]])


def test_conv2d_transpose_doubles_4_to_8():
    x = E.Tensor(np.zeros((2, 4, 4), np.float32))
    k = E.Tensor(np.zeros((2, 1, 3, 3), np.float32))
    out = E.conv2d_transpose(x, k, E.Tensor(np.zeros(1)), stride=2, padding=1)
    assert out.shape == (1, 8, 8)


def test_conv2d_transpose_chain_4_to_64():
    x = E.Tensor(np.zeros((1, 4, 4), np.float32))
    k = E.Tensor(np.zeros((1, 1, 3, 3), np.float32))
    b = E.Tensor(np.zeros(1))
    for _ in range(4):
        x = E.conv2d_transpose(x, k, b, stride=2, padding=1)
    assert x.shape == (1, 64, 64)


@pytest.mark.parametrize("seed", range(100))
def test_adjoint_identity(seed):
    # <conv2d(x), y> == <x, conv2d_transpose(y)> with shared kernels, zero bias
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(2, 5)) * 2
    x = rng.standard_normal((c_in, h, h))
    k = rng.standard_normal((c_out, c_in, 3, 3))
    fwd = E.conv2d(E.Tensor(x), E.Tensor(k), E.Tensor(np.zeros(c_out)), stride, 1)
    y = rng.standard_normal(fwd.shape)
    adjust = h - ((fwd.shape[1] - 1) * stride - 2 + 3)
    back = E.conv2d_transpose(E.Tensor(y), E.Tensor(k), E.Tensor(np.zeros(c_in)),
                              stride, 1, output_adjust=adjust)
    assert back.shape == x.shape
    lhs = float(np.sum(fwd.data * y))
    rhs = float(np.sum(x * back.data))
    assert lhs == pytest.approx(rhs, abs=1e-5)


# ---------------------------------------------------------------------------
# elementwise and dense


def test_leaky_relu_values():
    x = E.Tensor(np.array([2.0, -1.0, 0.0]))
    out = E.leaky_relu(x, 0.01)
    np.testing.assert_allclose(out.data, [2.0, -0.01, 0.0])


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ConfigError):
        E.leaky_relu(E.Tensor(np.zeros(2)), 1.5)


@given(st.floats(-50, 50), st.floats(0.001, 0.999))
def test_leaky_relu_pointwise_definition(value, slope):
    out = E.leaky_relu(E.Tensor(np.array([value])), slope)
    assert out.data[0] == pytest.approx(max(value, slope * value), rel=1e-6)


def test_dense_identity_and_arithmetic():
    x = E.Tensor(np.array([2.0, 3.0]))
    ident = E.dense(x, E.Tensor(np.eye(2)), E.Tensor(np.zeros(2)))
    np.testing.assert_allclose(ident.data, [2.0, 3.0])
    summed = E.dense(x, E.Tensor(np.array([[1.0, 1.0]])), E.Tensor(np.zeros(1)))
    np.testing.assert_allclose(summed.data, [5.0])


@pytest.mark.parametrize("seed", range(10))
def test_dense_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    x = rng.standard_normal(n)
    w = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    got = E.dense(E.Tensor(x), E.Tensor(w), E.Tensor(b))
    np.testing.assert_allclose(got.data, dense_loops(x, w, b), atol=1e-6)


def test_dense_rejects_mismatch():
    with pytest.raises(ShapeError):
        E.dense(E.Tensor(np.zeros(3)), E.Tensor(np.zeros((2, 4))), E.Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# losses


def test_losses_trivial_values():
    a = E.Tensor(np.array([0.0, 0.0]))
    b = E.Tensor(np.array([1.0, 1.0]))
    assert E.mse_loss(a, b).item() == pytest.approx(1.0)
    assert E.mse_loss(b, b).item() == 0.0
    c = E.Tensor(np.array([0.0, 2.0]))
    d = E.Tensor(np.array([1.0, 1.0]))
    assert E.mae(c, d).item() == pytest.approx(1.0)
    assert E.mae(d, d).item() == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_losses_match_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    assert E.mse_loss(E.Tensor(a), E.Tensor(b)).item() == pytest.approx(mean_sq_loops(a, b), abs=1e-9)
    assert E.mae(E.Tensor(a), E.Tensor(b)).item() == pytest.approx(mean_abs_loops(a, b), abs=1e-9)


def test_losses_reject_shape_mismatch():
    with pytest.raises(ShapeError):
        E.mse_loss(E.Tensor(np.zeros(2)), E.Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        E.mae(E.Tensor(np.zeros(2)), E.Tensor(np.zeros(3)))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=16))
def test_losses_nonnegative_zero_iff_identical(values):
    a = E.Tensor(np.array(values))
    shifted = E.Tensor(np.array(values) + 1.0)
    assert E.mse_loss(a, a).item() == 0.0
    assert E.mae(a, a).item() == 0.0
    assert E.mse_loss(a, shifted).item() > 0.0
    assert E.mae(a, shifted).item() > 0.0


# ---------------------------------------------------------------------------
# gradients vs finite differences


def test_gradient_of_quadratic_scalar():
    x = E.Tensor(np.array([3.0]), requires_grad=True)
    loss = E.mse_loss(x, E.Tensor(np.array([0.0])))
    grad = E.gradients(loss, [x])[x]
    np.testing.assert_allclose(grad.data, [6.0])


def test_gradient_of_leaky_relu_negative_side():
    x = E.Tensor(np.array([-2.0]), requires_grad=True)
    out = E.leaky_relu(x, 0.01)
    loss = E.mse_loss(out, E.Tensor(np.zeros(1)))
    # d/dx of (0.01 x)^2 / 1 at x=-2 is 2*0.01^2*(-2); isolate the relu slope
    grad = E.gradients(loss, [x])[x]
    assert grad.data[0] == pytest.approx(2 * (-2.0) * 0.01 * 0.01)


def _relative_error(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return np.max(np.abs(a - b) / denom)


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_net_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((2, 6, 6))
    target = rng.standard_normal(4)
    k = rng.standard_normal((3, 2, 3, 3)) * 0.5
    kb = rng.standard_normal(3) * 0.1
    w = rng.standard_normal((4, 3 * 3 * 3)) * 0.5
    wb = rng.standard_normal(4) * 0.1
    arrays = [k, kb, w, wb]

    def run():
        tk, tkb, tw, twb = (E.Tensor(a, requires_grad=True) for a in arrays)
        h = E.conv2d(E.Tensor(x), tk, tkb, stride=2, padding=1)
        h = E.leaky_relu(h, 0.01)
        h = E.reshape(h, (3 * 3 * 3,))
        out = E.dense(h, tw, twb)
        loss = E.mse_loss(out, E.Tensor(target))
        return loss, [tk, tkb, tw, twb]

    loss, params = run()
    analytic = E.gradients(loss, params)
    numeric = finite_difference(lambda: run()[0].item(), arrays)
    for p, num in zip(params, numeric):
        assert _relative_error(analytic[p].data, num) <= 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_conv_transpose_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.standard_normal((2, 3, 3))
    k = rng.standard_normal((2, 1, 3, 3)) * 0.5
    b = rng.standard_normal(1) * 0.1
    target = rng.standard_normal((1, 6, 6))
    arrays = [k, b]

    def run():
        tk, tb = (E.Tensor(a, requires_grad=True) for a in arrays)
        out = E.conv2d_transpose(E.Tensor(x), tk, tb, stride=2, padding=1)
        return E.mse_loss(out, E.Tensor(target)), [tk, tb]

    loss, params = run()
    analytic = E.gradients(loss, params)
    numeric = finite_difference(lambda: run()[0].item(), arrays)
    for p, num in zip(params, numeric):
        assert _relative_error(analytic[p].data, num) <= 1e-3


def test_unreachable_parameter_gets_zero_gradient(caplog):
    x = E.Tensor(np.array([1.0]), requires_grad=True)
    orphan = E.Tensor(np.array([5.0]), requires_grad=True, name="orphan")
    loss = E.mse_loss(x, E.Tensor(np.zeros(1)))
    with caplog.at_level("WARNING"):
        grads = E.gradients(loss, [x, orphan])
    np.testing.assert_allclose(grads[orphan].data, [0.0])
    assert any("unreachable" in rec.message for rec in caplog.records)


def test_gradients_requires_scalar_loss():
    x = E.Tensor(np.zeros(3), requires_grad=True)
    out = E.leaky_relu(x)
    with pytest.raises(ShapeError):
        E.gradients(out, [x])


def test_no_grad_skips_graph_recording():
    x = E.Tensor(np.ones(3), requires_grad=True)
    with E.no_grad():
        out = E.leaky_relu(x)
    assert out._backward is None and not out.requires_grad


def test_forward_and_backward_stay_finite():
    rng = np.random.default_rng(0)
    x = E.Tensor(rng.standard_normal((1, 8, 8)).astype(np.float32))
    k = E.Tensor(rng.standard_normal((2, 1, 3, 3)).astype(np.float32), requires_grad=True)
    b = E.Tensor(np.zeros(2, np.float32), requires_grad=True)
    out = E.leaky_relu(E.conv2d(x, k, b, 2, 1))
    loss = E.mse_loss(out, E.Tensor(np.zeros(out.shape, np.float32)))
    grads = E.gradients(loss, [k, b])
    assert np.isfinite(out.data).all()
    assert all(np.isfinite(g.data).all() for g in grads.values())


# ---------------------------------------------------------------------------
# Adam


def adam_scalar_reference(p, g, m, v, t, lr, b1, b2, eps):
    """Textbook scalar Adam update."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** (t + 1))
    v_hat = v / (1 - b2 ** (t + 1))
    return p - lr * m_hat / (v_hat ** 0.5 + eps), m, v


def test_adam_zero_gradient_keeps_parameter():
    p = E.Tensor(np.array([1.0, -2.0]))
    state = E.AdamState.initial(p)
    new_p, new_state = E.adam_step(p, E.Tensor(np.zeros(2)), state)
    np.testing.assert_allclose(new_p.data, p.data)
    assert new_state.step == 1


def test_adam_first_step_matches_scalar_reference():
    p0, g0 = 0.7, -0.3
    p = E.Tensor(np.array([p0]))
    state = E.AdamState.initial(p, learning_rate=0.001)
    new_p, _ = E.adam_step(p, E.Tensor(np.array([g0])), state)
    want, _, _ = adam_scalar_reference(p0, g0, 0.0, 0.0, 0, 0.001, 0.9, 0.999, 1e-8)
    assert new_p.data[0] == pytest.approx(want, rel=1e-6)
    # first step moves by roughly lr * sign(g)
    assert new_p.data[0] - p0 == pytest.approx(0.001, rel=1e-3)


def test_adam_sequence_matches_scalar_reference():
    rng = np.random.default_rng(5)
    p = E.Tensor(np.array([0.2]))
    state = E.AdamState.initial(p, learning_rate=0.01)
    ref_p, ref_m, ref_v = 0.2, 0.0, 0.0
    for t in range(20):
        g = float(rng.standard_normal())
        p, state = E.adam_step(p, E.Tensor(np.array([g])), state)
        ref_p, ref_m, ref_v = adam_scalar_reference(ref_p, g, ref_m, ref_v, t, 0.01, 0.9, 0.999, 1e-8)
        assert p.data[0] == pytest.approx(ref_p, rel=1e-9)
    assert state.step == 20


def test_adam_default_learning_rate_is_1e_3():
    state = E.AdamState.initial(E.Tensor(np.zeros(1)))
    assert state.learning_rate == 0.001


def test_adam_is_deterministic():
    p = E.Tensor(np.linspace(-1, 1, 7, dtype=np.float32))
    g = E.Tensor(np.linspace(1, -1, 7, dtype=np.float32))
    state = E.AdamState.initial(p, learning_rate=0.05)
    a1, s1 = E.adam_step(p, g, state)
    a2, s2 = E.adam_step(p, g, state)
    assert a1.data.tobytes() == a2.data.tobytes()
    assert s1.first_moment.tobytes() == s2.first_moment.tobytes()


def test_adam_rejects_non_finite_gradient():
    p = E.Tensor(np.zeros(2))
    state = E.AdamState.initial(p)
    with pytest.raises(NumericError):
        E.adam_step(p, E.Tensor(np.array([1.0, np.nan])), state)


def test_adam_rejects_shape_mismatch():
    p = E.Tensor(np.zeros(2))
    state = E.AdamState.initial(p)
    with pytest.raises(ShapeError):
        E.adam_step(p, E.Tensor(np.zeros(3)), state)
