import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitcap import tensor as T
from bitcap.tensor import ShapeError, Tensor, backward, forward_op, no_grad

from oracles import finite_diff_grad, rel_error

RNG = np.random.default_rng(7)


def randt(*shape, lo=-2.0, hi=2.0):
    return Tensor(RNG.uniform(lo, hi, size=shape), requires_grad=True)


def check_grad(fn, *tensors, h=1e-4, tol=1e-3):
    """Analytic grads of sum(fn(xs)) vs central differences, per input."""
    loss = fn(*tensors).sum()
    backward(loss)
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue

        def scalar(x, i=i):
            args = [Tensor(u.data) for u in tensors]
            args[i] = Tensor(x)
            return float(fn(*args).sum().data)

        fd = finite_diff_grad(scalar, t.data.copy(), h=h)
        assert t.grad is not None
        err = rel_error(t.grad, fd)
        assert err <= tol, f"input {i}: rel err {err}"


# ---------------------------------------------------------------------------
# forward contracts


def test_softmax_uniform_on_equal_row():
    row = Tensor(np.full((1, 5), 3.7))
    out = T.softmax(row).data
    assert np.allclose(out, 0.2)


def test_softmax_rows_sum_to_one():
    x = randt(8, 11)
    out = T.softmax(x).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_overflow_safe():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0]]))
    out = T.softmax(x).data
    assert np.all(np.isfinite(out))
    assert np.allclose(out.sum(), 1.0)


def test_layernorm_zero_mean_unit_variance():
    x = randt(4, 9)
    out = T.layer_norm(x).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-7)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_matmul_shape_rule():
    out = T.matmul(randt(2, 3), randt(3, 4))
    assert out.shape == (2, 4)
    with pytest.raises(ShapeError):
        T.matmul(randt(2, 3), randt(4, 4))


def test_forward_op_dispatch():
    x = randt(3, 3)
    assert np.array_equal(forward_op("exp", [x]).data, np.exp(x.data))
    with pytest.raises(KeyError):
        forward_op("conv2d", [x])


def test_forward_finite_on_finite_inputs():
    x = randt(6, 6)
    for name in ["exp", "tanh", "gelu", "softmax", "log_softmax", "layer_norm"]:
        out = forward_op(name, [x])
        assert np.all(np.isfinite(out.data)), name


# ---------------------------------------------------------------------------
# backward contracts


def test_sum_gradient_is_ones():
    x = randt(3, 4)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient_is_2x():
    x = randt(3, 4)
    backward((x * x).sum())
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_rejects_nonscalar():
    x = randt(3, 3)
    with pytest.raises(ShapeError):
        backward(x + x)


def test_backward_accumulates_over_reuse():
    x = randt(4)
    backward((x + x).sum())
    assert np.allclose(x.grad, 2.0)


def test_no_grad_builds_no_tape():
    x = randt(3)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    with pytest.raises(ShapeError):
        # y is a detached scalar; backward on a fresh graph over x still works
        backward(x * x)


def test_detach_blocks_gradient():
    x = randt(3)
    y = (x.detach() * 3.0 + x).sum()
    backward(y)
    assert np.allclose(x.grad, 1.0)


# per-op finite-difference checks ------------------------------------------


def test_grad_add_broadcast():
    check_grad(lambda a, b: a + b, randt(3, 4), randt(4))


def test_grad_sub():
    check_grad(lambda a, b: a - b, randt(2, 5), randt(2, 5))


def test_grad_mul_broadcast():
    check_grad(lambda a, b: a * b, randt(3, 1, 4), randt(2, 4))


def test_grad_div():
    check_grad(lambda a, b: a / b, randt(3, 3), randt(3, 3, lo=0.5, hi=2.0))


def test_grad_pow():
    check_grad(lambda a: a**3.0, randt(4, 4))


def test_grad_matmul():
    check_grad(T.matmul, randt(3, 4), randt(4, 5))


def test_grad_matmul_batched():
    check_grad(T.matmul, randt(2, 3, 4), randt(4, 5))
    check_grad(T.matmul, randt(2, 2, 3, 4), randt(2, 2, 4, 3))


def test_grad_exp_log_sqrt_tanh_gelu():
    check_grad(T.exp, randt(3, 3))
    check_grad(T.log, randt(3, 3, lo=0.2, hi=3.0))
    check_grad(T.sqrt, randt(3, 3, lo=0.2, hi=3.0))
    check_grad(T.tanh, randt(3, 3))
    check_grad(T.gelu, randt(3, 3))


def test_grad_softmax_logsoftmax_layernorm():
    # weighted sums so the reduction is not symmetric
    w = Tensor(RNG.normal(size=(4, 6)))
    check_grad(lambda x: T.softmax(x) * w, randt(4, 6))
    check_grad(lambda x: T.log_softmax(x) * w, randt(4, 6))
    check_grad(lambda x: T.layer_norm(x) * w, randt(4, 6))


def test_grad_embedding():
    idx = np.array([[0, 2, 2], [1, 0, 3]])
    check_grad(lambda t: T.embedding(t, idx), randt(4, 5))


def test_grad_gather():
    idx = RNG.integers(0, 5, size=(3, 1, 6))
    w = Tensor(RNG.normal(size=(3, 1, 6)))
    check_grad(lambda x: T.gather(x, idx, axis=1) * w, randt(3, 5, 6))


def test_grad_concat_narrow_reshape_transpose():
    check_grad(lambda a, b: T.concat([a, b], axis=1), randt(2, 3), randt(2, 2))
    check_grad(lambda x: T.narrow(x, 1, 1, 2), randt(3, 4))
    check_grad(lambda x: T.reshape(x, (6, 2)), randt(3, 4))
    check_grad(lambda x: T.transpose(x, (1, 0, 2)), randt(2, 3, 4))


def test_grad_reductions():
    w = Tensor(RNG.normal(size=(3, 1, 5)))
    check_grad(lambda x: T.reduce_sum(x, axis=1, keepdims=True) * w, randt(3, 4, 5))
    check_grad(lambda x: T.reduce_mean(x, axis=(0, 2)), randt(3, 4, 5))
    check_grad(lambda x: x.mean(), randt(7,))


def test_grad_dropout_mask_is_consistent():
    x = randt(50, 50)
    rng = np.random.default_rng(0)
    out = T.dropout(x, 0.3, rng)
    backward(out.sum())
    mask = out.data != 0
    assert np.allclose(x.grad[mask], 1.0 / 0.7)
    assert np.allclose(x.grad[~mask], 0.0)


def test_three_layer_mlp_matches_finite_differences():
    dims = [5, 7, 6, 1]
    ws = [randt(dims[i], dims[i + 1]) for i in range(3)]
    bs = [randt(dims[i + 1]) for i in range(3)]
    x = Tensor(RNG.normal(size=(4, 5)))

    def mlp(*params):
        w1, w2, w3, b1, b2, b3 = params
        h = T.tanh(x @ w1 + b1)
        h = T.gelu(h @ w2 + b2)
        return h @ w3 + b3

    check_grad(mlp, *ws, *bs)


# determinism ---------------------------------------------------------------


def test_forward_determinism():
    x = np.linspace(-1, 1, 24).reshape(4, 6)
    a = T.softmax(T.gelu(Tensor(x))).data
    b = T.softmax(T.gelu(Tensor(x))).data
    assert np.array_equal(a, b)


# hypothesis property: softmax simplex invariant ----------------------------


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=2, max_value=9),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_softmax_simplex_property(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(rows, cols))
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)
