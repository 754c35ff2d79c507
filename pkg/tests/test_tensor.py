import struct

import numpy as np
import pytest

from a2mc import tensor as tc
from a2mc.errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    FormatError,
    NumericError,
    ShapeMismatchError,
)
from a2mc.rng import RngStream
from a2mc.tensor import Tape, Tensor, backward, grad_check


def rand(stream, *shape):
    return stream.normal(size=shape)


# ---------------------------------------------------------------------------
# forward contracts


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = tc.matmul(Tensor(a), Tensor(np.eye(2)))
    assert np.allclose(out.numpy(), a)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeMismatchError) as e:
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(e.value)


def test_concat_shape_arithmetic():
    out = tc.concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((5, 3)))], axis=0)
    assert out.shape == (7, 3)


def test_tanh_odd_and_dot_unit():
    assert tc.tanh(Tensor(np.zeros(4))).numpy().max() == 0.0
    u = np.array([0.6, 0.8])
    assert abs(tc.dot(Tensor(u), Tensor(u)).item() - 1.0) < 1e-12


def test_log_domain_error():
    with pytest.raises(NumericError):
        tc.log(Tensor(np.array([1.0, -0.5])))


def test_nonfinite_result_raises():
    with pytest.raises(NumericError):
        tc.exp(Tensor(np.array([1e6])))


def test_softmax_symmetry_and_direct_value():
    p = tc.softmax_t(Tensor(np.array([2.5, 2.5, 2.5])), 0.3).numpy()
    assert np.allclose(p, [1 / 3] * 3)
    # softmax([1,0], tau=1) = [e, 1] / (e+1)
    q = tc.softmax_t(Tensor(np.array([1.0, 0.0])), 1.0).numpy()
    e = np.exp(1.0)
    assert np.allclose(q, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    assert abs(q.sum() - 1.0) < 1e-9
    assert np.all(q > 0) and np.all(q < 1)


def test_softmax_lower_tau_sharpens():
    v = np.array([0.9, 0.1, -0.4])
    sharp = tc.softmax_t(Tensor(v), 0.07).numpy()
    soft = tc.softmax_t(Tensor(v), 1.0).numpy()
    assert sharp.max() >= soft.max()


def test_softmax_tau_must_be_positive():
    with pytest.raises(ConfigError):
        tc.softmax_t(Tensor(np.array([1.0, 2.0])), 0.0)


def test_l2_normalize_345_and_idempotent():
    out = tc.l2_normalize(Tensor(np.array([3.0, 4.0]))).numpy()
    assert np.allclose(out, [0.6, 0.8], atol=1e-12)
    again = tc.l2_normalize(Tensor(out)).numpy()
    assert np.allclose(again, out, atol=1e-9)


def test_l2_normalize_degenerate():
    with pytest.raises(DegenerateInputError):
        tc.l2_normalize(Tensor(np.zeros(3)))
    with pytest.raises(DegenerateInputError):
        tc.l2_normalize(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])), axis=1)


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones(3))
    b = t2.leaf(np.ones(3))
    with pytest.raises(ContractError):
        tc.add(a, b)


# ---------------------------------------------------------------------------
# backward contracts


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(np.arange(6, dtype=np.float64).reshape(2, 3))
    g = backward(tc.tsum(x))[x]
    assert np.array_equal(g, np.ones((2, 3)))


def test_unreachable_leaf_zero_grad():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = tape.leaf(np.ones(3))
    g = backward(tc.tsum(y))
    assert np.array_equal(g[x], np.zeros(3))


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        backward(tc.mul(x, x))


def test_backward_requires_tape():
    with pytest.raises(ContractError):
        backward(tc.tsum(Tensor(np.ones(3))))


def test_grad_accumulates_over_multiple_uses():
    tape = Tape()
    x = tape.leaf(np.array([2.0]))
    y = tc.add(tc.mul(x, x), tc.scale(x, 3.0))  # x^2 + 3x
    g = backward(tc.tsum(y))[x]
    assert np.allclose(g, [7.0])


# ---------------------------------------------------------------------------
# finite-difference oracle per op (20 random instances each)

_STREAM = RngStream.from_name(20240601, "gradcheck")


def _scalarize(op, weights):
    return lambda x: tc.tsum(tc.mul(op(x), Tensor(weights)))


@pytest.mark.parametrize(
    "name,op,domain",
    [
        ("add", lambda x, c: tc.add(x, c), "any"),
        ("sub", lambda x, c: tc.sub(x, c), "any"),
        ("mul", lambda x, c: tc.mul(x, c), "any"),
        ("div", lambda x, c: tc.div(x, c), "any"),
        ("exp", lambda x, c: tc.exp(x), "any"),
        ("log", lambda x, c: tc.log(x), "pos"),
        ("sqrt", lambda x, c: tc.sqrt(x), "pos"),
        ("tanh", lambda x, c: tc.tanh(x), "any"),
        ("sigmoid", lambda x, c: tc.sigmoid(x), "any"),
        ("relu", lambda x, c: tc.relu(x), "offzero"),
        ("scale", lambda x, c: tc.scale(x, -1.7), "any"),
        ("neg", lambda x, c: tc.neg(x), "any"),
    ],
)
def test_gradcheck_elementwise_ops(name, op, domain):
    worst = 0.0
    for i in range(20):
        s = _STREAM.split(f"{name}{i}")
        shape = (int(s.integers(1, 5)), int(s.integers(1, 5)))
        x = s.normal(size=shape)
        if domain == "pos":
            x = np.abs(x) + 0.5
        elif domain == "offzero":
            x = np.where(np.abs(x) < 0.1, x + 0.3, x)
        c = Tensor(s.normal(size=shape))
        w = s.normal(size=shape)
        worst = max(worst, grad_check(_scalarize(lambda t: op(t, c), w), x))
    assert worst < 1e-4, worst


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, True), (1, False)])
def test_gradcheck_reductions(axis, keepdims):
    for i in range(20):
        s = _STREAM.split(f"red{axis}{keepdims}{i}")
        x = s.normal(size=(3, 4))
        for op in (tc.tsum, tc.mean):
            def f(t):
                r = op(t, axis=axis, keepdims=keepdims)
                w = Tensor(np.ones_like(r.numpy()) * 0.7)
                return tc.tsum(tc.mul(r, w))

            assert grad_check(f, x) < 1e-4


def test_gradcheck_matmul_transpose_reshape_concat_slice():
    for i in range(20):
        s = _STREAM.split(f"lin{i}")
        x = s.normal(size=(3, 4))
        b = Tensor(s.normal(size=(4, 2)))
        w = s.normal(size=(3, 2))

        def f(t):
            y = tc.matmul(t, b)
            return tc.tsum(tc.mul(y, Tensor(w)))

        assert grad_check(f, x) < 1e-4

        def g(t):
            y = tc.transpose(tc.reshape(t, (4, 3)))
            z = tc.concat([y, tc.scale(y, 0.5)], axis=1)
            z = tc.slice_axis(z, 1, 1, 5)
            return tc.tsum(tc.mul(z, Tensor(np.ones((3, 4)) * 0.3)))

        assert grad_check(g, x) < 1e-4


def test_gradcheck_add_is_exact():
    # d(a+b)/da = ones; central differences agree to near machine precision
    for i in range(5):
        s = _STREAM.split(f"addexact{i}")
        x = s.normal(size=(3, 3))
        c = Tensor(s.normal(size=(3, 3)))
        assert grad_check(_scalarize(lambda t: tc.add(t, c), np.ones((3, 3))), x) < 1e-6


def test_gradcheck_exp_tight():
    for i in range(20):
        s = _STREAM.split(f"exptight{i}")
        x = s.normal(size=(4,))
        assert grad_check(_scalarize(tc.exp, np.ones(4)), x) < 1e-6


def test_gradcheck_dot_l2norm_normalize_softmax():
    for i in range(20):
        s = _STREAM.split(f"vec{i}")
        x = s.normal(size=(5,)) + 0.1
        v = Tensor(s.normal(size=(5,)))
        assert grad_check(lambda t: tc.dot(t, v), x) < 1e-4
        assert grad_check(lambda t: tc.l2_norm(t), x) < 1e-4
        w = s.normal(size=(5,))
        assert grad_check(_scalarize(tc.l2_normalize, w), x) < 1e-5
        assert grad_check(_scalarize(lambda t: tc.softmax_t(t, 0.7), w), x) < 1e-4
        assert grad_check(_scalarize(lambda t: tc.log_softmax_t(t, 0.7), w), x) < 1e-4


def test_gradcheck_quadratic_is_tight():
    # f = 0.5 * ||x||^2 has analytic grad x
    x = _STREAM.split("quad").normal(size=(6,))
    err = grad_check(lambda t: tc.scale(tc.tsum(tc.mul(t, t)), 0.5), x)
    assert err < 1e-8


def test_gradcheck_detects_wrong_backward_rule():
    # fault injection: a custom op whose backward rule is off by 2x
    def bad_square(t):
        out = t.data * t.data

        def bwd(g):
            return (g * t.data,)  # should be 2 * t.data * g

        return tc._record(out, (t,), bwd, "bad_square")

    x = _STREAM.split("fault").normal(size=(4,)) + 1.0
    err = grad_check(lambda t: tc.tsum(bad_square(t)), x)
    assert err > 1e-2


def test_determinism_bit_identical():
    s = _STREAM.split("det")
    x = s.normal(size=(8, 8))
    w = s.normal(size=(8, 8))

    def run():
        tape = Tape()
        xl = tape.leaf(x)
        y = tc.tsum(tc.softmax_t(tc.matmul(xl, Tensor(w)), 0.07, axis=1))
        return backward(y)[xl]

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# serialization


def test_tensor_roundtrip_bit_exact(tmp_path):
    for dtype in (np.float32, np.float64):
        arr = _STREAM.split(f"ser{dtype}").normal(size=(3, 5, 2)).astype(dtype)
        p = tmp_path / f"t_{np.dtype(dtype).name}.bin"
        tc.save_tensor(arr, p)
        back = tc.load_tensor(p)
        assert back.dtype == arr.dtype
        assert back.tobytes() == arr.tobytes()


def test_tensor_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(FormatError) as e:
        tc.load_tensor(p)
    assert "offset 0" in str(e.value)


def test_tensor_truncation(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    blob = tc.tensor_to_bytes(arr)
    p = tmp_path / "trunc.bin"
    p.write_bytes(blob[:-10])
    with pytest.raises(FormatError) as e:
        tc.load_tensor(p)
    assert "truncated" in str(e.value)


def test_tensor_unsupported_version(tmp_path):
    arr = np.ones((2,), dtype=np.float32)
    blob = bytearray(tc.tensor_to_bytes(arr))
    blob[8:12] = struct.pack("<I", 99)
    p = tmp_path / "ver.bin"
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as e:
        tc.load_tensor(p)
    assert "version" in str(e.value)
