import numpy as np
import pytest

from a2mc import tensor as tc
from a2mc.data import SkeletonSequence
from a2mc.encoder import (
    PARAM_NAMES,
    AttackHead,
    EncoderDims,
    EncoderState,
    class_feature,
    encode,
    encode_batch,
    init_attack_head,
    init_encoder_params,
    load_checkpoint,
    make_param_leaves,
    momentum_update,
    save_checkpoint,
    sequence_to_input,
)
from a2mc.errors import ConfigError, FormatError
from a2mc.rng import RngStream
from a2mc.tensor import Tape, Tensor, backward, grad_check

TINY = EncoderDims(input_dim=6, embed_dim=4, hidden_dim=4, proj_hidden=5, feature_dim=5)


def tiny_params(seed=1, dtype=np.float32):
    p = init_encoder_params(TINY, RngStream.from_name(seed, "enc"))
    if dtype != np.float32:
        p = type(p)(p.dims, {k: v.astype(dtype) for k, v in p.arrays.items()})
    return p


def tiny_seq(seed=2, t=5):
    frames = RngStream.from_name(seed, "seq").normal(size=(t, 2, 3)).astype(np.float32)
    return SkeletonSequence(frames)


def test_encode_unit_norm_and_determinism():
    params = tiny_params()
    seq = tiny_seq()
    f1 = encode(params, seq).numpy()
    f2 = encode(params, seq).numpy()
    assert abs(np.linalg.norm(f1) - 1.0) < 1e-6
    assert np.array_equal(f1, f2)


def test_encode_batch_norms():
    params = tiny_params()
    frames = RngStream.from_name(3, "b").normal(size=(4, 5, 6)).astype(np.float32)
    out = encode_batch(params, frames).numpy()
    assert out.shape == (4, 5)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)


def test_encode_shape_error():
    params = tiny_params()
    with pytest.raises(ConfigError):
        encode_batch(params, np.zeros((2, 5, 9), dtype=np.float32))


def test_encode_input_gradient_matches_fd():
    params = tiny_params(dtype=np.float64)
    x0 = RngStream.from_name(4, "x").normal(size=(1, 4, 6))
    w = RngStream.from_name(4, "w").normal(size=(1, 5))

    def f(t):
        return tc.tsum(tc.mul(encode_batch(params, t), Tensor(w)))

    assert grad_check(f, x0) < 1e-4


@pytest.mark.parametrize("pname", ["embed.W", "gru.Un", "gru.bz", "proj.W2", "proj.b1"])
def test_encode_param_gradients_match_fd(pname):
    params = tiny_params(dtype=np.float64)
    x0 = RngStream.from_name(5, "x").normal(size=(2, 3, 6))
    w = RngStream.from_name(5, "w").normal(size=(2, 5))
    base = {k: Tensor(v) for k, v in params.arrays.items()}

    def f(t):
        leaves = dict(base)
        leaves[pname] = t
        return tc.tsum(tc.mul(encode_batch(params, Tensor(x0), leaves=leaves), Tensor(w)))

    assert grad_check(f, params.arrays[pname]) < 1e-4


def test_class_feature_contracts():
    params = tiny_params()
    head = init_attack_head(TINY, 4, RngStream.from_name(6, "h"))
    fa = class_feature(params, head, tiny_seq()).numpy()
    assert fa.shape == (4,)
    assert abs(fa.sum() - 1.0) < 1e-6
    assert np.all(fa > 0)
    ent = -(fa * np.log(fa)).sum()
    assert ent <= np.log(4) + 1e-9


def test_zero_head_gives_uniform():
    params = tiny_params()
    head = AttackHead(np.zeros((5, 4), dtype=np.float32), np.zeros(4, dtype=np.float32))
    fa = class_feature(params, head, tiny_seq()).numpy()
    assert np.allclose(fa, 0.25, atol=1e-7)


def test_momentum_update_exact_and_boundaries():
    k = tiny_params(seed=10, dtype=np.float64)
    q = tiny_params(seed=11, dtype=np.float64)
    alpha = 0.999
    out = momentum_update(k, q, alpha)
    for name in PARAM_NAMES:
        oracle = alpha * k.arrays[name] + (1.0 - alpha) * q.arrays[name]
        assert np.max(np.abs(out.arrays[name] - oracle)) < 1e-12

    same = momentum_update(k, k, 0.42)
    for name in PARAM_NAMES:
        assert np.allclose(same.arrays[name], k.arrays[name], atol=1e-15)

    replaced = momentum_update(k, q, 0.0)
    for name in PARAM_NAMES:
        assert np.array_equal(replaced.arrays[name], q.arrays[name])


def test_momentum_update_paper_scalar():
    k = tiny_params(seed=1, dtype=np.float64)
    q = tiny_params(seed=2, dtype=np.float64)
    for name in PARAM_NAMES:
        k.arrays[name][:] = 1.0
        q.arrays[name][:] = 0.0
    out = momentum_update(k, q, 0.999)
    assert np.allclose(out.arrays["embed.W"], 0.999, atol=1e-15)


def test_init_determinism_and_spread():
    a = init_encoder_params(TINY, RngStream.from_name(9, "i"))
    b = init_encoder_params(TINY, RngStream.from_name(9, "i"))
    c = init_encoder_params(TINY, RngStream.from_name(10, "i"))
    assert a.state_bytes() == b.state_bytes()
    assert a.state_bytes() != c.state_bytes()


def test_init_fan_in_scale():
    dims = EncoderDims(input_dim=30, embed_dim=64, hidden_dim=64, proj_hidden=128, feature_dim=128)
    p = init_encoder_params(dims, RngStream.from_name(12, "i"))
    for name in ("embed.W", "gru.Wz", "proj.W1", "proj.W2"):
        fan_in = p.arrays[name].shape[0]
        expected = 1.0 / np.sqrt(3.0 * fan_in)
        measured = p.arrays[name].std()
        assert expected / 2 < measured < expected * 2, name


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    dims = TINY
    state = EncoderState(
        dims,
        tiny_params(seed=20),
        tiny_params(seed=21),
        init_attack_head(dims, 3, RngStream.from_name(22, "h")),
    )
    extra = {"pnm.M0": RngStream.from_name(23, "m").normal(size=(4, 5)).astype(np.float32)}
    meta = {"epoch": 7, "config": {"lr": 0.01}, "encoder_dims": dims.__dict__}
    p = tmp_path / "ck.bin"
    save_checkpoint(p, state, extra, meta)
    state2, extra2, meta2 = load_checkpoint(p)
    assert meta2 == meta
    assert state2.query.state_bytes() == state.query.state_bytes()
    assert state2.key.state_bytes() == state.key.state_bytes()
    assert state2.head.W.tobytes() == state.head.W.tobytes()
    assert extra2["pnm.M0"].tobytes() == extra["pnm.M0"].tobytes()
    assert state2.dims == dims


def test_checkpoint_truncation(tmp_path):
    state = EncoderState(TINY, tiny_params(), tiny_params(seed=2),
                         init_attack_head(TINY, 3, RngStream.from_name(1, "h")))
    p = tmp_path / "ck.bin"
    save_checkpoint(p, state)
    blob = p.read_bytes()
    q = tmp_path / "cut.bin"
    q.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(q)


def test_key_encoder_gets_no_gradient_through_shared_tape():
    # encoding with constant params records no leaves for them
    params = tiny_params()
    tape = Tape()
    leaves = make_param_leaves(params, tape)
    x = RngStream.from_name(30, "x").normal(size=(2, 4, 6)).astype(np.float32)
    fq = encode_batch(params, x, tape, leaves)          # query: trainable
    fk = encode_batch(params, x).numpy()                # key: pure value
    loss = tc.tsum(tc.mul(fq, Tensor(fk.astype(np.float32))))
    grads = backward(loss)
    assert any(np.abs(grads[leaves[n]]).max() > 0 for n in PARAM_NAMES)
