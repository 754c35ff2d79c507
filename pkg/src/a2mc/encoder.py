"""Query/key encoders, the frozen attack head, and checkpoint persistence.

The encoder is the smallest differentiable temporal model that supports
input-gradient attacks: a per-frame linear embedding, one gated recurrent
layer over time, temporal mean pooling, and a two-layer projection head whose
output is L2-normalized. The key encoder is a momentum copy of the query
encoder and never receives backpropagated gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .data import SkeletonSequence
from .errors import ConfigError, ContractError, FormatError
from .rng import RngStream
from .tensor import Tape, Tensor

PARAM_NAMES = (
    "embed.W", "embed.b",
    "gru.Wz", "gru.Uz", "gru.bz",
    "gru.Wr", "gru.Ur", "gru.br",
    "gru.Wn", "gru.Un", "gru.bn",
    "proj.W1", "proj.b1", "proj.W2", "proj.b2",
)


@dataclass(frozen=True)
class EncoderDims:
    input_dim: int = 30  # joints * 3
    embed_dim: int = 64
    hidden_dim: int = 64
    proj_hidden: int = 128
    feature_dim: int = 128

    def __post_init__(self):
        for name in ("input_dim", "embed_dim", "hidden_dim", "proj_hidden", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def param_shapes(self) -> dict:
        i, e, h, p, d = (self.input_dim, self.embed_dim, self.hidden_dim,
                         self.proj_hidden, self.feature_dim)
        shapes = {"embed.W": (i, e), "embed.b": (e,)}
        for gate in ("z", "r", "n"):
            shapes[f"gru.W{gate}"] = (e, h)
            shapes[f"gru.U{gate}"] = (h, h)
            shapes[f"gru.b{gate}"] = (h,)
        shapes.update({"proj.W1": (h, p), "proj.b1": (p,),
                       "proj.W2": (p, d), "proj.b2": (d,)})
        return shapes


@dataclass
class EncoderParams:
    dims: EncoderDims
    arrays: dict  # name -> float32 ndarray, keys == PARAM_NAMES

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def state_bytes(self) -> bytes:
        return b"".join(self.arrays[k].tobytes() for k in PARAM_NAMES)


@dataclass
class AttackHead:
    """Fixed random projection from feature space onto class logits."""

    W: np.ndarray  # (feature_dim, num_classes)
    b: np.ndarray  # (num_classes,)

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]


@dataclass
class EncoderState:
    dims: EncoderDims
    query: EncoderParams
    key: EncoderParams
    head: AttackHead


def init_encoder_params(dims: EncoderDims, stream: RngStream) -> EncoderParams:
    """Fan-in scaled uniform init. Projection biases start slightly alive /
    nonzero so the pre-normalization feature can never be identically zero."""
    arrays = {}
    for name, shape in dims.param_shapes().items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = stream.split(name).uniform(-bound, bound, size=shape).astype(np.float32)
    arrays["proj.b1"][:] = 0.01
    # tiny but nonzero: guards the unit-normalization against an all-dead relu
    # layer without adding a shared feature direction that would collapse the
    # init geometry into a narrow cone
    bound = 1e-3 / np.sqrt(dims.proj_hidden)
    arrays["proj.b2"] = stream.split("proj.b2").uniform(-bound, bound,
                                                        size=(dims.feature_dim,)).astype(np.float32)
    return EncoderParams(dims, arrays)


def init_attack_head(dims: EncoderDims, num_classes: int, stream: RngStream) -> AttackHead:
    if num_classes < 2:
        raise ConfigError(f"attack head needs >= 2 classes, got {num_classes}")
    bound = 1.0 / np.sqrt(dims.feature_dim)
    w = stream.split("head.W").uniform(-bound, bound, size=(dims.feature_dim, num_classes))
    return AttackHead(w.astype(np.float32), np.zeros(num_classes, dtype=np.float32))


def momentum_update(theta_k: EncoderParams, theta_q: EncoderParams, alpha: float) -> EncoderParams:
    """Exact elementwise alpha * theta_k + (1 - alpha) * theta_q."""
    if not (0.0 <= alpha < 1.0):
        raise ConfigError(f"momentum coefficient must be in [0, 1), got {alpha}")
    out = {}
    for name in PARAM_NAMES:
        a, q = theta_k.arrays[name], theta_q.arrays[name]
        if a.shape != q.shape:
            raise ContractError(f"parameter '{name}' shapes differ: {a.shape} vs {q.shape}")
        out[name] = (alpha * a.astype(np.float64) + (1.0 - alpha) * q.astype(np.float64)).astype(a.dtype)
    return EncoderParams(theta_k.dims, out)


def make_param_leaves(params: EncoderParams, tape: Tape) -> dict:
    """Wrap every parameter as a differentiable leaf on the tape."""
    return {name: tape.leaf(params.arrays[name], name) for name in PARAM_NAMES}


def _wrap_params(params: EncoderParams, dtype, leaves: dict | None) -> dict:
    if leaves is not None:
        return leaves
    return {name: Tensor(params.arrays[name].astype(dtype, copy=False))
            for name in PARAM_NAMES}


def encode_batch(params: EncoderParams, frames, tape: Tape | None = None,
                 leaves: dict | None = None) -> Tensor:
    """Encode a (B, T, J*3) batch into unit-norm features of shape (B, d).

    frames may be a Tensor (e.g. a tape leaf, for input gradients) or an
    ndarray. Pass leaves from make_param_leaves() to train the parameters;
    otherwise they are treated as constants.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
    if x.ndim != 3:
        raise ConfigError(f"expected (B, T, F) input, got shape {x.shape}")
    bsz, t, feat = x.shape
    dims = params.dims
    if feat != dims.input_dim:
        raise ConfigError(f"input feature dim {feat} != configured {dims.input_dim}")
    p = _wrap_params(params, x.dtype, leaves)

    flat = tc.reshape(x, (bsz * t, feat))
    emb = tc.add(tc.matmul(flat, p["embed.W"]), p["embed.b"])
    emb = tc.reshape(emb, (bsz, t, dims.embed_dim))

    h = Tensor(np.zeros((bsz, dims.hidden_dim), dtype=x.dtype))
    h_sum = None
    for step in range(t):
        xt = tc.reshape(tc.slice_axis(emb, 1, step, step + 1), (bsz, dims.embed_dim))
        z = tc.sigmoid(tc.add(tc.add(tc.matmul(xt, p["gru.Wz"]), tc.matmul(h, p["gru.Uz"])), p["gru.bz"]))
        r = tc.sigmoid(tc.add(tc.add(tc.matmul(xt, p["gru.Wr"]), tc.matmul(h, p["gru.Ur"])), p["gru.br"]))
        n = tc.tanh(tc.add(tc.add(tc.matmul(xt, p["gru.Wn"]), tc.matmul(tc.mul(r, h), p["gru.Un"])), p["gru.bn"]))
        h = tc.add(tc.mul(sub_one(z), n), tc.mul(z, h))
        h_sum = h if h_sum is None else tc.add(h_sum, h)
    pooled = tc.scale(h_sum, 1.0 / t)

    hidden = tc.relu(tc.add(tc.matmul(pooled, p["proj.W1"]), p["proj.b1"]))
    feat_out = tc.add(tc.matmul(hidden, p["proj.W2"]), p["proj.b2"])
    return tc.l2_normalize(feat_out, axis=1)


def sub_one(z: Tensor) -> Tensor:
    return tc.sub(Tensor(np.ones(z.shape, dtype=z.dtype)), z)


def sequence_to_input(seq: SkeletonSequence, dtype=np.float32) -> np.ndarray:
    t, j, _ = seq.frames.shape
    return seq.frames.reshape(t, j * 3).astype(dtype)


def encode(params: EncoderParams, seq: SkeletonSequence, tape: Tape | None = None,
           leaves: dict | None = None) -> Tensor:
    """Encode one sequence into a unit feature vector of length feature_dim."""
    batch = sequence_to_input(seq)[None, :, :]
    out = encode_batch(params, batch, tape, leaves)
    return tc.reshape(out, (params.dims.feature_dim,))


def class_logits_batch(head: AttackHead, features: Tensor) -> Tensor:
    w = Tensor(head.W.astype(features.dtype, copy=False))
    b = Tensor(head.b.astype(features.dtype, copy=False))
    return tc.add(tc.matmul(features, w), b)


def class_feature_batch(params: EncoderParams, head: AttackHead, frames,
                        tape: Tape | None = None) -> Tensor:
    """Class-probability rows (B, C) via the frozen query encoder and head."""
    if head.W.shape[0] != params.dims.feature_dim:
        raise ConfigError(
            f"head input dim {head.W.shape[0]} != feature dim {params.dims.feature_dim}"
        )
    feats = encode_batch(params, frames, tape)
    return tc.softmax_t(class_logits_batch(head, feats), 1.0, axis=1)


def class_feature(params: EncoderParams, head: AttackHead, seq: SkeletonSequence,
                  tape: Tape | None = None) -> Tensor:
    out = class_feature_batch(params, head, sequence_to_input(seq)[None], tape)
    return tc.reshape(out, (head.num_classes,))


# ---------------------------------------------------------------------------
# checkpoint persistence

_CKPT_MAGIC = b"A2MCCKPT"
_CKPT_VERSION = 1


def _write_named(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr.astype("<f4", copy=False)).tobytes())


def save_checkpoint(path, state: EncoderState, extra_tensors: dict | None = None,
                    meta: dict | None = None):
    """Write encoder params (query/key/head), extra named tensors, and a JSON
    metadata blob (config echo, training progress)."""
    named = {}
    for prefix, params in (("q", state.query), ("k", state.key)):
        for name in PARAM_NAMES:
            named[f"{prefix}.{name}"] = params.arrays[name]
    named["head.W"] = state.head.W
    named["head.b"] = state.head.b
    for k, v in (extra_tensors or {}).items():
        named[k] = v
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(named)))
        for name in sorted(named):
            _write_named(fh, name, named[name])
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def load_checkpoint(path) -> tuple[EncoderState, dict, dict]:
    """Returns (state, extra named tensors, metadata dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16:
        raise FormatError("truncated checkpoint header at offset 0")
    if buf[:8] != _CKPT_MAGIC:
        raise FormatError("bad checkpoint magic at offset 0")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 8")
    off = 16
    named = {}
    for _ in range(count):
        if len(buf) < off + 2:
            raise FormatError(f"truncated tensor name at offset {off}")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        if len(buf) < off + 4:
            raise FormatError(f"truncated tensor rank at offset {off}")
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        if rank > 8:
            raise FormatError(f"implausible rank {rank} at offset {off - 4}")
        if len(buf) < off + 8 * rank:
            raise FormatError(f"truncated tensor dims at offset {off}")
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if rank else 4
        if len(buf) < off + nbytes:
            raise FormatError(f"truncated tensor data at offset {off}")
        named[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off) \
            .reshape(dims).astype(np.float32)
        off += nbytes
    if len(buf) < off + 4:
        raise FormatError(f"truncated metadata length at offset {off}")
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + mlen:
        raise FormatError(f"truncated metadata at offset {off}")
    meta = json.loads(buf[off : off + mlen].decode("utf-8")) if mlen else {}
    off += mlen
    if off != len(buf):
        raise FormatError(f"trailing bytes after checkpoint at offset {off}")

    def take(prefix):
        return {n: named.pop(f"{prefix}.{n}") for n in PARAM_NAMES}

    q_arrays = take("q")
    k_arrays = take("k")
    head = AttackHead(named.pop("head.W"), named.pop("head.b"))
    dims_meta = meta.get("encoder_dims")
    if dims_meta:
        dims = EncoderDims(**dims_meta)
    else:
        i, e = q_arrays["embed.W"].shape
        h = q_arrays["gru.Uz"].shape[0]
        p, d = q_arrays["proj.W2"].shape
        dims = EncoderDims(i, e, h, p, d)
    state = EncoderState(dims, EncoderParams(dims, q_arrays), EncoderParams(dims, k_arrays), head)
    return state, named, meta
