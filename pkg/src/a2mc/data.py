"""Skeleton sequences, synthetic labeled datasets, persistence, and the
joint/motion/bone modality transforms.

The synthetic generator stands in for motion-capture corpora: each class is a
set of per-joint sinusoid parameters on a chain skeleton, and samples of a
class differ by a global phase jitter plus i.i.d. coordinate noise. Classes
are separable in trajectory shape but overlap under noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .rng import RngStream

# generator internals. Classes are perturbations of one shared sinusoid
# "motion style": the spreads below space the classes so they are separable
# in trajectory shape but overlap once noise and phase jitter are applied.
# Samples within a class differ by a global phase shift plus independent
# per-joint-coordinate phase jitter (a high-dimensional nuisance, so nearest
# neighbors cannot simply memorize one orbit) and coordinate noise.
_CHAIN_STEP = np.array([0.12, 0.02, 0.0])
_BASE_AMP = (0.15, 0.40)
_BASE_FREQ = (0.6, 2.2)
_CLASS_AMP_SPREAD = 0.25
_CLASS_FREQ_SPREAD = 0.15
_CLASS_PHASE_SPREAD = 0.6
TIME_ORIGIN_JITTER = 1.0
PHASE_JITTER_LOCAL = 0.0


def chain_topology(num_joints: int) -> list[tuple[int, int]]:
    """(child, parent) edges of a simple kinematic chain rooted at joint 0."""
    return [(j, j - 1) for j in range(1, num_joints)]


def _check_topology(topology, num_joints: int):
    if len(topology) != num_joints - 1:
        raise ConfigError(f"topology needs {num_joints - 1} edges, got {len(topology)}")
    parent = {0: None}
    for child, par in topology:
        if not (0 <= child < num_joints and 0 <= par < num_joints):
            raise ConfigError(f"edge ({child},{par}) outside joint range")
        if child in parent:
            raise ConfigError(f"joint {child} has two parents")
        parent[child] = par
    if len(parent) != num_joints:
        raise ConfigError("topology is not connected to the root")
    for child, par in topology:
        seen, j = set(), child
        while j != 0:
            if j in seen:
                raise ConfigError("topology contains a cycle")
            seen.add(j)
            j = parent[j]


@dataclass(frozen=True)
class SkeletonSequence:
    """One sample: frames of shape (T, J, 3) plus the joint tree."""

    frames: np.ndarray
    topology: tuple = ()

    def __post_init__(self):
        fr = np.asarray(self.frames)
        if fr.ndim != 3 or fr.shape[2] != 3:
            raise ConfigError(f"frames must be (T, J, 3), got {fr.shape}")
        if fr.shape[0] < 2 or fr.shape[1] < 2:
            raise ConfigError(f"need T >= 2 and J >= 2, got T={fr.shape[0]} J={fr.shape[1]}")
        if not np.all(np.isfinite(fr)):
            raise ConfigError("non-finite coordinates in skeleton sequence")
        topo = tuple((int(c), int(p)) for c, p in (self.topology or chain_topology(fr.shape[1])))
        _check_topology(topo, fr.shape[1])
        object.__setattr__(self, "frames", fr)
        object.__setattr__(self, "topology", topo)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(frames, self.topology)


@dataclass
class LabeledDataset:
    sequences: list
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != len(self.labels):
            raise ConfigError(
                f"{len(self.sequences)} sequences vs {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.sequences)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    per_class_train: int = 80
    per_class_test: int = 20
    num_frames: int = 32
    num_joints: int = 10
    noise_sigma: float = 0.08
    seed: int = 1234

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.num_classes}")
        if self.num_frames < 8:
            raise ConfigError(f"need >= 8 frames, got {self.num_frames}")
        if self.num_joints < 4:
            raise ConfigError(f"need >= 4 joints, got {self.num_joints}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.per_class_train < 1 or self.per_class_test < 1:
            raise ConfigError("per-class sample counts must be >= 1")


def _class_params(cfg: SynthConfig, label: int):
    shape = (cfg.num_joints, 3)
    base = RngStream.from_name(cfg.seed, "style")
    amp0 = base.uniform(*_BASE_AMP, size=shape)
    freq0 = base.uniform(*_BASE_FREQ, size=shape)
    phase0 = base.uniform(0.0, 2.0 * np.pi, size=shape)
    s = RngStream.from_name(cfg.seed, f"class{label}")
    amp = amp0 * (1.0 + _CLASS_AMP_SPREAD * s.uniform(-1.0, 1.0, size=shape))
    freq = freq0 * (1.0 + _CLASS_FREQ_SPREAD * s.uniform(-1.0, 1.0, size=shape))
    phase = phase0 + _CLASS_PHASE_SPREAD * s.uniform(-1.0, 1.0, size=shape)
    return amp, freq, phase


def _synth_sample(cfg: SynthConfig, label: int, stream: RngStream) -> np.ndarray:
    amp, freq, phase = _class_params(cfg, label)
    # the per-sample phase jitter is a random temporal origin: each sinusoid
    # shifts by 2*pi*freq*origin, the same family of deformations a temporal
    # crop induces, so it is within-class nuisance rather than an instance
    # signature a crop-invariant encoder could latch onto
    origin = stream.uniform(0.0, TIME_ORIGIN_JITTER)
    local = stream.uniform(-PHASE_JITTER_LOCAL, PHASE_JITTER_LOCAL,
                           size=(cfg.num_joints, 3)) if PHASE_JITTER_LOCAL > 0 else 0.0
    rest = np.arange(cfg.num_joints)[:, None] * _CHAIN_STEP[None, :]
    t = np.arange(cfg.num_frames, dtype=np.float64) / cfg.num_frames
    angles = (2.0 * np.pi * freq[None, :, :] * (t[:, None, None] + origin)
              + (phase + local)[None, :, :])
    frames = rest[None, :, :] + amp[None, :, :] * np.sin(angles)
    if cfg.noise_sigma > 0:
        frames = frames + stream.normal(0.0, cfg.noise_sigma, size=frames.shape)
    return frames.astype(np.float32)


def generate_dataset(cfg: SynthConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Build seeded train/test splits; test uses fresh noise and phase jitter."""
    topo = chain_topology(cfg.num_joints)
    splits = {}
    for split, per_class in (("train", cfg.per_class_train), ("test", cfg.per_class_test)):
        seqs, labels = [], []
        idx = 0
        for label in range(cfg.num_classes):
            for _ in range(per_class):
                stream = RngStream.from_name(cfg.seed, f"{split}.sample{idx}")
                seqs.append(SkeletonSequence(_synth_sample(cfg, label, stream), topo))
                labels.append(label)
                idx += 1
        splits[split] = LabeledDataset(seqs, np.array(labels), cfg.num_classes, split)
    return splits["train"], splits["test"]


# ---------------------------------------------------------------------------
# temporal and modality transforms


def resample_time(seq: SkeletonSequence, target_frames: int) -> SkeletonSequence:
    """Linear interpolation along time; endpoints are preserved exactly."""
    if target_frames < 2:
        raise ConfigError(f"target frame count must be >= 2, got {target_frames}")
    frames = seq.frames
    src = frames.shape[0]
    if target_frames == src:
        return seq
    pos = np.linspace(0.0, src - 1.0, target_frames)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    w = (pos - lo).astype(frames.dtype)[:, None, None]
    out = frames[lo] * (1.0 - w) + frames[hi] * w
    return seq.with_frames(out.astype(frames.dtype))


def to_motion(seq: SkeletonSequence) -> SkeletonSequence:
    """Frame-to-frame displacement; the last frame is zero."""
    out = np.zeros_like(seq.frames)
    out[:-1] = seq.frames[1:] - seq.frames[:-1]
    return seq.with_frames(out)


def to_bone(seq: SkeletonSequence) -> SkeletonSequence:
    """Parent-relative joint offsets; the root keeps its raw coordinates."""
    out = seq.frames.copy()
    for child, parent in seq.topology:
        out[:, child] = seq.frames[:, child] - seq.frames[:, parent]
    return seq.with_frames(out)


def from_bone(seq: SkeletonSequence) -> SkeletonSequence:
    """Inverse of to_bone: prefix-sum offsets along the joint tree."""
    out = seq.frames.copy()
    children: dict[int, list[int]] = {}
    for child, parent in seq.topology:
        children.setdefault(parent, []).append(child)
    frontier = [0]
    while frontier:
        nxt = []
        for parent in frontier:
            for child in children.get(parent, ()):
                out[:, child] = out[:, parent] + seq.frames[:, child]
                nxt.append(child)
        frontier = nxt
    return seq.with_frames(out)


# ---------------------------------------------------------------------------
# persistence

_DATA_MAGIC = b"A2MCDATA"
_DATA_VERSION = 1


def save_dataset(ds: LabeledDataset, path):
    seqs = ds.sequences
    if not seqs:
        raise ConfigError("refusing to save an empty dataset")
    t, j = seqs[0].num_frames, seqs[0].num_joints
    topo = seqs[0].topology
    for s in seqs:
        if s.num_frames != t or s.num_joints != j or s.topology != topo:
            raise ConfigError("all sequences in a dataset must share shape and topology")
    if ds.num_classes > 0xFFFF:
        raise ConfigError("label format is u16; too many classes")
    split_tag = {"train": 0, "test": 1}.get(ds.split, 2)
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<IIIIIB", _DATA_VERSION, ds.num_classes, len(seqs), t, j, split_tag))
        fh.write(struct.pack("<I", len(topo)))
        for child, parent in topo:
            fh.write(struct.pack("<II", child, parent))
        coords = np.stack([s.frames for s in seqs]).astype("<f4")
        fh.write(np.ascontiguousarray(coords).tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8 or buf[:8] != _DATA_MAGIC:
        raise FormatError("bad dataset magic at offset 0")
    off = 8
    if len(buf) < off + 21:
        raise FormatError(f"truncated dataset header at offset {off}")
    version, num_classes, n, t, j, split_tag = struct.unpack_from("<IIIIIB", buf, off)
    off += 21
    if version != _DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version} at offset 8")
    if len(buf) < off + 4:
        raise FormatError(f"truncated topology count at offset {off}")
    (n_edges,) = struct.unpack_from("<I", buf, off)
    off += 4
    if n_edges != j - 1:
        raise FormatError(f"topology table has {n_edges} edges for {j} joints at offset {off - 4}")
    if len(buf) < off + 8 * n_edges:
        raise FormatError(f"truncated topology table at offset {off}")
    topo = []
    for _ in range(n_edges):
        topo.append(struct.unpack_from("<II", buf, off))
        off += 8
    coord_bytes = n * t * j * 3 * 4
    if len(buf) < off + coord_bytes:
        raise FormatError(f"truncated coordinates at offset {off}")
    coords = np.frombuffer(buf, dtype="<f4", count=n * t * j * 3, offset=off).reshape(n, t, j, 3)
    off += coord_bytes
    if len(buf) < off + 2 * n:
        raise FormatError(f"truncated labels at offset {off}")
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    if off != len(buf):
        raise FormatError(f"trailing bytes after dataset at offset {off}")
    split = {0: "train", 1: "test"}.get(split_tag, "other")
    seqs = [SkeletonSequence(coords[i].astype(np.float32), topo) for i in range(n)]
    return LabeledDataset(seqs, labels, num_classes, split)


def datasets_equal(a: LabeledDataset, b: LabeledDataset) -> bool:
    if len(a) != len(b) or a.num_classes != b.num_classes or a.split != b.split:
        return False
    if not np.array_equal(a.labels, b.labels):
        return False
    for sa, sb in zip(a.sequences, b.sequences):
        if sa.topology != sb.topology or sa.frames.tobytes() != sb.frames.tobytes():
            return False
    return True
