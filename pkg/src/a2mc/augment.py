"""Appearance perturbations for skeleton sequences.

Two pipelines are used during pretraining: the weak pipeline (identical to the
basic contrast pipeline: pose transform or joint jitter, then temporal
crop-resize) and the strong pipeline, which extends it with spatial flip,
rotation, additive noise, temporal gaussian filtering, and axis masking.
All primitives are pure functions of (sequence, rng stream).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SkeletonSequence, resample_time
from .errors import ConfigError
from .rng import RngStream

WEAK_PRIMITIVES = ("pose_or_jitter", "temporal_crop_resize")
STRONG_PRIMITIVES = WEAK_PRIMITIVES + (
    "spatial_flip",
    "rotate",
    "gaussian_noise",
    "gaussian_filter",
    "axis_mask",
)


@dataclass(frozen=True)
class AugmentationSpec:
    """Parameter set for one pipeline; kind selects the primitive list."""

    kind: str = "weak"  # basic | weak | strong
    target_frames: int = 32
    shear_range: float = 0.3
    angle_range: float = 0.3
    jitter_sigma: float = 0.05
    crop_min_ratio: float = 0.5
    flip_axis: int = 0
    flip_prob: float = 0.5
    rotate_range: float = 0.3
    noise_sigma: float = 0.05
    filter_sigma: float = 2.0
    mask_prob: float = 0.5

    def __post_init__(self):
        if self.kind not in ("basic", "weak", "strong"):
            raise ConfigError(f"unknown augmentation kind '{self.kind}'")
        if not (0.0 < self.crop_min_ratio <= 1.0):
            raise ConfigError(f"crop_min_ratio must be in (0, 1], got {self.crop_min_ratio}")
        for name in ("flip_prob", "mask_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.filter_sigma <= 0:
            raise ConfigError(f"filter_sigma must be positive, got {self.filter_sigma}")
        if self.jitter_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.flip_axis not in (0, 1, 2):
            raise ConfigError(f"flip_axis must be 0, 1, or 2, got {self.flip_axis}")

    @property
    def primitives(self) -> tuple:
        return STRONG_PRIMITIVES if self.kind == "strong" else WEAK_PRIMITIVES


def _apply_matrix(seq: SkeletonSequence, mat: np.ndarray) -> SkeletonSequence:
    out = seq.frames @ mat.T.astype(seq.frames.dtype)
    return seq.with_frames(out)


def _rotation_matrix(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def pose_augment(seq: SkeletonSequence, shear_range: float, angle_range: float,
                 rng: RngStream) -> SkeletonSequence:
    """One random shear composed with a small rotation, shared by all frames."""
    shear = np.eye(3)
    off = rng.uniform(-shear_range, shear_range, size=(3, 3))
    shear[~np.eye(3, dtype=bool)] = off[~np.eye(3, dtype=bool)]
    rot = _rotation_matrix(rng.uniform(-angle_range, angle_range, size=3))
    return _apply_matrix(seq, rot @ shear)


def joint_jitter(seq: SkeletonSequence, sigma: float, rng: RngStream) -> SkeletonSequence:
    if sigma < 0:
        raise ConfigError(f"jitter sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return seq
    noise = rng.normal(0.0, sigma, size=seq.frames.shape).astype(seq.frames.dtype)
    return seq.with_frames(seq.frames + noise)


def temporal_crop_resize(seq: SkeletonSequence, min_ratio: float, target_frames: int,
                         rng: RngStream) -> SkeletonSequence:
    """Contiguous crop of random ratio in [min_ratio, 1], resampled to target length."""
    if not (0.0 < min_ratio <= 1.0):
        raise ConfigError(f"min_ratio must be in (0, 1], got {min_ratio}")
    t = seq.num_frames
    ratio = rng.uniform(min_ratio, 1.0)
    length = max(2, int(np.ceil(ratio * t)))
    start = rng.integers(0, t - length + 1)
    cropped = seq.with_frames(seq.frames[start : start + length])
    return resample_time(cropped, target_frames)


def spatial_flip(seq: SkeletonSequence, axis: int, prob: float, rng: RngStream) -> SkeletonSequence:
    if rng.uniform() >= prob:
        return seq
    out = seq.frames.copy()
    out[:, :, axis] = -out[:, :, axis]
    return seq.with_frames(out)


def rotate(seq: SkeletonSequence, angle_range: float, rng: RngStream) -> SkeletonSequence:
    return _apply_matrix(seq, _rotation_matrix(rng.uniform(-angle_range, angle_range, size=3)))


def gaussian_noise(seq: SkeletonSequence, sigma: float, rng: RngStream) -> SkeletonSequence:
    return joint_jitter(seq, sigma, rng)


def gaussian_filter(seq: SkeletonSequence, kernel_sigma: float) -> SkeletonSequence:
    """Convolve each joint-coordinate series along time with a normalized
    gaussian kernel (truncated at 4 sigma, reflect padding)."""
    if kernel_sigma <= 0:
        raise ConfigError(f"kernel_sigma must be positive, got {kernel_sigma}")
    t = seq.num_frames
    radius = min(int(np.ceil(4.0 * kernel_sigma)), t - 1)
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / kernel_sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(seq.frames, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    out = np.zeros_like(seq.frames, dtype=np.float64)
    for k, w in enumerate(kernel):
        out += w * padded[k : k + t]
    return seq.with_frames(out.astype(seq.frames.dtype))


def axis_mask(seq: SkeletonSequence, prob: float, rng: RngStream) -> SkeletonSequence:
    """Zero one randomly chosen coordinate axis with the given probability."""
    u = rng.uniform()
    axis = rng.integers(0, 3)
    if u >= prob:
        return seq
    out = seq.frames.copy()
    out[:, :, axis] = 0.0
    return seq.with_frames(out)


def apply(spec: AugmentationSpec, seq: SkeletonSequence, rng: RngStream) -> SkeletonSequence:
    """Run the pipeline for spec.kind in its fixed order."""
    if rng.uniform() < 0.5:
        seq = pose_augment(seq, spec.shear_range, spec.angle_range, rng.split("pose"))
    else:
        seq = joint_jitter(seq, spec.jitter_sigma, rng.split("jitter"))
    seq = temporal_crop_resize(seq, spec.crop_min_ratio, spec.target_frames, rng.split("crop"))
    if spec.kind != "strong":
        return seq
    seq = spatial_flip(seq, spec.flip_axis, spec.flip_prob, rng.split("flip"))
    seq = rotate(seq, spec.rotate_range, rng.split("rotate"))
    seq = gaussian_noise(seq, spec.noise_sigma, rng.split("noise"))
    seq = gaussian_filter(seq, spec.filter_sigma)
    seq = axis_mask(seq, spec.mask_prob, rng.split("mask"))
    return seq
