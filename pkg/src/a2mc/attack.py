"""Targeted semantic attack on skeleton sequences.

One Adam-style gradient step drives the class distribution of a sequence
toward uniform (an entropy-maximizing move toward the class boundary), with
the perturbation projected into an open L2 ball. The attacked sequence is
then passed through the weak/strong appearance pipelines to produce hard
positive features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .augment import AugmentationSpec, apply
from .data import SkeletonSequence
from .encoder import (
    AttackHead,
    EncoderParams,
    class_logits_batch,
    encode,
    encode_batch,
    sequence_to_input,
)
from .errors import ConfigError, ContractError, NumericError
from .rng import RngStream
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1   # perturbation step size
    eta: float = 0.5       # open L2 bound on the whole-sequence perturbation
    steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    stabilizer: float = 1e-8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.eta <= 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must be in [0, 1)")


def attack_loss(f_a: Tensor, num_classes: int) -> Tensor:
    """Mean squared deviation of a class distribution from uniform."""
    f_a = f_a if isinstance(f_a, Tensor) else Tensor(f_a)
    if f_a.ndim != 1 or f_a.shape[0] != num_classes:
        raise ContractError(f"expected a length-{num_classes} distribution, got {f_a.shape}")
    dev = tc.sub(f_a, Tensor(np.full(num_classes, 1.0 / num_classes, dtype=f_a.dtype)))
    return tc.mean(tc.mul(dev, dev))


def _attack_loss_rows(f_a: Tensor, num_classes: int) -> Tensor:
    """Sum over batch rows of the per-row uniform-deviation MSE; summing keeps
    each row's input gradient equal to its own single-sample gradient."""
    uniform = Tensor(np.full(f_a.shape, 1.0 / num_classes, dtype=f_a.dtype))
    dev = tc.sub(f_a, uniform)
    return tc.scale(tc.tsum(tc.mul(dev, dev)), 1.0 / num_classes)


def batch_class_probs(params: EncoderParams, head: AttackHead, frames) -> np.ndarray:
    feats = encode_batch(params, frames)
    return tc.softmax_t(class_logits_batch(head, feats), 1.0, axis=1).numpy()


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 1e-30, 1.0)
    return -(p * np.log(p)).sum(axis=1)


def attack_loss_rows_value(probs: np.ndarray) -> np.ndarray:
    c = probs.shape[1]
    return ((probs - 1.0 / c) ** 2).mean(axis=1)


@dataclass
class AttackOutcome:
    frames: np.ndarray       # attacked (B, T, F) input
    rho: np.ndarray          # applied perturbation, same shape
    warned: np.ndarray       # per-sample True where the attack was aborted


def attack_batch(frames: np.ndarray, params: EncoderParams, head: AttackHead,
                 cfg: AttackConfig) -> AttackOutcome:
    """Run the attack on a (B, T, F) batch with frozen params and head."""
    frames = np.asarray(frames)
    bsz = frames.shape[0]
    warned = np.zeros(bsz, dtype=bool)
    c = head.num_classes
    x_cur = frames.astype(frames.dtype, copy=True)
    m = np.zeros_like(frames, dtype=np.float64)
    v = np.zeros_like(frames, dtype=np.float64)
    for step in range(1, cfg.steps + 1):
        tape = Tape()
        leaf = tape.leaf(x_cur)
        try:
            feats = encode_batch(params, leaf, tape)
            f_a = tc.softmax_t(class_logits_batch(head, feats), 1.0, axis=1)
            loss = _attack_loss_rows(f_a, c)
            grad = tc.backward(loss)[leaf].astype(np.float64)
        except NumericError as err:
            log.warning("attack aborted at step %d: %s", step, err)
            return AttackOutcome(frames.copy(), np.zeros_like(frames), np.ones(bsz, dtype=bool))
        bad = ~np.isfinite(grad).reshape(bsz, -1).all(axis=1)
        if bad.any():
            warned |= bad
            grad[bad] = 0.0
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1 ** step)
        v_hat = v / (1.0 - cfg.beta2 ** step)
        x_cur = x_cur - (cfg.epsilon * m_hat / (np.sqrt(v_hat) + cfg.stabilizer)).astype(frames.dtype)

    rho = (x_cur.astype(np.float64) - frames.astype(np.float64))
    norms = np.sqrt((rho.reshape(bsz, -1) ** 2).sum(axis=1))
    over = norms >= cfg.eta
    if over.any():
        scalefac = np.ones(bsz)
        scalefac[over] = cfg.eta * (1.0 - 1e-6) / norms[over]
        rho = rho * scalefac[:, None, None]
    rho[warned] = 0.0
    rho = rho.astype(frames.dtype)
    return AttackOutcome(frames + rho, rho, warned)


def attack_step(seq: SkeletonSequence, params: EncoderParams, head: AttackHead,
                cfg: AttackConfig):
    """Attack one sequence; returns (attacked sequence, perturbation, warned)."""
    flat = sequence_to_input(seq)[None]
    out = attack_batch(flat, params, head, cfg)
    t, j, _ = seq.frames.shape
    attacked = seq.with_frames(out.frames[0].reshape(t, j, 3))
    return attacked, out.rho[0].reshape(t, j, 3), bool(out.warned[0])


def att_aug(seq: SkeletonSequence, params_q: EncoderParams, head: AttackHead,
            cfg: AttackConfig, weak_spec: AugmentationSpec, strong_spec: AugmentationSpec,
            rng: RngStream, tape: Tape | None = None, leaves: dict | None = None):
    """Attack, then augment: returns (f1 weak, f2 strong, attacked sequence).

    The attacked sequence is treated as data; gradients (when a tape and
    parameter leaves are supplied) flow only into the query encoder.
    """
    attacked, _, _ = attack_step(seq, params_q, head, cfg)
    weak = apply(weak_spec, attacked, rng.split("weak"))
    strong = apply(strong_spec, attacked, rng.split("strong"))
    f1 = encode(params_q, weak, tape, leaves)
    f2 = encode(params_q, strong, tape, leaves)
    return f1, f2, attacked
