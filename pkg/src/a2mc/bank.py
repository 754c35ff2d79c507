"""Memory banks of negative features: FIFO baseline and the gradient-updated
adversarial bank, plus positive-negative mixing that manufactures hard
negatives as convex combinations of a positive feature with bank rows."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ContractError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixConfig:
    lambdas: tuple = (0.4, 0.3, 0.2, 0.1)
    renormalize: bool = True

    def __post_init__(self):
        lam = tuple(float(v) for v in self.lambdas)
        if not lam:
            raise ConfigError("mixing coefficient list must be non-empty")
        for v in lam:
            if not (0.0 < v <= 0.5):
                raise ConfigError(f"mixing coefficient {v} outside (0, 0.5]")
        object.__setattr__(self, "lambdas", lam)


@dataclass(frozen=True)
class MemoryBank:
    rows: np.ndarray        # (K, d), unit rows
    mode: str = "fifo"      # fifo | adversarial
    cursor: int = 0         # next write position, fifo mode only

    def __post_init__(self):
        if self.mode not in ("fifo", "adversarial"):
            raise ConfigError(f"unknown bank mode '{self.mode}'")
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ConfigError(f"bank rows must be (K, d), got {rows.shape}")
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ConfigError("bank rows must be unit-norm within 1e-5")
        object.__setattr__(self, "rows", rows)

    @property
    def capacity(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ConfigError("cannot normalize a zero bank row")
    return (rows / norms.astype(rows.dtype)).astype(rows.dtype)


def init_bank(key_features: np.ndarray, capacity: int, mode: str = "fifo") -> MemoryBank:
    """Fill the bank with the first `capacity` key features, cycling the
    warmup features deterministically when there are fewer than `capacity`."""
    feats = np.asarray(key_features)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ConfigError(f"need a non-empty (n, d) feature array, got shape {feats.shape}")
    if capacity < 1:
        raise ConfigError(f"capacity must be >= 1, got {capacity}")
    reps = int(np.ceil(capacity / feats.shape[0]))
    rows = np.tile(feats, (reps, 1))[:capacity].copy()
    return MemoryBank(_unit_rows(rows), mode=mode, cursor=0)


def fifo_enqueue(bank: MemoryBank, new_features: np.ndarray) -> MemoryBank:
    """Replace the oldest rows at the cursor; capacity stays constant."""
    if bank.mode != "fifo":
        raise ContractError(f"fifo_enqueue on a '{bank.mode}' bank")
    feats = _unit_rows(np.asarray(new_features))
    rows = bank.rows.copy()
    cur = bank.cursor
    for row in feats:
        rows[cur] = row
        cur = (cur + 1) % bank.capacity
    return MemoryBank(rows, mode="fifo", cursor=cur)


def mix(f_star, bank_rows, lambdas, renormalize: bool = True):
    """Materialize the mixed bank: for each coefficient and each bank row,
    lam * f_star + (1 - lam) * row, optionally renormalized. Output rows are
    ordered by (coefficient index, row index) and stay differentiable when
    the inputs live on a tape.

    lambdas may be a MixConfig (which also fixes renormalize) or a plain
    sequence; plain sequences are not domain-checked so boundary values can
    be probed directly.
    """
    if isinstance(lambdas, MixConfig):
        renormalize = lambdas.renormalize
        lambdas = lambdas.lambdas
    f = f_star if isinstance(f_star, Tensor) else Tensor(f_star)
    rows = bank_rows if isinstance(bank_rows, Tensor) else Tensor(np.asarray(bank_rows))
    if f.ndim != 1 or rows.ndim != 2 or f.shape[0] != rows.shape[1]:
        raise ContractError(f"mix expects (d,) with (K, d), got {f.shape} and {rows.shape}")
    blocks = []
    frow = tc.reshape(f, (1, f.shape[0]))
    for lam in lambdas:
        raw = tc.add(tc.scale(frow, float(lam)), tc.scale(rows, 1.0 - float(lam)))
        blocks.append(tc.l2_normalize(raw, axis=1) if renormalize else raw)
    return tc.concat(blocks, axis=0)


def adversarial_update(bank: MemoryBank, grad: np.ndarray, beta: float) -> MemoryBank:
    """Gradient-ascent step on the bank rows followed by row renormalization.

    A non-finite gradient skips the update with a warning; a zero gradient
    returns the bank bit-unchanged.
    """
    if bank.mode != "adversarial":
        raise ContractError(f"adversarial_update on a '{bank.mode}' bank")
    grad = np.asarray(grad)
    if grad.shape != bank.rows.shape:
        raise ContractError(f"gradient shape {grad.shape} != bank shape {bank.rows.shape}")
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite bank gradient; adversarial update skipped")
        return bank
    if not grad.any():
        return bank
    stepped = bank.rows + (beta * grad).astype(bank.rows.dtype)
    return MemoryBank(_unit_rows(stepped), mode="adversarial", cursor=bank.cursor)
