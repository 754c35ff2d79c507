"""Similarity distributions and the three-term mixing-contrast loss.

psi(u, v | bank) is a temperature-scaled softmax over the positive similarity
and all bank similarities (one shared denominator, so it is a proper
distribution). The weak and basic branches pull psi toward one-hot; the
strong branch pulls toward the (gradient-blocked) distribution of the basic
branch. Key features f0 never receive gradient.

Per-sample ops materialize mixed banks explicitly. The batched engine used by
the trainer computes mixed-row similarities in closed form (a convex mix is
bilinear in its parts), which is algebraically identical and much cheaper;
the equivalence is pinned by tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .bank import MixConfig, mix
from .errors import ConfigError, ContractError
from .tensor import Tensor

_EMPTY = ()


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    tau_bank: float = 0.03

    def __post_init__(self):
        if self.tau <= 0 or self.tau_bank <= 0:
            raise ConfigError(f"temperatures must be positive, got {self.tau}, {self.tau_bank}")


@dataclass
class SimilarityDistribution:
    p_pos: Tensor  # scalar
    p_neg: Tensor  # one probability per bank row


def _as_vec(x, name) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim != 1:
        raise ContractError(f"{name} must be a vector, got shape {t.shape}")
    return t


def _lambda_tuple(lambdas) -> tuple:
    if lambdas is None:
        return _EMPTY
    if isinstance(lambdas, MixConfig):
        return lambdas.lambdas
    return tuple(float(v) for v in lambdas)


def _pair_logits(u: Tensor, v: Tensor, bank_rows) -> Tensor:
    """[u.v, u.m_1, ..., u.m_K] as one vector; bank may be empty/None."""
    pos = tc.reshape(tc.dot(u, v), (1,))
    if bank_rows is None:
        return pos
    rows = bank_rows if isinstance(bank_rows, Tensor) else Tensor(np.asarray(bank_rows))
    if rows.shape[0] == 0:
        return pos
    sims = tc.reshape(tc.matmul(tc.reshape(u, (1, u.shape[0])), tc.transpose(rows)),
                      (rows.shape[0],))
    return tc.concat([pos, sims], axis=0)


def psi(u, v, bank_rows, tau: float) -> SimilarityDistribution:
    """Similarity distribution of u against v and the bank rows."""
    u = _as_vec(u, "u")
    v = _as_vec(v, "v")
    p = tc.softmax_t(_pair_logits(u, v, bank_rows), tau)
    k = p.shape[0] - 1
    return SimilarityDistribution(
        p_pos=tc.reshape(tc.slice_axis(p, 0, 0, 1), ()),
        p_neg=tc.slice_axis(p, 0, 1, 1 + k),
    )


def infonce(f3, f0, bank_rows, tau: float) -> Tensor:
    """Contrastive loss as -log of the positive probability of psi."""
    dist = psi(f3, _as_vec(f0, "f0").detach(), bank_rows, tau)
    return tc.neg(tc.log(dist.p_pos))


def infonce_one_hot(f3, f0, bank_rows, tau: float) -> Tensor:
    """Independent code path: one-hot label dotted with the log-distribution."""
    f3 = _as_vec(f3, "f3")
    f0 = _as_vec(f0, "f0").detach()
    logits = _pair_logits(f3, f0, bank_rows)
    onehot = np.zeros(logits.shape[0], dtype=logits.dtype)
    onehot[0] = 1.0
    return tc.neg(tc.tsum(tc.mul(tc.log_softmax_t(logits, tau), Tensor(onehot))))


def _concat_bank(m0_rows, mixed) -> Tensor | None:
    m0 = m0_rows if isinstance(m0_rows, Tensor) else Tensor(np.asarray(m0_rows))
    if mixed is None:
        return m0
    return tc.concat([m0, mixed], axis=0)


def loss_l1(f1, f0, m0_rows, m1, tau: float) -> Tensor:
    """-log psi(f1, f0 | M0 concatenated with the mixed bank M1).

    m1 is mix(f1, M0) (or None when mixing is disabled, which reduces this
    exactly to plain InfoNCE over M0).
    """
    return infonce(f1, f0, _concat_bank(m0_rows, m1), tau)


def loss_l3(f3, f0, m0_rows, m3, tau: float) -> Tensor:
    return loss_l1(f3, f0, m0_rows, m3, tau)


def l2_target(f3, f0, m0_rows, m2, tau: float) -> np.ndarray:
    """The basic branch's similarity distribution over {f0} + M0 + M2, as a
    plain array (this is the gradient-blocked side of the strong-branch loss)."""
    bank = _concat_bank(m0_rows, m2)
    logits = _pair_logits(_as_vec(f3, "f3").detach(), _as_vec(f0, "f0").detach(),
                          bank.detach())
    return tc.softmax_t(logits, tau).numpy()


def loss_l2(f2, f3, f0, m0_rows, m2, tau: float, target: np.ndarray | None = None) -> Tensor:
    """Cross-entropy from the basic branch's similarity distribution (target,
    gradients blocked) to the strong branch's distribution, both over the
    shared bank M0 concatenated with M2 = mix(f2, M0).

    target may be passed precomputed (e.g. to hold it fixed while probing the
    prediction path with finite differences); by default it is computed here
    from the detached inputs.
    """
    f2 = _as_vec(f2, "f2")
    f0 = _as_vec(f0, "f0").detach()
    bank = _concat_bank(m0_rows, m2)
    if target is None:
        target = l2_target(f3, f0, m0_rows, m2, tau)
    pred_ls = tc.log_softmax_t(_pair_logits(f2, f0, bank), tau)
    return tc.neg(tc.tsum(tc.mul(Tensor(np.asarray(target, dtype=pred_ls.dtype)), pred_ls)))


def mc_total(f0, f1, f2, f3, m0_rows, mix_cfg, loss_cfg: LossConfig,
             strong_target: np.ndarray | None = None):
    """Total mixing-contrast loss and its (L1, L2, L3) breakdown for one
    sample. Mixed banks M1/M2/M3 are built here from their own anchors."""
    lambdas = _lambda_tuple(mix_cfg)
    renorm = mix_cfg.renormalize if isinstance(mix_cfg, MixConfig) else True
    f1 = _as_vec(f1, "f1")
    f2 = _as_vec(f2, "f2")
    f3 = _as_vec(f3, "f3")
    m0 = m0_rows if isinstance(m0_rows, Tensor) else Tensor(np.asarray(m0_rows))
    m1 = mix(f1, m0, lambdas, renorm) if lambdas else None
    m2 = mix(f2, m0, lambdas, renorm) if lambdas else None
    m3 = mix(f3, m0, lambdas, renorm) if lambdas else None
    l1 = loss_l1(f1, f0, m0, m1, loss_cfg.tau)
    l2 = loss_l2(f2, f3, f0, m0, m2, loss_cfg.tau, target=strong_target)
    l3 = loss_l3(f3, f0, m0, m3, loss_cfg.tau)
    total = tc.add(tc.add(l1, l2), l3)
    return total, (l1, l2, l3)


def distribution_entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(np.clip(p, 1e-300, 1.0))).sum())


# ---------------------------------------------------------------------------
# batched engine


def _rowdot(a: Tensor, b: Tensor) -> Tensor:
    return tc.tsum(tc.mul(a, b), axis=1, keepdims=True)


def _as_mat(x, name) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim != 2:
        raise ContractError(f"{name} must be (B, d), got shape {t.shape}")
    return t


def _mixed_sims(u: Tensor, f_mix: Tensor, m0: Tensor, lam: float,
                renormalize: bool) -> Tensor:
    """Similarities of anchor rows u against mix(f_mix, M0) rows, in closed
    form: u.(lam f + (1-lam) m) = lam u.f + (1-lam) u.m, and the mixed row
    norm expands over the same dot products."""
    u_f = _rowdot(u, f_mix)                      # (B, 1)
    u_m = tc.matmul(u, tc.transpose(m0))         # (B, K)
    num = tc.add(tc.scale(u_f, lam), tc.scale(u_m, 1.0 - lam))
    if not renormalize:
        return num
    f_f = _rowdot(f_mix, f_mix)                  # (B, 1)
    f_m = tc.matmul(f_mix, tc.transpose(m0))     # (B, K)
    m_m = tc.tsum(tc.mul(m0, m0), axis=1, keepdims=True)  # (K, 1)
    den_sq = tc.add(
        tc.add(tc.scale(f_f, lam * lam),
               tc.scale(tc.transpose(m_m), (1.0 - lam) * (1.0 - lam))),
        tc.scale(f_m, 2.0 * lam * (1.0 - lam)),
    )
    return tc.div(num, tc.sqrt(den_sq))


def batched_logits(u, f0, m0, f_mix, lambdas, renormalize: bool = True) -> Tensor:
    """(B, 1 + K + len(lambdas)*K) similarity columns for anchor rows u:
    positive f0, bank M0, then one block per mixing coefficient."""
    u = _as_mat(u, "anchor")
    f0 = _as_mat(f0, "f0").detach()
    m0 = m0 if isinstance(m0, Tensor) else Tensor(np.asarray(m0))
    cols = [_rowdot(u, f0), tc.matmul(u, tc.transpose(m0))]
    lambdas = _lambda_tuple(lambdas)
    if lambdas:
        fm = _as_mat(f_mix, "f_mix")
        for lam in lambdas:
            cols.append(_mixed_sims(u, fm, m0, float(lam), renormalize))
    return tc.concat(cols, axis=1)


def batched_one_hot_term(anchor, f0, m0, lambdas, tau: float,
                         renormalize: bool = True) -> Tensor:
    """Mean over the batch of -log p_pos with the anchor's own mixed bank."""
    logits = batched_logits(anchor, f0, m0, anchor, lambdas, renormalize)
    ls = tc.log_softmax_t(logits, tau, axis=1)
    return tc.neg(tc.mean(tc.slice_axis(ls, 1, 0, 1)))


def batched_l2_target(f2, f3, f0, m0, lambdas, tau: float,
                      renormalize: bool = True) -> np.ndarray:
    f2 = _as_mat(f2, "f2")
    f3 = _as_mat(f3, "f3")
    m0t = m0 if isinstance(m0, Tensor) else Tensor(np.asarray(m0))
    logits = batched_logits(f3.detach(), f0, m0t.detach(), f2.detach(),
                            lambdas, renormalize)
    return tc.softmax_t(logits, tau, axis=1).numpy()


def batched_distributional_term(f2, f3, f0, m0, lambdas, tau: float,
                                renormalize: bool = True,
                                target: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy from the gradient-blocked basic-branch distribution
    to the strong branch, sharing the f2-mixed bank."""
    f2 = _as_mat(f2, "f2")
    m0t = m0 if isinstance(m0, Tensor) else Tensor(np.asarray(m0))
    if target is None:
        target = batched_l2_target(f2, f3, f0, m0t, lambdas, tau, renormalize)
    pred_ls = tc.log_softmax_t(batched_logits(f2, f0, m0t, f2, lambdas, renormalize),
                               tau, axis=1)
    per_row = tc.tsum(tc.mul(Tensor(np.asarray(target, dtype=pred_ls.dtype)), pred_ls),
                      axis=1)
    return tc.neg(tc.mean(per_row))
