"""Cross-entropy, KL, classifier-diversification and the two-level objective.

All batch losses are batch means.  Distillation terms compare
temperature-softened distributions; the total objective scales them by T^2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .nn import log_softmax_t
from .tensor import ShapeError, Tensor

PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-6


def cross_entropy(q: Tensor, labels) -> Tensor:
    """Mean of ``-log q[b, y_b]`` for probability rows ``q``."""
    labels = np.asarray(labels, dtype=np.int64)
    if q.ndim != 2 or labels.shape != (q.shape[0],):
        raise ShapeError(f"cross_entropy: probabilities {q.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= q.shape[1]):
        raise ValueError(f"labels must lie in [0, {q.shape[1]}), got range [{labels.min()}, {labels.max()}]")
    picked = tn.take_columns(q, labels)
    return -tn.mean(tn.log(tn.clip(picked, PROB_FLOOR, 1.0)))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Same value as ``cross_entropy(softmax(logits))`` via log-softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return -tn.mean(tn.take_columns(log_softmax_t(logits, 1.0), labels))


def _check_rows(name: str, p: Tensor) -> None:
    dev = np.max(np.abs(p.data.sum(axis=-1) - 1.0)) if p.size else 0.0
    if dev > ROW_SUM_TOL:
        raise ValueError(f"kl_divergence: rows of {name} must sum to 1 (max deviation {dev:.3g})")


def kl_divergence(t: Tensor, q: Tensor) -> Tensor:
    """Batch mean of ``sum_j t_j log(t_j / q_j)``; zero-probability teacher terms vanish."""
    t = t if isinstance(t, Tensor) else Tensor(t)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if t.shape != q.shape or t.ndim != 2:
        raise ShapeError(f"kl_divergence: shapes {t.shape} and {q.shape} must match (B, C)")
    _check_rows("t", t)
    _check_rows("q", q)
    per_row = tn.tsum(tn.xlogx(t) - t * tn.log(q), axis=-1)
    return tn.mean(per_row)


def kl_from_logits(teacher_logits: Tensor, student_logits: Tensor, T: float) -> Tensor:
    """``KL(softmax_T(teacher) || softmax_T(student))`` computed in log space."""
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"kl: teacher {teacher_logits.shape} vs student {student_logits.shape}")
    log_t = log_softmax_t(teacher_logits, T)
    log_q = log_softmax_t(student_logits, T)
    t = tn.exp(log_t)
    return tn.mean(tn.tsum(t * (log_t - log_q), axis=-1))


def cd_loss(weights: list[Tensor]) -> Tensor:
    """Sum over pairs i < j of the entrywise L1 norm of ``W_i^T W_j``."""
    if len(weights) < 2:
        return Tensor(0.0)
    shape = weights[0].shape
    for w in weights[1:]:
        if w.shape != shape or w.ndim != 2:
            raise ShapeError(f"cd_loss: classifier weights {shape} and {w.shape} must share (in, C) shape")
    total = None
    for i in range(len(weights) - 1):
        wt = tn.transpose(weights[i])
        for j in range(i + 1, len(weights)):
            term = tn.tsum(tn.tabs(tn.matmul(wt, weights[j])))
            total = term if total is None else total + term
    return total


def first_level_loss(ensemble_logits: Tensor, aux_logits: list[Tensor], T: float) -> Tensor:
    """Sum over auxiliary branches of KL(ensemble target || branch), at temperature T."""
    if not aux_logits:
        raise ValueError("first_level_loss needs at least one auxiliary branch")
    total = None
    for t in aux_logits:
        term = kl_from_logits(ensemble_logits, t, T)
        total = term if total is None else total + term
    return total


def average_logits(logits: list[Tensor]) -> Tensor:
    if not logits:
        raise ValueError("need at least one logits tensor")
    stacked = np.stack([t.data for t in logits])
    return Tensor(stacked.mean(axis=0))


def second_level_loss(aux_logits: list[Tensor], leader_logits: Tensor, T: float) -> Tensor:
    """KL from the (detached) mean auxiliary logits to the group leader."""
    return kl_from_logits(average_logits(aux_logits), leader_logits, T)


@dataclass
class LossBreakdown:
    ce_sum: float
    kl1: float
    kl2: float
    cd: float
    alpha: float
    beta: float
    gamma: float
    T: float
    total: float
    ens_ce: float = 0.0

    def reassemble(self) -> float:
        return assemble_total(self.ce_sum, self.kl1, self.kl2, self.cd,
                              self.alpha, self.beta, self.gamma, self.T, self.ens_ce)

    def as_dict(self) -> dict:
        return asdict(self)

    def first_nonfinite(self) -> str | None:
        for name in ("ce_sum", "kl1", "kl2", "cd", "ens_ce", "total"):
            if not np.isfinite(getattr(self, name)):
                return name
        return None


def assemble_total(ce_sum, kl1, kl2, cd, alpha, beta, gamma, T, ens_ce=0.0):
    """Eq-8 style assembly; works on floats and on Tensors with identical rounding."""
    t2 = T * T
    total = ce_sum + (alpha * t2) * kl1 + (beta * t2) * kl2 + gamma * cd
    return total + ens_ce if not (isinstance(ens_ce, float) and ens_ce == 0.0) else total


@dataclass
class Coefficients:
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 5e-8
    T: float = 3.0

    def validate(self) -> None:
        bad = [n for n in ("alpha", "beta", "gamma") if getattr(self, n) < 0]
        if bad:
            raise ValueError(f"coefficients must be >= 0: {bad}")
        if not self.T > 0:
            raise ValueError("temperature T must be > 0")


def total_loss(logits: list[Tensor], labels, ensemble_logits: Tensor, classifier_weights: list[Tensor],
               coeffs: Coefficients, *, tavg_include_leader: bool = False,
               cd_include_leader: bool = True, ensemble_ce: bool = False) -> tuple[Tensor, LossBreakdown]:
    """Assemble the full objective for one batch.

    ``logits`` holds all m branches with the leader last; ``classifier_weights``
    likewise.  Returns the differentiable total and its float breakdown.
    """
    coeffs.validate()
    aux, leader = logits[:-1], logits[-1]
    ce = None
    for t in logits:
        term = cross_entropy_logits(t, labels)
        ce = term if ce is None else ce + term
    kl1 = first_level_loss(ensemble_logits, aux, coeffs.T)
    teachers = logits if tavg_include_leader else aux
    kl2 = kl_from_logits(average_logits(teachers), leader, coeffs.T)
    cd = cd_loss(classifier_weights if cd_include_leader else classifier_weights[:-1])
    ens = cross_entropy_logits(ensemble_logits, labels) if ensemble_ce else 0.0
    total = assemble_total(ce, kl1, kl2, cd, coeffs.alpha, coeffs.beta, coeffs.gamma, coeffs.T, ens)
    breakdown = LossBreakdown(
        ce_sum=ce.item(), kl1=kl1.item(), kl2=kl2.item(), cd=cd.item(),
        alpha=coeffs.alpha, beta=coeffs.beta, gamma=coeffs.gamma, T=coeffs.T,
        total=total.item(), ens_ce=ens.item() if isinstance(ens, Tensor) else 0.0,
    )
    return total, breakdown
