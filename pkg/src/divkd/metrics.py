"""Top-k error, logit averaging and the interrater-agreement diversity statistic."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def top_k_error(logits, labels, k: int = 1) -> float:
    """Percentage of samples whose label is not among the ``k`` largest logits.

    Ties are ranked by class index, lowest first.
    """
    z = _arr(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if k < 1 or k >= z.shape[1]:
        raise ValueError(f"k must be in [1, {z.shape[1]}) for {z.shape[1]} classes, got {k}")
    order = np.argsort(-z, axis=1, kind="stable")[:, :k]
    hit = (order == labels[:, None]).any(axis=1)
    return 100.0 * (1.0 - hit.mean())


def ensemble_predict(logits_list) -> np.ndarray:
    if len(logits_list) == 0:
        raise ValueError("ensemble_predict needs at least one logits array")
    arrays = [_arr(t) for t in logits_list]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ValueError("all logits must share one shape")
    return np.mean(np.stack(arrays), axis=0)


def interrater_agreement(correct) -> float:
    """Interrater agreement ``s`` of a [num_samples x num_classifiers] correctness matrix.

    ``s = 1 - (1/T) sum_k rho_k (T - rho_k) / (M (T-1) pbar (1-pbar))`` where
    ``rho_k`` counts classifiers right on sample k, ``M`` is the sample
    count, ``T`` the classifier count and ``pbar`` the mean accuracy.  Lower
    ``s`` means more diverse classifiers.
    """
    c = np.asarray(correct, dtype=bool)
    if c.ndim != 2:
        raise ValueError(f"correctness matrix must be 2-D, got shape {c.shape}")
    num_samples, n_clf = c.shape
    if n_clf < 2 or num_samples < 1:
        raise ValueError(f"need >= 2 classifiers and >= 1 sample, got {c.shape}")
    rho = c.sum(axis=1).astype(np.float64)
    pbar = rho.sum() / (num_samples * n_clf)
    if pbar <= 0.0 or pbar >= 1.0:
        raise ValueError(f"degenerate mean accuracy {pbar}: agreement is undefined")
    num = (rho * (n_clf - rho)).sum() / n_clf
    return 1.0 - num / (num_samples * (n_clf - 1) * pbar * (1.0 - pbar))


@dataclass
class EvalResult:
    branch_top1: list[float]
    branch_top5: list[float] | None
    leader_top1: float
    leader_top5: float | None
    ensemble_top1: float
    agreement: float | None
    num_samples: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def mean_aux_top1(self) -> float:
        return float(np.mean(self.branch_top1[:-1] or self.branch_top1))


def evaluate_logits(branch_logits, labels, *, agreement_over_all: bool = False) -> EvalResult:
    """Score per-branch logits (leader last).  Ensemble and agreement use the
    auxiliary branches unless ``agreement_over_all``."""
    arrays = [_arr(t) for t in branch_logits]
    labels = np.asarray(labels, dtype=np.int64)
    c = arrays[0].shape[1]
    top1 = [top_k_error(a, labels, 1) for a in arrays]
    top5 = [top_k_error(a, labels, 5) for a in arrays] if c > 5 else None
    # a lone network is its own ensemble
    pool = arrays if agreement_over_all or len(arrays) == 1 else arrays[:-1]
    ens = ensemble_predict(pool)
    correct = np.stack([np.argmax(a, axis=1) == labels for a in pool], axis=1)
    try:
        s = interrater_agreement(correct) if correct.shape[1] >= 2 else None
    except ValueError:
        s = None
    return EvalResult(
        branch_top1=top1,
        branch_top5=top5,
        leader_top1=top1[-1],
        leader_top5=top5[-1] if top5 else None,
        ensemble_top1=top_k_error(ens, labels, 1),
        agreement=s,
        num_samples=int(labels.size),
    )
