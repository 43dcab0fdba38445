"""Distillation losses with analytic gradients.

``loss_match`` compares predictions and targets row by row (cosine plus
smooth L1). The contrastive losses pool random halves of each class (or
instance) and ask each half to identify its partner among all the others.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from ..errors import ShapeError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    cosine: float = 1.0
    smooth_l1: float = 1.0
    smooth_l1_beta: float = 1.0
    temperature: float = 0.1

    def __post_init__(self):
        if min(self.cosine, self.smooth_l1, self.smooth_l1_beta, self.temperature) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    empty: bool = False  # the loss was defined as 0 because there was nothing to compare


def _normalize(x):
    norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), NORM_EPS)
    return x / norm, norm


def _normalize_backward(dxhat, xhat, norm):
    return (dxhat - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)) / norm


def loss_match(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None,
               weights: LossWeights = LossWeights()) -> LossResult:
    """Mean over masked rows of ``l1 (1 - cos) + l2 SmoothL1`` (SmoothL1 averaged over channels)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    mask = np.ones(len(pred), bool) if mask is None else np.asarray(mask, bool)
    grad = np.zeros_like(pred)
    m = int(mask.sum())
    if m == 0:
        return LossResult(0.0, grad, empty=True)
    p, f = pred[mask], target[mask]
    d = p.shape[1]

    phat, pnorm = _normalize(p)
    fhat, _ = _normalize(f)
    cos = np.sum(phat * fhat, axis=1)
    dp = weights.cosine * _normalize_backward(-fhat, phat, pnorm)

    beta = weights.smooth_l1_beta
    diff = p - f
    a = np.abs(diff)
    if beta > 0:
        quad = a < beta
        sl1 = np.where(quad, 0.5 * diff * diff / beta, a - 0.5 * beta)
        dsl1 = np.where(quad, diff / beta, np.sign(diff))
    else:
        sl1, dsl1 = a, np.sign(diff)
    value = np.sum(weights.cosine * (1.0 - cos) + weights.smooth_l1 * sl1.mean(axis=1)) / m
    dp = dp + weights.smooth_l1 * dsl1 / d
    grad[mask] = dp / m
    return LossResult(float(value), grad)


def loss_contrastive(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None,
                     temperature: float = 0.1, seed: int = 0) -> LossResult:
    """Bidirectional InfoNCE between pooled means of seeded random halves of each group.

    Groups with fewer than two usable rows are skipped; fewer than two groups
    gives a zero loss flagged ``empty``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) != len(pred):
        raise ShapeError("labels and predictions differ in length")
    mask = np.ones(len(pred), bool) if mask is None else np.asarray(mask, bool)
    grad = np.zeros_like(pred)
    rows = np.flatnonzero(mask)
    rng = np.random.default_rng(seed)
    halves = []
    for c in np.unique(labels[rows]):
        members = rows[labels[rows] == c]
        if len(members) < 2:
            continue
        perm = rng.permutation(members)
        k = len(perm) // 2
        halves.append((perm[:k], perm[k:]))
    n = len(halves)
    if n < 2:
        return LossResult(0.0, grad, empty=True)

    a = np.stack([pred[h[0]].mean(axis=0) for h in halves])
    b = np.stack([pred[h[1]].mean(axis=0) for h in halves])
    ahat, anorm = _normalize(a)
    bhat, bnorm = _normalize(b)
    logits = ahat @ bhat.T / temperature
    idx = np.arange(n)
    ce_ab = -np.mean(log_softmax(logits, axis=1)[idx, idx])
    ce_ba = -np.mean(log_softmax(logits, axis=0)[idx, idx])
    eye = np.eye(n)
    dlogits = 0.5 * ((softmax(logits, axis=1) - eye) + (softmax(logits, axis=0) - eye)) / n
    dahat = dlogits @ bhat / temperature
    dbhat = dlogits.T @ ahat / temperature
    da = _normalize_backward(dahat, ahat, anorm)
    db = _normalize_backward(dbhat, bhat, bnorm)
    for k, (ha, hb) in enumerate(halves):
        grad[ha] += da[k] / len(ha)
        grad[hb] += db[k] / len(hb)
    return LossResult(float(0.5 * (ce_ab + ce_ba)), grad)


def loss_contrastive_semantic(pred, semantic_labels, mask=None, temperature=0.1, seed=0) -> LossResult:
    return loss_contrastive(pred, semantic_labels, mask, temperature, seed)


def loss_contrastive_instance(pred, instance_labels, mask=None, temperature=0.1, seed=0) -> LossResult:
    return loss_contrastive(pred, instance_labels, mask, temperature, seed)


CONTRASTIVE_KIND = {"lang": "semantic", "pe": "instance", "dino": None}


@dataclass(frozen=True)
class TeacherSpec:
    weight: float = 1.0
    contrastive_weight: float = 0.02
    start_epoch: int = 0

    def __post_init__(self):
        if self.weight < 0 or self.contrastive_weight < 0 or self.start_epoch < 0:
            raise ValueError("teacher weights and start epoch must be non-negative")


class TeacherSchedule:
    """Per-teacher weights and start epochs; ``active(e)`` only ever grows with ``e``."""

    def __init__(self, teachers: dict):
        self.teachers = {str(k): v if isinstance(v, TeacherSpec) else TeacherSpec(**v)
                         for k, v in teachers.items()}

    @classmethod
    def uniform(cls, teacher_ids, weight=1.0, contrastive_weight=0.02) -> TeacherSchedule:
        return cls({t: TeacherSpec(weight, contrastive_weight) for t in teacher_ids})

    def active(self, epoch: int) -> list[str]:
        return [t for t, s in self.teachers.items() if s.start_epoch <= epoch]

    def __getitem__(self, tid) -> TeacherSpec:
        return self.teachers[tid]


def loss_total(epoch: int, losses: dict, schedule: TeacherSchedule) -> float:
    """``sum over active t of weight_t * (match_t + contrastive_weight_t * con_t)``.

    ``losses`` maps teacher id to ``(match, contrastive)``.
    """
    total = 0.0
    for t in schedule.active(epoch):
        match, con = losses[t]
        spec = schedule[t]
        total += spec.weight * (match + spec.contrastive_weight * con)
    return total
