"""Utterance MSE plus the label-weighted frame constraint."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from qualitynet.net import AssessmentResult

PESQ_MAX = 4.5


@dataclass(frozen=True)
class QualityLabel:
    q_hat: float
    q_max: float = PESQ_MAX

    def __post_init__(self):
        if self.q_hat > self.q_max:
            raise ValueError(f"label {self.q_hat} exceeds metric maximum {self.q_max}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    utterance_term: float
    frame_term: float
    alpha: float


def alpha_weight(q_hat: float, q_max: float = PESQ_MAX) -> float:
    """Frame-constraint weight 10**(q_hat - q_max); 1 for a perfect label, tiny for poor ones."""
    if q_hat > q_max:
        raise ValueError(f"label {q_hat} exceeds metric maximum {q_max}")
    return 10.0 ** (q_hat - q_max)


def _alpha(label: QualityLabel, alpha_enabled: bool) -> float:
    return alpha_weight(label.q_hat, label.q_max) if alpha_enabled else 0.0


def _frames(result: AssessmentResult) -> np.ndarray:
    q = np.asarray(result.q, dtype=np.float64).reshape(-1)
    if q.size == 0:
        raise ValueError("empty frame scores")
    return q


def utterance_loss(
    label: QualityLabel,
    result: AssessmentResult,
    alpha_enabled: bool = True,
    frame_term_mean: bool = False,
) -> LossBreakdown:
    """Loss of one utterance.

    The frame term is summed over frames; ``frame_term_mean`` divides it by
    the frame count instead. ``alpha_enabled=False`` drops the constraint.
    """
    q = _frames(result)
    utt = (label.q_hat - result.Q) ** 2
    frame = float(np.sum((label.q_hat - q) ** 2))
    if frame_term_mean:
        frame /= q.size
    alpha = _alpha(label, alpha_enabled)
    return LossBreakdown(utt + alpha * frame, utt, frame, alpha)


def loss_grads(
    label: QualityLabel,
    result: AssessmentResult,
    alpha_enabled: bool = True,
    frame_term_mean: bool = False,
) -> tuple[float, np.ndarray]:
    """Partials of :func:`utterance_loss`; the path through Q is folded into ``dq``, so dQ is 0."""
    q = _frames(result)
    n = q.size
    alpha = _alpha(label, alpha_enabled)
    scale = 2.0 * alpha / n if frame_term_mean else 2.0 * alpha
    dq = 2.0 * (result.Q - label.q_hat) / n + scale * (q - label.q_hat)
    return 0.0, dq


def batch_loss(labels: Sequence[QualityLabel], results: Sequence[AssessmentResult], **kw) -> float:
    if len(labels) != len(results):
        raise ValueError(f"{len(labels)} labels for {len(results)} results")
    if not labels:
        raise ValueError("empty batch")
    return float(np.mean([utterance_loss(l, r, **kw).total for l, r in zip(labels, results)]))
