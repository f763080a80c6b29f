"""Teacher/student logit metrics: CE, perplexity, SQNR, KL (both directions), delta-CE.

All log quantities are in nats per token; only SQNR is in decibels.
Reductions are sequential (see :mod:`ssmsens.numerics`) so a metric computed
over a concatenation of chunks is reproducible to the bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .numerics import as_tensor, log_softmax, seq_sum, softmax

__all__ = [
    "EvalMode",
    "KLDirection",
    "EvalResult",
    "cross_entropy",
    "token_losses",
    "analytic_cross_entropy",
    "mean_entropy",
    "perplexity",
    "sqnr_db",
    "kl_divergence",
    "delta_ce",
]


class EvalMode(str, enum.Enum):
    DATASET_TARGETS = "dataset_targets"
    TEACHER_ANALYTIC = "teacher_analytic"


class KLDirection(str, enum.Enum):
    TEACHER_TO_STUDENT = "teacher_to_student"  # KL(P_teacher || P_student)
    STUDENT_TO_TEACHER = "student_to_teacher"  # KL(P_student || P_teacher)


@dataclass(frozen=True)
class EvalResult:
    ce_nats_per_token: float
    num_tokens: int
    mode: EvalMode

    @property
    def perplexity(self) -> float:
        return perplexity(self.ce_nats_per_token)


def _flat_logits(x) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim < 1:
        raise ValueError("logits must have a vocabulary axis")
    return x.reshape(-1, x.shape[-1])


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"logit shape mismatch: {a.shape} vs {b.shape}")
    return _flat_logits(a), _flat_logits(b)


def _mean(x: np.ndarray) -> float:
    x = np.ravel(x)
    return float(seq_sum(x) / x.size)


def token_losses(logits, targets) -> np.ndarray:
    """Per-position ``-log softmax(logits)[t, targets[t]]``."""
    z = _flat_logits(logits)
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != z.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= z.shape[1]):
        raise ValueError("target id outside the vocabulary")
    return -log_softmax(z)[np.arange(z.shape[0]), targets]


def cross_entropy(logits, targets) -> float:
    """Mean next-token cross-entropy against dataset labels (nats/token).

    Raises:
        ValueError: if ``targets`` and the logit rows differ in length, or T is 0.
    """
    losses = token_losses(logits, targets)
    if losses.size == 0:
        raise ValueError("cross_entropy needs at least one position")
    return _mean(losses)


def analytic_cross_entropy(teacher_logits, student_logits) -> float:
    """``mean_t -sum_y p_t(y) log q_t(y)``: cross-entropy in expectation under the teacher."""
    zt, zs = _same_shape(teacher_logits, student_logits)
    return _mean(-seq_sum(softmax(zt) * log_softmax(zs)))


def mean_entropy(logits) -> float:
    """Mean per-position Shannon entropy of ``softmax(logits)``."""
    z = _flat_logits(logits)
    return _mean(-seq_sum(softmax(z) * log_softmax(z)))


def perplexity(ce: float) -> float:
    return math.exp(ce)


def sqnr_db(teacher_logits, student_logits) -> float:
    """``10 log10(E[l_t^2] / E[(l_t - l_s)^2])`` over every logit element.

    Returns ``inf`` when the student's logits equal the teacher's.

    Raises:
        ValueError: on shape mismatch or an all-zero teacher (signal undefined).
    """
    zt, zs = _same_shape(teacher_logits, student_logits)
    signal = _mean(zt * zt)
    if signal == 0.0:
        raise ValueError("SQNR undefined for an all-zero teacher signal")
    diff = zt - zs
    noise = _mean(diff * diff)
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


def kl_divergence(teacher_logits, student_logits, direction: KLDirection = KLDirection.TEACHER_TO_STUDENT) -> float:
    """Mean per-position ``KL(P || Q)``; ``P`` is the teacher for TEACHER_TO_STUDENT."""
    zt, zs = _same_shape(teacher_logits, student_logits)
    direction = KLDirection(direction)
    zp, zq = (zt, zs) if direction is KLDirection.TEACHER_TO_STUDENT else (zs, zt)
    logp = log_softmax(zp)
    return _mean(seq_sum(np.exp(logp) * (logp - log_softmax(zq))))


def delta_ce(teacher_ce: float, student_ce: float) -> float:
    return student_ce - teacher_ce
