"""Probability primitives and the differentiable losses built on them.

The plain-vector helpers (:func:`softmax`, :func:`kl_divergence`) are
numpy-based and double as independent oracles for the tensor paths. The
tensor losses (:func:`sequence_kl`, :func:`cross_entropy`) operate on
float64 torch tensors so analytic gradients can be validated against
central finite differences at tight tolerances.

Conventions, fixed once here and relied on everywhere else:
  * KL direction is KL(teacher || student); the teacher side never
    carries gradient.
  * A 1e-12 probability floor is applied inside ln for the student only;
    exact zeros on the teacher side use the 0*ln(0) = 0 convention.
  * Sequence losses are means over the masked response steps.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

PROB_FLOOR = 1e-12
_LOG_PROB_FLOOR = math.log(PROB_FLOOR)


def softmax(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a non-empty 1-D vector of finite floats."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"softmax expects a non-empty 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains non-finite entries")
    z = np.exp(x - x.max())
    return z / z.sum()


def kl_divergence(p: Sequence[float] | np.ndarray, q: Sequence[float] | np.ndarray) -> float:
    """KL(p || q) in nats.

    Zero entries in p contribute nothing (0*ln 0 = 0); q is floored at
    ``PROB_FLOOR`` inside the logarithm so that p-mass on a q-zero stays
    finite instead of blowing up.
    """
    pa = np.asarray(p, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float64)
    if pa.ndim != 1 or qa.ndim != 1 or pa.shape != qa.shape:
        raise ValueError(f"kl_divergence length mismatch: {pa.shape} vs {qa.shape}")
    log_q = np.log(np.maximum(qa, PROB_FLOOR))
    pos = pa > 0.0
    p_log_p = np.where(pos, pa * np.log(np.where(pos, pa, 1.0)), 0.0)
    return float(np.sum(p_log_p - pa * log_q))


def _as_mask(mask, n_steps: int) -> torch.Tensor:
    m = torch.as_tensor(mask, dtype=torch.bool)
    if m.shape != (n_steps,):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match {n_steps} steps")
    return m


def sequence_kl(teacher_logits: torch.Tensor, student_logits: torch.Tensor, mask) -> torch.Tensor:
    """Mean per-step KL(teacher || student) over the masked response steps.

    ``teacher_logits`` is detached internally; gradient flows only into
    ``student_logits``.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"logit shape mismatch: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}"
        )
    if teacher_logits.dim() != 2:
        raise ValueError("sequence_kl expects (steps, vocab) logits")
    m = _as_mask(mask, teacher_logits.shape[0])
    if not bool(m.any()):
        raise ValueError("mask selects no response steps")
    t = teacher_logits.detach().to(torch.float64)
    p = torch.softmax(t, dim=-1)
    log_q = torch.log_softmax(student_logits, dim=-1).clamp_min(_LOG_PROB_FLOOR)
    per_step = (torch.xlogy(p, p) - p * log_q).sum(dim=-1)
    w = m.to(per_step.dtype)
    return (per_step * w).sum() / w.sum()


def sequence_kl_rows(
    teacher_logits: torch.Tensor, student_logits: torch.Tensor, masks: torch.Tensor
) -> torch.Tensor:
    """Row-wise :func:`sequence_kl` for (rows, steps, vocab) stacks.

    Rows are independent; used by the trainers to batch same-length
    prompts. Padded steps must be masked out per row.
    """
    if teacher_logits.shape != student_logits.shape or teacher_logits.dim() != 3:
        raise ValueError("sequence_kl_rows expects matching (rows, steps, vocab) logits")
    m = masks.to(torch.bool)
    if m.shape != teacher_logits.shape[:2]:
        raise ValueError("masks must be (rows, steps)")
    if not bool(m.any(dim=1).all()):
        raise ValueError("every row needs at least one unmasked step")
    t = teacher_logits.detach().to(torch.float64)
    p = torch.softmax(t, dim=-1)
    log_q = torch.log_softmax(student_logits, dim=-1).clamp_min(_LOG_PROB_FLOOR)
    per_step = (torch.xlogy(p, p) - p * log_q).sum(dim=-1)
    w = m.to(per_step.dtype)
    return (per_step * w).sum(dim=1) / w.sum(dim=1)


def cross_entropy(logits: torch.Tensor, targets, mask) -> torch.Tensor:
    """Mean -ln p(target) over the masked steps."""
    if logits.dim() != 2:
        raise ValueError("cross_entropy expects (steps, vocab) logits")
    tgt = torch.as_tensor(targets, dtype=torch.long)
    if tgt.shape != (logits.shape[0],):
        raise ValueError(f"targets shape {tuple(tgt.shape)} does not match {logits.shape[0]} steps")
    vocab = logits.shape[1]
    if bool((tgt < 0).any()) or bool((tgt >= vocab).any()):
        raise IndexError(f"target id outside vocabulary of size {vocab}")
    m = _as_mask(mask, logits.shape[0])
    if not bool(m.any()):
        raise ValueError("mask selects no response steps")
    log_p = torch.log_softmax(logits, dim=-1)
    nll = -log_p.gather(1, tgt.view(-1, 1)).squeeze(1)
    w = m.to(nll.dtype)
    return (nll * w).sum() / w.sum()


def cross_entropy_rows(logits: torch.Tensor, targets: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Row-wise :func:`cross_entropy` for (rows, steps, vocab) stacks."""
    if logits.dim() != 3:
        raise ValueError("cross_entropy_rows expects (rows, steps, vocab) logits")
    tgt = torch.as_tensor(targets, dtype=torch.long)
    if tgt.shape != logits.shape[:2]:
        raise ValueError("targets must be (rows, steps)")
    vocab = logits.shape[2]
    if bool((tgt < 0).any()) or bool((tgt >= vocab).any()):
        raise IndexError(f"target id outside vocabulary of size {vocab}")
    m = masks.to(torch.bool)
    if m.shape != logits.shape[:2]:
        raise ValueError("masks must be (rows, steps)")
    if not bool(m.any(dim=1).all()):
        raise ValueError("every row needs at least one unmasked step")
    log_p = torch.log_softmax(logits, dim=-1)
    nll = -log_p.gather(2, tgt.unsqueeze(-1)).squeeze(-1)
    w = m.to(nll.dtype)
    return (nll * w).sum(dim=1) / w.sum(dim=1)
