"""Training objectives for teacher-student distillation.

All functions take torch tensors (numpy arrays are converted) and return
0-d tensors so they can be back-propagated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import BatchShapeError, DegenerateEmbedding, LabelError, NonFiniteLoss

POSTERIOR_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    cla: float = 1.0
    emb: float = 2.0
    kld: float = 2.0

    def __post_init__(self):
        w = (self.cla, self.emb, self.kld)
        if min(w) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(w) == 0:
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        parts = [float(p) for p in str(text).split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated weights, got {text!r}")
        return cls(*parts)

    def as_tuple(self):
        return (self.cla, self.emb, self.kld)


def _t(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.float64)


def kld_loss(teacher, student) -> torch.Tensor:
    """``-sum over rows and classes of teacher * log(student)`` for (batch, classes) posteriors.

    This is the cross-entropy form; with a frozen teacher it differs from
    KL(teacher || student) by the teacher entropy, a constant. Teacher is detached.
    """
    teacher, student = _t(teacher), _t(student)
    if teacher.shape != student.shape or teacher.ndim != 2:
        raise BatchShapeError(f"posterior shapes {tuple(teacher.shape)} vs {tuple(student.shape)}")
    teacher = teacher.detach().to(student.dtype)
    return -(teacher * torch.log(student.clamp_min(POSTERIOR_FLOOR))).sum()


def emb_loss(student, teacher) -> torch.Tensor:
    """Mean of ``1 - cos`` between matching student and teacher rows."""
    student, teacher = _t(student), _t(teacher)
    if student.shape != teacher.shape or student.ndim != 2 or student.shape[0] < 1:
        raise BatchShapeError(f"embedding shapes {tuple(student.shape)} vs {tuple(teacher.shape)}")
    teacher = teacher.to(student.dtype)
    ns, nt = student.norm(dim=1), teacher.norm(dim=1)
    if bool((ns == 0).any()) or bool((nt == 0).any()):
        raise DegenerateEmbedding("zero-norm row in embedding batch")
    cos = (student * teacher).sum(dim=1) / (ns * nt)
    return (1.0 - cos).mean()


def arcface_logits(cosine, labels, margin: float, scale: float) -> torch.Tensor:
    """Scaled logits with the target entry replaced by ``cos(theta_y + m)``."""
    cosine = _t(cosine)
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_cls = cosine.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_cls):
        raise LabelError(f"labels must lie in [0, {n_cls})")
    sine = torch.sqrt((1.0 - cosine ** 2).clamp_min(1e-12))
    # cos(t + m) = cos t cos m - sin t sin m, valid since sin t >= 0 on [0, pi]
    shifted = cosine * math.cos(margin) - sine * math.sin(margin)
    target = F.one_hot(labels, n_cls).to(torch.bool)
    return scale * torch.where(target, shifted, cosine)


def arcface_loss(embeddings, labels, head_weights, margin: float = 0.2, scale: float = 32.0) -> torch.Tensor:
    """Additive angular margin softmax cross-entropy, averaged over the batch."""
    embeddings, head_weights = _t(embeddings), _t(head_weights)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if embeddings.ndim != 2 or head_weights.ndim != 2 or embeddings.shape[1] != head_weights.shape[1]:
        raise BatchShapeError(f"embedding {tuple(embeddings.shape)} vs head {tuple(head_weights.shape)}")
    if labels.shape != (embeddings.shape[0],):
        raise BatchShapeError("one label per embedding required")
    cosine = F.linear(F.normalize(embeddings, dim=1), F.normalize(head_weights.to(embeddings.dtype), dim=1))
    return F.cross_entropy(arcface_logits(cosine, labels, margin, scale), labels)


def total_loss(l_cla, l_emb, l_kld, weights: LossWeights = LossWeights()) -> torch.Tensor:
    parts = [_t(l) for l in (l_cla, l_emb, l_kld)]
    for name, p in zip(("l_cla", "l_emb", "l_kld"), parts):
        if not bool(torch.isfinite(p).all()):
            raise NonFiniteLoss(f"{name} is not finite")
    return (weights.cla * parts[0] + weights.emb * parts[1]
            + weights.kld * parts[2])
