"""Training objectives: classification, angular distillation, and composition.

Angular terms compare embedding directions only: (1 - cos)^2 per sample, so
teacher and student may live on hyperspheres of different radii. Zero-norm
vectors raise instead of being clamped -- a silent epsilon would hide a
collapsed run.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import StageFeature
from .errors import ConfigError, DegenerateInputError, ShapeError

_NORM_FLOOR = 1e-12

MODES = ("self", "l2", "AD", "AAD")


class ClassifierHead(nn.Module):
    """Linear classifier over embeddings with the bias fixed to zero."""

    def __init__(self, num_classes: int, embedding_dim: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("classifier needs at least 2 classes")
        self.linear = nn.Linear(embedding_dim, num_classes, bias=False)

    @property
    def weight(self) -> torch.Tensor:  # (C, d)
        return self.linear.weight

    def logits(self, embeddings: torch.Tensor, normalized: bool = True,
               scale: float = 16.0) -> torch.Tensor:
        if normalized:
            if scale <= 0:
                raise ConfigError("scale must be positive in normalized mode")
            e = _unit(embeddings, "embedding")
            w = _unit(self.weight, "classifier weight row")
            return scale * (e @ w.t())
        return embeddings @ self.weight.t()


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms <= _NORM_FLOOR).any():
        raise DegenerateInputError(f"zero-norm {what}")
    return x / norms


def softmax_classification_loss(embeddings: torch.Tensor, labels: torch.Tensor,
                                head: ClassifierHead, normalized: bool = True,
                                scale: float = 16.0) -> torch.Tensor:
    """Mean negative log softmax probability of the true class.

    In normalized mode both embeddings and weight rows are unit-normalized, so
    logits are scaled cosines and the decision depends on direction alone.
    """
    c = head.weight.shape[0]
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"labels must lie in [0, {c})")
    return F.cross_entropy(head.logits(embeddings, normalized, scale), labels)


def angular_distillation_loss(teacher_emb: torch.Tensor,
                              student_emb: torch.Tensor) -> torch.Tensor:
    """(1 - cosine)^2 per pair, averaged over the batch. Range [0, 4]."""
    if teacher_emb.shape != student_emb.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(teacher_emb.shape)} "
                         f"vs {tuple(student_emb.shape)}")
    cos = (_unit(teacher_emb, "teacher embedding")
           * _unit(student_emb, "student embedding")).sum(dim=-1)
    return ((1.0 - cos) ** 2).mean()


def l2_distillation_loss(teacher_emb: torch.Tensor,
                         student_emb: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance per pair, averaged over the batch."""
    if teacher_emb.shape != student_emb.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(teacher_emb.shape)} "
                         f"vs {tuple(student_emb.shape)}")
    return ((teacher_emb - student_emb) ** 2).sum(dim=-1).mean()


def _feat(x) -> torch.Tensor:
    return x.data if isinstance(x, StageFeature) else x


def intermediate_angular_loss(teacher_feature, student_feature, adapter: nn.Module,
                              tail: nn.Module) -> torch.Tensor:
    """Angular loss between the frozen tail's readings of both stage features.

    The student feature goes through its channel adapter first; gradients reach
    only the student and the adapter (the teacher side is detached).
    """
    with torch.no_grad():
        t_emb = tail(_feat(teacher_feature))
    s_emb = tail(adapter(_feat(student_feature)))
    return angular_distillation_loss(t_emb, s_emb)


@dataclass(frozen=True)
class LambdaSchedule:
    """Weights of the distillation terms: final stage, intermediates, attention."""
    lambda_n: float
    lambda_intermediate: tuple[float, ...]  # stage 1 .. n-1
    lambda_attention: float = 0.0

    def __post_init__(self):
        if self.lambda_n < 0 or self.lambda_attention < 0 or any(
                l < 0 for l in self.lambda_intermediate):
            raise ConfigError("lambda weights must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.lambda_intermediate) + 1

    @staticmethod
    def from_final(lambda_n: float, n: int, lambda_attention: float = 0.0
                   ) -> "LambdaSchedule":
        """Geometric halving toward the input: each weight is half the next one."""
        if n < 2:
            raise ConfigError("need n >= 2 stages")
        inter = tuple(lambda_n / 2 ** (n - i) for i in range(1, n))
        return LambdaSchedule(lambda_n, inter, lambda_attention)


_REQUIRED_TERMS = {
    "self": ("classification",),
    "l2": ("classification", "l2"),
    "AD": ("classification", "angular_final", "angular_intermediate"),
    "AAD": ("classification", "angular_final", "angular_intermediate", "attention"),
}


def total_loss(terms: dict, schedule: LambdaSchedule, mode: str):
    """Weighted sum of the mode's terms plus a per-term weighted breakdown.

    `terms` maps "classification" / "l2" / "angular_final" / "attention" to
    scalars and "angular_intermediate" to a per-stage list (stage 1 .. n-1).
    The breakdown values sum to the total exactly by construction.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    required = _REQUIRED_TERMS[mode]
    missing = [k for k in required if k not in terms]
    if missing:
        raise ConfigError(f"mode {mode} requires terms {missing}")
    extra = [k for k in terms if k not in required]
    if extra:
        raise ConfigError(f"mode {mode} does not use terms {extra}")

    weighted = {"classification": 1.0 * terms["classification"]}
    if mode == "l2":
        weighted["l2"] = schedule.lambda_n * terms["l2"]
    elif mode in ("AD", "AAD"):
        inter = terms["angular_intermediate"]
        if len(inter) != len(schedule.lambda_intermediate):
            raise ConfigError(
                f"expected {len(schedule.lambda_intermediate)} intermediate terms, "
                f"got {len(inter)}")
        for i, (lam, term) in enumerate(zip(schedule.lambda_intermediate, inter), start=1):
            weighted[f"angular_stage_{i}"] = lam * term
        weighted["angular_final"] = schedule.lambda_n * terms["angular_final"]
        if mode == "AAD":
            weighted["attention"] = schedule.lambda_attention * terms["attention"]

    total = None
    for v in weighted.values():
        total = v if total is None else total + v
    breakdown = {k: float(v.detach()) if torch.is_tensor(v) else float(v)
                 for k, v in weighted.items()}
    return total, breakdown
