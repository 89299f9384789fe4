"""Loss algebra: main cross-entropy, hard-label distillation, combined objective.

All losses are batch means, so the 0.5 weights in :func:`total_loss` do not
depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn.functional as F

FOCAL = "focal"
CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    n_min: int = 20
    focal_gamma: float = 2.0
    main_weight: float = 0.5
    dist_weight: float = 0.5

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if (self.main_weight, self.dist_weight) != (0.5, 0.5):
            raise ValueError("main_weight and dist_weight are fixed at 0.5")


@dataclass(frozen=True)
class LossReport:
    l_main: float
    l_dist: float
    total: float
    dist_variant: str
    n_im_per_class: int


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x C, got shape {tuple(logits.shape)}")
    if labels.shape != logits.shape[:1]:
        raise ValueError("labels must have one entry per logit row")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range for {logits.shape[1]} classes")


def _log_pt(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    # log_softmax subtracts the row max internally
    return F.log_softmax(logits, dim=1).gather(1, labels[:, None])[:, 0]


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(logits, labels)
    return -_log_pt(logits, labels).mean()


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean of -(1 - p_t)^gamma * log(p_t); no per-class weighting."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(logits, labels)
    log_pt = _log_pt(logits, labels)
    if gamma == 0:
        return -log_pt.mean()
    modulator = (-torch.expm1(log_pt)).clamp_min(0).pow(gamma)
    return -(modulator * log_pt).mean()


def teacher_hard_label(teacher_logits: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax, detached; ties go to the lowest class id."""
    return teacher_logits.detach().argmax(dim=1)


def uses_focal(n_im_per_class: int, cfg: LossConfig) -> bool:
    return n_im_per_class <= cfg.n_min


def distillation_loss(
    student_logits: torch.Tensor,
    teacher_labels: torch.Tensor,
    n_im_per_class: int,
    cfg: LossConfig,
) -> Tuple[torch.Tensor, str]:
    if n_im_per_class < 1:
        raise ValueError("n_im_per_class must be >= 1")
    if uses_focal(n_im_per_class, cfg):
        return focal_loss(student_logits, teacher_labels, cfg.focal_gamma), FOCAL
    return cross_entropy(student_logits, teacher_labels), CROSS_ENTROPY


def total_loss(l_main, l_dist, cfg: LossConfig):
    return cfg.main_weight * l_main + cfg.alpha * cfg.dist_weight * l_dist
