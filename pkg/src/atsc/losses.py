"""Training objectives.

Every function returns a :class:`LossValue`: a differentiable ``total`` and
the named scalar pieces it was assembled from. MSE terms are mean-reduced
over all elements, batch included, for both feature maps and parameter
vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractViolation
from .models import (
    Encoder,
    ParameterSnapshot,
    Projector,
    SharedClassifier,
    align_spatial,
    check_compatible,
    flatten_parameters,
)


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total.detach())

    def floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = self.item()
        return out

    def backward(self):
        self.total.backward()


@dataclass(frozen=True)
class BalancingConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")


def _alpha(cfg) -> float:
    if isinstance(cfg, BalancingConfig):
        return cfg.alpha
    return BalancingConfig(float(cfg)).alpha


def feature_mse(t_feat: torch.Tensor, s_feat: torch.Tensor) -> LossValue:
    if t_feat.shape != s_feat.shape:
        raise ContractViolation(
            f"feature shapes differ: {tuple(t_feat.shape)} vs {tuple(s_feat.shape)}"
        )
    loss = (t_feat - s_feat).pow(2).mean()
    return LossValue(loss, {"feat_mse": loss})


def anchor_penalty(snapshot: ParameterSnapshot, current: nn.Module) -> LossValue:
    """Mean squared displacement of ``current``'s trainable parameters from
    the anchored ``snapshot``."""
    theta = flatten_parameters(current)
    anchor = snapshot.as_tensor()
    if theta.numel() != anchor.numel():
        raise ContractViolation(
            f"snapshot has {anchor.numel()} parameters, encoder has {theta.numel()}"
        )
    if theta.numel() == 0:
        zero = theta.new_zeros(())
        return LossValue(zero, {"anchor": zero})
    loss = (theta - anchor.to(theta.dtype)).pow(2).mean()
    return LossValue(loss, {"anchor": loss})


def cross_entropy(labels: torch.Tensor, logits: torch.Tensor) -> LossValue:
    if logits.dim() != 2:
        raise ContractViolation(f"logits must be (batch, K), got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = logits.shape[1]
    if labels.shape != logits.shape[:1]:
        raise ContractViolation("labels and logits disagree on batch size")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ContractViolation(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_probs = shifted - torch.logsumexp(shifted, dim=1, keepdim=True)
    loss = -log_probs.gather(1, labels[:, None]).mean()
    return LossValue(loss, {"ce": loss})


def _match(t_feat: torch.Tensor, s_feat: torch.Tensor) -> LossValue:
    return feature_mse(align_spatial(t_feat, s_feat.shape[-2:]), s_feat)


def step1_loss(
    t_feat: torch.Tensor,
    s_feat_projected: torch.Tensor,
    snapshot: ParameterSnapshot,
    teacher_encoder: nn.Module,
    cfg,
) -> LossValue:
    """Feature matching plus ``alpha`` times the teacher anchor penalty."""
    alpha = _alpha(cfg)
    feat = _match(t_feat, s_feat_projected).total
    anchor = anchor_penalty(snapshot, teacher_encoder).total
    return LossValue(feat + alpha * anchor, {"feat_mse": feat, "anchor": anchor})


def simkd_loss(t_feat: torch.Tensor, s_feat_projected: torch.Tensor) -> LossValue:
    """Feature matching against a fixed teacher."""
    return _match(t_feat, s_feat_projected)


def step2_loss_teacher(labels, teacher_encoder: Encoder, classifier: SharedClassifier, x) -> LossValue:
    """Classifier fit on the teacher's current features; the encoder output is
    detached so only the classifier receives gradients."""
    with torch.no_grad():
        feat = teacher_encoder(x)
    return cross_entropy(labels, classifier(feat))


def step2_loss_student(
    labels, student_encoder: Encoder, projector: Projector, classifier: SharedClassifier, x
) -> LossValue:
    check_compatible(student_encoder, projector, classifier)
    with torch.no_grad():
        feat = projector(student_encoder(x))
    return cross_entropy(labels, classifier(feat))


def _same_length(*seqs):
    n = len(seqs[0])
    if n < 1:
        raise ContractViolation("need at least one teacher")
    if any(len(s) != n for s in seqs):
        raise ContractViolation("per-teacher argument lists differ in length")
    return n


def mt_step1_loss(
    teacher_feats: Sequence[torch.Tensor],
    student_feats_projected: Sequence[torch.Tensor],
    snapshots: Sequence[ParameterSnapshot],
    teacher_encoders: Sequence[nn.Module],
    cfg,
) -> LossValue:
    """Sum over teachers of (feature matching + alpha * anchor penalty)."""
    _same_length(teacher_feats, student_feats_projected, snapshots, teacher_encoders)
    alpha = _alpha(cfg)
    total = feat_sum = anchor_sum = None
    for t, s, snap, enc in zip(teacher_feats, student_feats_projected, snapshots, teacher_encoders):
        feat = _match(t, s).total
        anchor = anchor_penalty(snap, enc).total
        term = feat + alpha * anchor
        if total is None:
            total, feat_sum, anchor_sum = term, feat, anchor
        else:
            total, feat_sum, anchor_sum = total + term, feat_sum + feat, anchor_sum + anchor
    return LossValue(total, {"feat_mse": feat_sum, "anchor": anchor_sum})


def average_logits(logit_list: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(logit_list) == 1:
        return logit_list[0]
    return torch.stack(list(logit_list)).mean(dim=0)


def mt_step2_loss(labels, teacher_encoders, classifiers, x) -> LossValue:
    """Cross-entropy of the softmax of the teachers' averaged logits."""
    _same_length(teacher_encoders, classifiers)
    logits = []
    for enc, clf in zip(teacher_encoders, classifiers):
        with torch.no_grad():
            feat = enc(x)
        logits.append(clf(feat))
    return cross_entropy(labels, average_logits(logits))


def mt_student_logits(x, student: Encoder, projectors, classifiers) -> torch.Tensor:
    _same_length(projectors, classifiers)
    feat = student(x)
    logits = []
    for proj, clf in zip(projectors, classifiers):
        check_compatible(student, proj, clf)
        logits.append(clf(proj(feat)))
    return average_logits(logits)


@torch.no_grad()
def mt_student_predict(x, student: Encoder, projectors, classifiers) -> torch.Tensor:
    for m in [student, *projectors, *classifiers]:
        m.eval()
    return torch.softmax(mt_student_logits(x, student, projectors, classifiers), dim=-1)
