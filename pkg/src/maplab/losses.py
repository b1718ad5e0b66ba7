"""Decoupled backbone/classifier losses and the coupled baselines.

The backbone and projection head learn only from the KL term; the probe sees
detached features, so its cross-entropy cannot reach backbone parameters.
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .nets import as_input

EPS = 1e-8
REDUCTIONS = ("mean", "sum", "none")


@dataclass
class LossBreakdown:
    backbone_loss: torch.Tensor
    classifier_loss: torch.Tensor
    total: torch.Tensor

    def floats(self):
        return float(self.backbone_loss), float(self.classifier_loss), float(self.total)


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def _reduce(per_row, reduction):
    if reduction == "mean":
        return per_row.mean()
    if reduction == "sum":
        return per_row.sum()
    if reduction == "none":
        return per_row
    raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def _check_rows(probs, name, atol=1e-4):
    sums = probs.detach().sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol, rtol=0.0):
        bad = (sums - 1).abs().max().item()
        raise ValueError(f"{name} rows must sum to 1 (max deviation {bad:.2e})")
    if (probs.detach() < 0).any():
        raise ValueError(f"{name} has negative entries")


def kl_backbone_loss(targets, preds, reduction="mean", eps=EPS):
    """Batch-reduced ``sum_k t_k (ln t_k - ln p_k)`` with ``0 ln 0 = 0``."""
    preds = _as_tensor(preds)
    targets = _as_tensor(targets, preds.dtype)
    if targets.shape != preds.shape or targets.ndim != 2:
        raise ValueError(f"targets {tuple(targets.shape)} and preds {tuple(preds.shape)} must be equal (B, K)")
    _check_rows(targets, "targets")
    _check_rows(preds, "preds")
    per_row = (torch.xlogy(targets, targets) - targets * torch.log(preds.clamp_min(eps))).sum(dim=1)
    return _reduce(per_row, reduction)


def _check_labels(labels, k):
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")


def ce_classifier_loss(labels, logits, reduction="mean"):
    logits = _as_tensor(logits)
    labels = torch.as_tensor(np.asarray(labels) if not isinstance(labels, torch.Tensor) else labels, dtype=torch.long)
    _check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels, reduction=reduction)


def mixed_ce_loss(labels, partner_labels, lams, logits, reduction="mean"):
    """``lam * CE(label) + (1 - lam) * CE(partner_label)`` per row."""
    logits = _as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    partner_labels = torch.as_tensor(partner_labels, dtype=torch.long)
    _check_labels(labels, logits.shape[1])
    _check_labels(partner_labels, logits.shape[1])
    lams = torch.as_tensor(lams, dtype=logits.dtype)
    a = F.cross_entropy(logits, labels, reduction="none")
    b = F.cross_entropy(logits, partner_labels, reduction="none")
    return _reduce(lams * a + (1 - lams) * b, reduction)


def _hard_label_loss(logits, labels, partner_labels, lams, reduction):
    if lams is None:
        return ce_classifier_loss(labels, logits, reduction)
    return mixed_ce_loss(labels, partner_labels, lams, logits, reduction)


def _inputs(model, images):
    return as_input(images, next(model.parameters()).dtype)


def total_step_loss(model, images, targets, labels, partner_labels=None, lams=None, reduction="mean"):
    """L_B through g on live features, L_H through h on detached features.

    ``images`` is an NHWC batch (array or tensor). Returns a
    :class:`LossBreakdown` whose ``total`` carries the graph for ``backward``.
    """
    x = _inputs(model, images)
    features = model.backbone(x)
    preds = model.proj(features)
    loss_b = kl_backbone_loss(targets, preds, reduction)
    logits = model.probe(features.detach())
    loss_h = _hard_label_loss(logits, labels, partner_labels, lams, reduction)
    return LossBreakdown(loss_b, loss_h, loss_b + loss_h)


def coupled_kl_loss(model, images, targets, reduction="mean"):
    """Coupled ("Standard") arm: KL to targets through the probe at the head's temperature.

    Gradients flow through probe and backbone together; g is unused. The
    reported classifier loss is the hard-label CE of the same logits, for
    logging only.
    """
    x = _inputs(model, images)
    logits = model.probe(model.backbone(x))
    log_p = F.log_softmax(logits / model.proj.tau, dim=1)
    targets = _as_tensor(targets, log_p.dtype)
    _check_rows(targets, "targets")
    per_row = (torch.xlogy(targets, targets) - targets * log_p).sum(dim=1)
    return _reduce(per_row, reduction), logits


def coupled_ce_loss(model, images, labels, partner_labels=None, lams=None, reduction="mean"):
    """Plain supervised training through backbone and probe (used for teachers)."""
    x = _inputs(model, images)
    logits = model.probe(model.backbone(x))
    return _hard_label_loss(logits, labels, partner_labels, lams, reduction), logits
