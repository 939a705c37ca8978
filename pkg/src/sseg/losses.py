"""Training objectives: dice, sigmoid focal, matched mask loss, symmetric
image-text contrastive loss and their weighted total."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import InputError

LOG_EPS = math.log(1e-12)


@dataclass
class LossWeights:
    lambda_mask: float = 1.0
    lambda_contrastive: float = 1.0
    lambda_dice: float = 1.0
    lambda_focal: float = 20.0
    focal_gamma: float = 2.0
    focal_alpha: Optional[float] = 0.25  # None disables class weighting
    dice_smooth: float = 1.0

    def __post_init__(self):
        lams = (self.lambda_mask, self.lambda_contrastive, self.lambda_dice, self.lambda_focal)
        if min(lams) < 0:
            raise InputError("loss weights must be non-negative")
        if self.focal_gamma < 0:
            raise InputError("focal_gamma must be non-negative")
        if self.focal_alpha is not None and not 0.0 <= self.focal_alpha <= 1.0:
            raise InputError("focal_alpha must lie in [0, 1]")


@dataclass
class LossReport:
    mask: float
    dice: float
    focal: float
    i2t: float
    t2i: float
    contrastive: float
    total: float

    def as_dict(self):
        return asdict(self)


def dice_loss(pred_probs, target, smooth=1.0):
    p = pred_probs.reshape(-1)
    t = target.reshape(-1).to(p.dtype)
    return 1.0 - (2.0 * (p * t).sum() + smooth) / (p.sum() + t.sum() + smooth)


def _focal_terms(logits, gamma, alpha):
    """Per-pixel focal contributions for target 1 and target 0."""
    p = torch.sigmoid(logits)
    neg_log_p = -torch.clamp(F.logsigmoid(logits), min=LOG_EPS)
    neg_log_1mp = -torch.clamp(F.logsigmoid(-logits), min=LOG_EPS)
    a_pos, a_neg = (1.0, 1.0) if alpha is None else (alpha, 1.0 - alpha)
    pos = a_pos * (1.0 - p) ** gamma * neg_log_p
    neg = a_neg * p ** gamma * neg_log_1mp
    return pos, neg


def focal_loss(pred_logits, target, gamma=2.0, alpha=0.25):
    pos, neg = _focal_terms(pred_logits, gamma, alpha)
    t = target.to(pos.dtype)
    return (t * pos + (1.0 - t) * neg).mean()


def pair_cost(pred_logits, pseudo_binary, weights: LossWeights = LossWeights()):
    """Matching cost of one predicted mask against one binary pseudo-mask."""
    if pred_logits.shape != pseudo_binary.shape:
        raise InputError(f"shape mismatch {tuple(pred_logits.shape)} vs {tuple(pseudo_binary.shape)}")
    dice = dice_loss(torch.sigmoid(pred_logits), pseudo_binary, weights.dice_smooth)
    focal = focal_loss(pred_logits, pseudo_binary, weights.focal_gamma, weights.focal_alpha)
    return weights.lambda_dice * dice + weights.lambda_focal * focal


def cost_matrix(mask_logits, pseudo_onehot, weights: LossWeights = LossWeights()):
    """All K x N pair costs at once.

    mask_logits: (N, h, w) logits; pseudo_onehot: (K, h, w) binary masks.
    """
    n = mask_logits.shape[0]
    k = pseudo_onehot.shape[0]
    if mask_logits.shape[1:] != pseudo_onehot.shape[1:]:
        raise InputError("pseudo-masks and predictions differ in resolution")
    logits = mask_logits.reshape(n, -1)
    t = pseudo_onehot.reshape(k, -1).to(logits.dtype)
    p = torch.sigmoid(logits)
    s = weights.dice_smooth
    dice = 1.0 - (2.0 * t @ p.T + s) / (t.sum(1, keepdim=True) + p.sum(1)[None, :] + s)
    pos, neg = _focal_terms(logits, weights.focal_gamma, weights.focal_alpha)
    focal = (t @ pos.T + (1.0 - t) @ neg.T) / logits.shape[1]
    return weights.lambda_dice * dice + weights.lambda_focal * focal


def onehot_labels(label_map, k=None):
    """(h, w) integer map -> (k, h, w) float binary masks."""
    label_map = torch.as_tensor(label_map)
    if k is None:
        k = int(label_map.max()) + 1
    return (label_map[None] == torch.arange(k).reshape(-1, 1, 1)).to(torch.float64)


def mask_loss(mask_logits, pseudo_labels, assignment, weights: LossWeights = LossWeights()):
    """Average dice/focal over matched (pseudo, prediction) pairs; unmatched predictions are free.

    Returns tensors ``(mask, dice, focal)``.
    """
    pseudo_labels = torch.as_tensor(pseudo_labels)
    k = int(pseudo_labels.max()) + 1
    idx = sorted(assignment.pairs)
    if [i for i, _ in idx] != list(range(k)):
        raise InputError(f"assignment covers pseudo indices {[i for i, _ in idx]}, expected 0..{k - 1}")
    if max(j for _, j in idx) >= mask_logits.shape[0]:
        raise InputError("assignment refers to a prediction that does not exist")
    target = onehot_labels(pseudo_labels, k).to(mask_logits.dtype)
    preds = mask_logits[[j for _, j in idx]]
    dices = torch.stack([dice_loss(torch.sigmoid(preds[i]), target[i], weights.dice_smooth)
                         for i in range(k)])
    focals = torch.stack([focal_loss(preds[i], target[i], weights.focal_gamma, weights.focal_alpha)
                          for i in range(k)])
    dice = dices.mean()
    focal = focals.mean()
    return weights.lambda_dice * dice + weights.lambda_focal * focal, dice, focal


def contrastive_loss(visual, text, temperature):
    """Symmetric InfoNCE over a batch of L2-normalized visual/text rows.

    Returns ``(i2t, t2i, i2t + t2i)``.
    """
    temperature = torch.as_tensor(temperature, dtype=visual.dtype)
    if not bool(temperature > 0):
        raise InputError("temperature must be positive")
    if visual.shape != text.shape or visual.shape[0] < 1:
        raise InputError("visual and text batches must have equal, non-zero size")
    logits = visual @ text.T / temperature
    target = torch.arange(visual.shape[0])
    # cross_entropy applies a max-shifted log-softmax
    i2t = F.cross_entropy(logits, target)
    t2i = F.cross_entropy(logits.T, target)
    return i2t, t2i, i2t + t2i


def total_loss(mask, contrastive, weights: LossWeights = LossWeights()):
    return weights.lambda_mask * mask + weights.lambda_contrastive * contrastive
