"""Bipartite query/target matching and the set-prediction training loss."""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch.nn import functional as F

from .head import CHANGE, NULL

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    cls: float = 1.0
    dice: float = 10.0
    ce: float = 10.0
    null: float = 0.1  # class-loss weight of queries matched to nothing

    def __post_init__(self):
        if min(self.cls, self.dice, self.ce, self.null) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class Assignment:
    """``pairs`` maps target index -> query index."""

    pairs: Dict[int, int] = field(default_factory=dict)

    @property
    def queries(self) -> List[int]:
        return [self.pairs[t] for t in sorted(self.pairs)]

    @property
    def targets(self) -> List[int]:
        return sorted(self.pairs)


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Smoothed dice loss along the last axis (one value per leading index)."""
    num = 2 * (probs * target).sum(-1) + eps
    den = probs.sum(-1) + target.sum(-1) + eps
    return 1 - num / den


def match_cost(class_logits, mask_logits, targets, weights: LossWeights = None) -> torch.Tensor:
    """Cost matrix ``(m, n)`` between queries and target masks.

    class_logits ``(m, K)``; mask_logits ``(m, P)``; targets ``(n, P)`` binary,
    with ``P`` flattened pixels. BCE and dice use probabilities clamped to
    ``[1e-7, 1 - 1e-7]`` and are averaged over pixels.
    """
    weights = weights or LossWeights()
    p_change = F.softmax(class_logits, dim=-1)[:, CHANGE]
    probs = mask_logits.sigmoid().clamp(PROB_EPS, 1 - PROB_EPS)
    t = targets.to(probs.dtype)
    # mean BCE for every (query, target) pair via two matmuls
    pos = -torch.log(probs) @ t.T
    neg = -torch.log1p(-probs) @ (1 - t).T
    bce = (pos + neg) / probs.shape[-1]
    num = 2 * probs @ t.T + 1.0
    den = probs.sum(-1)[:, None] + t.sum(-1)[None, :] + 1.0
    dice = 1 - num / den
    return weights.cls * -p_change[:, None] + weights.ce * bce + weights.dice * dice


def hungarian_match(costs) -> Assignment:
    """Minimum-cost injective assignment of the ``n`` targets (columns) to ``m`` queries (rows)."""
    costs = np.asarray(costs.detach().cpu() if torch.is_tensor(costs) else costs, dtype=np.float64)
    m, n = costs.shape
    if n > m:
        raise ValueError(f"cannot match {n} targets with only {m} queries")
    if n == 0:
        return Assignment()
    if n == 1:
        # argmin returns the lowest index among ties
        return Assignment({0: int(np.argmin(costs[:, 0]))})
    rows, cols = linear_sum_assignment(costs)
    return Assignment({int(c): int(r) for r, c in zip(rows, cols)})


def targets_from_label(label: torch.Tensor, size) -> torch.Tensor:
    """Package one binary label ``(H, W)`` as ``(n, h, w)`` targets at ``size``.

    The whole changed region forms a single target; no change means ``n = 0``.
    """
    lab = label.to(torch.float32)[None, None]
    if tuple(lab.shape[-2:]) != tuple(size):
        lab = F.interpolate(lab, size=size, mode="area")
    mask = (lab[0, 0] >= 0.5).to(torch.uint8)
    if not mask.any():
        return mask.new_zeros((0,) + tuple(size))
    return mask[None]


class SetCriterion:
    """Hungarian-matched class + mask loss summed over every prediction set.

    ``mask_resolution="prediction"`` scores masks against labels downsampled
    to the mask-logit grid. ``"input"`` instead upsamples the mask
    probabilities bilinearly to label size, the same readout the detector
    uses, so sub-cell boundary positions are supervised too.
    """

    def __init__(self, weights: LossWeights = None, deep_supervision=True, mask_resolution="prediction"):
        if mask_resolution not in ("prediction", "input"):
            raise ValueError(f"unknown mask_resolution {mask_resolution!r}")
        self.weights = weights or LossWeights()
        self.deep_supervision = deep_supervision
        self.mask_resolution = mask_resolution

    def _targets(self, labels, size):
        if self.mask_resolution == "input":
            return [targets_from_label(lab, lab.shape[-2:]) for lab in labels]
        return [targets_from_label(lab, size) for lab in labels]

    def layer_loss(self, pred_logits, pred_masks, labels):
        """Loss components for one prediction set. labels: ``(N, H, W)`` binary."""
        w = self.weights
        n, m = pred_logits.shape[:2]
        upsample = self.mask_resolution == "input"
        targets = self._targets(labels, pred_masks.shape[-2:])
        class_target = torch.full((n, m), NULL, dtype=torch.long)
        matched, matched_targets = [], []
        for b in range(n):
            tgt = targets[b]
            if tgt.shape[0] == 0:
                continue
            if upsample:
                probs = F.interpolate(
                    pred_masks[b][None].sigmoid(), size=tgt.shape[-2:], mode="bilinear", align_corners=False
                )[0]
                cost_logits = torch.logit(probs.detach().clamp(PROB_EPS, 1 - PROB_EPS))
                per_query = probs
            else:
                cost_logits = pred_masks[b].detach()
                per_query = pred_masks[b]
            with torch.no_grad():
                cost = match_cost(pred_logits[b].detach(), cost_logits.flatten(1), tgt.flatten(1), w)
            assign = hungarian_match(cost)
            for t_idx, q_idx in assign.pairs.items():
                class_target[b, q_idx] = CHANGE
                matched.append(per_query[q_idx].flatten())
                matched_targets.append(tgt[t_idx].flatten())
        class_weight = pred_logits.new_tensor([1.0, w.null])
        loss_cls = F.cross_entropy(pred_logits.flatten(0, 1), class_target.flatten(), weight=class_weight)
        if matched:
            ce, dice = 0.0, 0.0
            for x, tg in zip(matched, matched_targets):
                tg = tg.to(x.dtype)
                if upsample:
                    ce = ce + F.binary_cross_entropy(x.clamp(PROB_EPS, 1 - PROB_EPS), tg)
                    dice = dice + dice_loss(x, tg)
                else:
                    ce = ce + F.binary_cross_entropy_with_logits(x, tg)
                    dice = dice + dice_loss(x.sigmoid(), tg)
            loss_ce = ce / len(matched)
            loss_dice = dice / len(matched)
        else:
            loss_ce = pred_masks.sum() * 0.0
            loss_dice = pred_masks.sum() * 0.0
        return {"loss_cls": loss_cls, "loss_ce": loss_ce, "loss_dice": loss_dice}

    def __call__(self, predictions: Sequence[dict], labels: torch.Tensor):
        return total_loss(predictions, labels, self)


def total_loss(predictions: Sequence[dict], labels: torch.Tensor, criterion: SetCriterion = None):
    """Weighted loss over prediction sets; returns ``(total, components)``.

    Components hold the unweighted per-term sums over layers plus the
    weighted ``loss`` itself, as floats-compatible tensors.
    """
    criterion = criterion or SetCriterion()
    w = criterion.weights
    sets = predictions if criterion.deep_supervision else predictions[-1:]
    parts = {"loss_cls": 0.0, "loss_ce": 0.0, "loss_dice": 0.0}
    total = 0.0
    for pred in sets:
        comp = criterion.layer_loss(pred["pred_logits"], pred["pred_masks"], labels)
        total = total + w.cls * comp["loss_cls"] + w.ce * comp["loss_ce"] + w.dice * comp["loss_dice"]
        for k in parts:
            parts[k] = parts[k] + comp[k]
    parts["loss"] = total
    return total, parts
