"""BCE + dice losses, the pseudolabel feature constraint and its variants.

Score maps are probabilities (``(B, 1, H, W)`` binary, ``(B, K, H, W)``
multiclass). Region-restricted losses take a boolean ``mask`` of the same
spatial shape; a loss over an empty region is 0.
"""
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch

from .exceptions import ShapeError
from .network import ModelOutputs

EPS = 1e-7
SEG_WEIGHT = 0.2
CONTRASTIVE_WEIGHT = 0.2
MULTICLASS_WEIGHTS = (0.5, 0.5, 0.2)  # change, changed-area seg, unchanged-area SSL


def _match(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if target.shape != pred.shape:
        if target.dim() == pred.dim() - 1 and pred.shape[1] == 1 and target.shape == pred.shape[:1] + pred.shape[2:]:
            target = target.unsqueeze(1)
        else:
            raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return target.to(pred.dtype)


def _region(mask: Optional[torch.Tensor], like: torch.Tensor) -> Optional[torch.Tensor]:
    if mask is None:
        return None
    mask = mask.bool()
    if mask.dim() == like.dim() - 1:
        mask = mask.unsqueeze(1)
    if mask.shape[0] != like.shape[0] or mask.shape[2:] != like.shape[2:]:
        raise ShapeError(f"region mask {tuple(mask.shape)} does not match {tuple(like.shape)}")
    return mask.expand_as(like)


def bce_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean binary cross-entropy, predictions clamped to [1e-7, 1 - 1e-7]."""
    target = _match(pred, target)
    p = pred.clamp(EPS, 1 - EPS)
    nll = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    region = _region(mask, pred)
    if region is None:
        return nll.mean()
    n = region.sum()
    if n == 0:
        return pred.sum() * 0
    return (nll * region).sum() / n


def dice_loss(
    pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None, smooth: float = 1.0
) -> torch.Tensor:
    """``1 - (2 sum(p*t) + s) / (sum(p) + sum(t) + s)`` over the whole batch."""
    target = _match(pred, target)
    region = _region(mask, pred)
    if region is not None:
        if not region.any():
            return pred.sum() * 0
        pred = pred * region
        target = target * region
    inter = (pred * target).sum()
    return 1 - (2 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def bce_dice(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return bce_loss(pred, target, mask) + dice_loss(pred, target, mask)


def ce_dice(
    probs: torch.Tensor, labels: torch.Tensor, mask: Optional[torch.Tensor] = None, smooth: float = 1.0
) -> torch.Tensor:
    """Cross-entropy plus class-averaged dice for ``(B, K, H, W)`` class distributions.

    ``labels`` holds class indices ``(B, H, W)``; pixels outside ``mask`` are ignored.
    """
    b, k, h, w = probs.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"labels {tuple(labels.shape)} do not match probabilities {tuple(probs.shape)}")
    region = torch.ones_like(labels, dtype=torch.bool) if mask is None else mask.bool().reshape(b, h, w)
    n = region.sum()
    if n == 0:
        return probs.sum() * 0
    safe = torch.where(region, labels, torch.zeros_like(labels)).long()
    onehot = torch.zeros_like(probs).scatter_(1, safe.unsqueeze(1), 1.0)
    r = region.unsqueeze(1).to(probs.dtype)
    logp = torch.log(probs.clamp(EPS, 1.0))
    ce = -(onehot * logp * r).sum() / n
    p, t = probs * r, onehot * r
    inter = (p * t).sum(dim=(0, 2, 3))
    dice = 1 - (2 * inter + smooth) / (p.sum(dim=(0, 2, 3)) + t.sum(dim=(0, 2, 3)) + smooth)
    return ce + dice.mean()


@dataclass
class PseudoLabelPair:
    p1: torch.Tensor
    p2: torch.Tensor
    changed: torch.Tensor  # boolean, True on changed pixels

    @property
    def unchanged(self) -> torch.Tensor:
        return ~self.changed


@dataclass
class LossReport:
    total: torch.Tensor
    components: Dict[str, torch.Tensor] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        out = {"total": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.components.items()})
        return out


def threshold(scores: torch.Tensor) -> torch.Tensor:
    """Binary decision with ``score >= 0.5`` mapping to 1."""
    return (scores >= 0.5).to(scores.dtype)


def _binary_mask(change_label: torch.Tensor) -> torch.Tensor:
    if not torch.all((change_label == 0) | (change_label == 1)):
        raise ValueError("change label must be binary so that changed/unchanged regions partition the image")
    return change_label.bool()


def make_pseudolabels(outputs: ModelOutputs, change_label: torch.Tensor) -> PseudoLabelPair:
    """Detached pseudolabels from the two segmentation branches.

    Binary heads are thresholded at 0.5; multiclass heads give their argmax.
    """
    if not outputs.has_seg:
        raise ValueError("pseudolabels need both segmentation heads")
    with torch.no_grad():
        if outputs.seg1.shape[1] == 1:
            p1, p2 = threshold(outputs.seg1), threshold(outputs.seg2)
        else:
            p1, p2 = outputs.seg1.argmax(1), outputs.seg2.argmax(1)
    changed = _binary_mask(change_label)
    if changed.dim() == 3:
        changed = changed.unsqueeze(1)
    return PseudoLabelPair(p1.detach(), p2.detach(), changed)


def ssl_aux_loss(outputs: ModelOutputs, pl: PseudoLabelPair) -> Tuple[torch.Tensor, torch.Tensor]:
    """Cross-branch losses: agree with the other branch on unchanged pixels,
    disagree (inverted pseudolabel) on changed pixels."""
    s1, s2 = outputs.seg1, outputs.seg2
    if s1.shape[1] != 1:
        raise ValueError("ssl_aux_loss is the binary variant; use multiclass_ssl_loss")
    u, c = pl.unchanged, pl.changed
    l1 = bce_dice(s1, pl.p2, u) + bce_dice(s1, 1 - pl.p2, c)
    l2 = bce_dice(s2, pl.p1, u) + bce_dice(s2, 1 - pl.p1, c)
    return l1, l2


def total_loss_binary(
    outputs: ModelOutputs,
    change_label: torch.Tensor,
    seg_weight: float = SEG_WEIGHT,
    use_aux: bool = True,
) -> LossReport:
    l_change = bce_dice(outputs.change, change_label)
    if not (use_aux and outputs.has_seg):
        return LossReport(l_change, {"change": l_change})
    l1, l2 = ssl_aux_loss(outputs, make_pseudolabels(outputs, change_label))
    total = l_change + seg_weight * l1 + seg_weight * l2
    return LossReport(total, {"change": l_change, "seg1": l1, "seg2": l2})


def masked_mse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    region = _region(mask, a)
    n = region.sum()
    if n == 0:
        return a.sum() * 0
    return (((a - b) ** 2) * region).sum() / n


def contrastive_aux_loss(outputs: ModelOutputs, change_label: torch.Tensor) -> torch.Tensor:
    """``MSE(S1, S2 | unchanged) - MSE(S1, S2 | changed)``; lies in [-1, 1]."""
    if not outputs.has_seg:
        raise ValueError("contrastive loss needs both segmentation heads")
    changed = _binary_mask(change_label)
    if changed.dim() == 3:
        changed = changed.unsqueeze(1)
    return masked_mse(outputs.seg1, outputs.seg2, ~changed) - masked_mse(outputs.seg1, outputs.seg2, changed)


def total_loss_contrastive(
    outputs: ModelOutputs, change_label: torch.Tensor, aux_weight: float = CONTRASTIVE_WEIGHT, use_aux: bool = True
) -> LossReport:
    l_change = bce_dice(outputs.change, change_label)
    if not (use_aux and outputs.has_seg):
        return LossReport(l_change, {"change": l_change})
    l_aux = contrastive_aux_loss(outputs, change_label)
    return LossReport(l_change + aux_weight * l_aux, {"change": l_change, "aux": l_aux})


def multiclass_ssl_loss(
    outputs: ModelOutputs,
    change_label: torch.Tensor,
    labels1: torch.Tensor,
    labels2: torch.Tensor,
    weights: Tuple[float, float, float] = MULTICLASS_WEIGHTS,
    use_aux: bool = True,
) -> LossReport:
    """Supervised class loss on changed pixels plus cross-branch argmax
    pseudolabels on unchanged pixels (both terms over the unchanged area).

    ``labels1``/``labels2`` are ``(B, H, W)`` class maps, only meaningful on
    changed pixels; values elsewhere are ignored.
    """
    if not outputs.has_seg or outputs.seg1.shape[1] < 2:
        raise ValueError("multiclass_ssl_loss needs multiclass segmentation heads")
    changed = _binary_mask(change_label)
    if changed.dim() == 4:
        changed = changed[:, 0]
    unchanged = ~changed
    k = outputs.seg1.shape[1]
    for lab in (labels1, labels2):
        stray = unchanged & (lab >= 0) & (lab < k) & (lab != 0)
        if bool(stray.any()):
            warnings.warn("class labels found on unchanged pixels; they are masked out", stacklevel=2)
            break
    w_change, w_c, w_u = weights
    l_change = bce_dice(outputs.change, change_label)
    l_c = ce_dice(outputs.seg1, labels1, changed) + ce_dice(outputs.seg2, labels2, changed)
    components = {"change": l_change, "l_c": l_c}
    total = w_change * l_change + w_c * l_c
    if use_aux:
        pl = make_pseudolabels(outputs, change_label)
        l_u = ce_dice(outputs.seg1, pl.p2, unchanged) + ce_dice(outputs.seg2, pl.p1, unchanged)
        components["l_u"] = l_u
        total = total + w_u * l_u
    return LossReport(total, components)
