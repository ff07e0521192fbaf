"""Training objectives: contrastive style alignment, prediction consistency,
soft Dice, and their weighted composition."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import DataError, DimensionError, RangeError

DICE_SMOOTH = 1e-5


def feature_embed(features: torch.Tensor) -> torch.Tensor:
    """Global-average-pool (B, C, H, W) features and L2-normalize each row.

    An all-zero pooled vector maps to the first basis vector.
    """
    pooled = features.mean(dim=(2, 3))
    norm = pooled.norm(dim=1, keepdim=True)
    zero = norm.squeeze(1) == 0
    basis = torch.zeros_like(pooled)
    basis[:, 0] = 1.0
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return torch.where(zero[:, None], basis, pooled / safe)


def pair_labels(n: int, dtype=torch.float64) -> torch.Tensor:
    """Label matrix for all (source i, augmented j) pairs: 1 on the diagonal."""
    return torch.eye(n, dtype=dtype)


def align_loss(src: torch.Tensor, aug: torch.Tensor, labels: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """Contrastive margin loss averaged over paired rows of ``src`` and ``aug``.

    Rows are embedding vectors; ``labels`` is 1 for similar pairs, 0 otherwise.
    """
    if src.shape != aug.shape or src.dim() != 2 or labels.shape != src.shape[:1]:
        raise DimensionError(f"pair batch shapes disagree: {tuple(src.shape)}, {tuple(aug.shape)}, {tuple(labels.shape)}")
    if src.shape[0] == 0:
        raise DataError("align_loss needs at least one pair")
    if not margin > 0:
        raise RangeError(f"margin must be positive, got {margin}")
    labels = labels.to(src.dtype)
    sq = ((src - aug) ** 2).sum(dim=1)
    # sqrt has an infinite derivative at 0; positives only need the squared distance
    skip = (labels > 0) | (sq == 0)
    dist = torch.where(skip & (sq == 0), torch.zeros_like(sq), torch.sqrt(torch.where(skip, torch.ones_like(sq), sq)))
    hinge = torch.clamp(margin - dist, min=0.0) ** 2
    return torch.mean(labels * sq + (1.0 - labels) * hinge)


def batch_align_loss(src_emb: torch.Tensor, aug_emb: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """Alignment loss over every (i, j) pairing within a batch.

    Pair (i, i) is positive; (i, j != i) is negative.
    """
    n = src_emb.shape[0]
    src = src_emb.repeat_interleave(n, dim=0)
    aug = aug_emb.repeat(n, 1)
    labels = pair_labels(n, src_emb.dtype).reshape(-1)
    return align_loss(src, aug, labels, margin)


def consistency_loss(p_src: torch.Tensor, p_aug: torch.Tensor, reduction: str = "pixel_mean") -> torch.Tensor:
    """Mean over instances of the squared L2 distance between predictions.

    ``reduction="sum"`` uses the distance between the flattened maps, which
    grows with H * W; ``"pixel_mean"`` divides it by the pixel count.
    Both agree on a single-pixel map.
    """
    if p_src.shape != p_aug.shape:
        raise DimensionError(f"prediction shapes differ: {tuple(p_src.shape)} vs {tuple(p_aug.shape)}")
    if reduction not in ("pixel_mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    diff = (p_src - p_aug).reshape(p_src.shape[0], -1)
    per_instance = (diff ** 2).sum(dim=1)
    if reduction == "pixel_mean":
        per_instance = per_instance / (p_src[0, 0].numel())
    return per_instance.mean()


def one_hot_masks(target: torch.Tensor, num_classes: int, dtype=torch.float64) -> torch.Tensor:
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_classes):
        raise DataError(f"mask labels must lie in [0, {num_classes})")
    return F.one_hot(target.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - mean soft Dice over foreground classes.

    ``pred`` is (B, K, H, W) probabilities, ``target`` is (B, H, W) labels.
    Sums run over the whole batch.
    """
    if pred.dim() != 4 or target.shape != (pred.shape[0],) + tuple(pred.shape[2:]):
        raise DimensionError(f"prediction {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    k = pred.shape[1]
    onehot = one_hot_masks(target, k, pred.dtype)
    p, t = pred[:, 1:], onehot[:, 1:]
    inter = (p * t).sum(dim=(0, 2, 3))
    denom = p.sum(dim=(0, 2, 3)) + t.sum(dim=(0, 2, 3))
    return 1.0 - ((2.0 * inter + smooth) / (denom + smooth)).mean()


def aux_loss(l_cons, l_align, w: float):
    if not 0.0 <= w < 1.0:
        raise RangeError(f"dynamic weight must lie in [0, 1), got {w}")
    return (1.0 - w) * l_cons + w * l_align


def total_loss(l_aux, l_dice, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise RangeError(f"lambda must lie in [0, 1], got {lam}")
    return lam * l_aux + (1.0 - lam) * l_dice
