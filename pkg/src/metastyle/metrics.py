"""Dice overlap and Hausdorff distance on binary masks (units: pixels)."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import DimensionError

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_coefficient(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground.

    Pixels beyond the image border count as outside.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~interior


def hausdorff_distance(pred, gt) -> float:
    """Symmetric Hausdorff distance between the two masks' boundary pixels.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    pred, gt = _pair(pred, gt)
    p_any, g_any = pred.any(), gt.any()
    if not p_any and not g_any:
        return 0.0
    if not (p_any and g_any):
        return math.hypot(*pred.shape)
    bp, bg = boundary(pred), boundary(gt)
    # distance from every pixel to the nearest boundary pixel of the other mask
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return float(max(to_g[bp].max(), to_p[bg].max()))


def per_class_scores(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int) -> tuple[float, float]:
    """Mean Dice and mean HD over foreground classes for one label map."""
    dices, hds = [], []
    for k in range(1, num_classes):
        p, g = pred_labels == k, gt_labels == k
        dices.append(dice_coefficient(p, g))
        hds.append(hausdorff_distance(p, g))
    return float(np.mean(dices)), float(np.mean(hds))
