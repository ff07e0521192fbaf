"""Per-channel feature statistics used as a domain's "style".

Feature maps are torch tensors shaped (B, C, H, W). Domain summaries
(:class:`StyleStats`) hold float64 numpy vectors so they can be stored,
mixed and serialized independently of the autograd graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError, DimensionError, RangeError


@dataclass(frozen=True)
class StyleStats:
    mean: np.ndarray
    std: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DimensionError(f"mean has {mean.size} channels, std has {std.size}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise DataError("style statistics must be finite")
        if np.any(std < 0):
            raise DataError("standard deviations must be non-negative")
        if int(self.count) < 0:
            raise DataError("count must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "count", int(self.count))

    @property
    def channels(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class StyleRecallConfig:
    alpha: float = 0.5
    epsilon: float = 1e-5
    sensitivity: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise RangeError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise RangeError(f"epsilon must be positive, got {self.epsilon}")
        if not self.sensitivity > 0:
            raise RangeError(f"sensitivity must be positive, got {self.sensitivity}")


def _check_feature_map(F: torch.Tensor) -> None:
    if F.dim() != 4 or min(F.shape) < 1:
        raise DimensionError(f"expected a non-empty (B, C, H, W) tensor, got shape {tuple(F.shape)}")
    if not torch.isfinite(F).all():
        raise DataError("feature map contains non-finite values")


def instance_stats(F: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Spatial mean and population std per (instance, channel), both (B, C).

    Differentiable; no epsilon is added here.
    """
    mu = F.mean(dim=(2, 3))
    sigma = F.var(dim=(2, 3), unbiased=False).sqrt()
    return mu, sigma


def compute_style_stats(F: torch.Tensor) -> StyleStats:
    """Domain summary of a feature batch: instance stats averaged over B."""
    _check_feature_map(F)
    with torch.no_grad():
        mu, sigma = instance_stats(F.detach().to(torch.float64))
    return StyleStats(mu.mean(0).numpy(), sigma.mean(0).numpy(), F.shape[0])


def mix_styles(current: StyleStats, old: StyleStats, alpha: float) -> StyleStats:
    if current.channels != old.channels:
        raise DimensionError(f"cannot mix {current.channels}-channel and {old.channels}-channel stats")
    if not 0.0 <= alpha <= 1.0:
        raise RangeError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return current
    if alpha == 0.0:
        return StyleStats(old.mean, old.std, current.count)
    return StyleStats(
        alpha * current.mean + (1.0 - alpha) * old.mean,
        alpha * current.std + (1.0 - alpha) * old.std,
        current.count,
    )


def recall_normalize(F: torch.Tensor, mixed: StyleStats, cfg: StyleRecallConfig) -> torch.Tensor:
    """Re-normalize each instance-channel of ``F`` to the mixed statistics."""
    if F.dim() != 4:
        raise DimensionError(f"expected a (B, C, H, W) tensor, got shape {tuple(F.shape)}")
    if mixed.channels != F.shape[1]:
        raise DimensionError(f"style has {mixed.channels} channels, feature map has {F.shape[1]}")
    mu, sigma = instance_stats(F)
    target_mu = torch.as_tensor(mixed.mean, dtype=F.dtype, device=F.device).view(1, -1, 1, 1)
    target_sigma = torch.as_tensor(mixed.std, dtype=F.dtype, device=F.device).view(1, -1, 1, 1)
    normed = (F - mu[:, :, None, None]) / (sigma[:, :, None, None] + cfg.epsilon)
    return normed * target_sigma + target_mu


def style_delta(src: StyleStats, aug: StyleStats, sensitivity: float) -> float:
    """Log-compressed offset between two styles; zero iff they coincide."""
    if src.channels != aug.channels:
        raise DimensionError(f"cannot compare {src.channels}-channel and {aug.channels}-channel stats")
    if not sensitivity > 0:
        raise RangeError(f"sensitivity must be positive, got {sensitivity}")
    mean_gap = float(np.mean(np.abs(src.mean - aug.mean)))
    std_gap = float(np.mean(np.abs(src.std - aug.std)))
    return math.log1p(mean_gap * sensitivity) + math.log1p(std_gap * sensitivity)


_BELOW_ONE = math.nextafter(1.0, 0.0)


def dynamic_weight(delta: float) -> float:
    """``1 - exp(-delta)``, held strictly below 1 even where it would round up."""
    if not delta >= 0:
        raise RangeError(f"style offset must be non-negative, got {delta}")
    return min(-math.expm1(-delta), _BELOW_ONE)
