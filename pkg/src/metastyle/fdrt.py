"""Feedback-driven retraining.

Per-domain validation Dice is turned into a sampling proportion
``1 - exp(log10(dice))``; each domain then contributes
``ceil(proportion * |D|)`` samples per retraining epoch. Rounds repeat until
mean validation Dice stops improving, and the best checkpoint seen (including
the input model) is returned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import SegModel, forward, get_params, set_params
from .config import TrainConfig
from .data import DomainDataset
from .errors import ConfigError, NumericError
from .losses import dice_loss
from .metrics import per_class_scores

DICE_FLOOR = 1e-3
FDRT_COLUMNS = ("round", "domain", "dice", "gap", "samples", "mean_dice_after")


@dataclass(frozen=True)
class DomainScore:
    domain_id: int
    dice: float
    proportion: float


def _dtype_of(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def predict_labels(model: SegModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    dtype = _dtype_of(model)
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size], dtype=dtype)
        _, probs = forward(model, x)
        out.append(probs.argmax(1).numpy())
    return np.concatenate(out)


def score_dataset(model: SegModel, ds: DomainDataset, with_hd: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-image Dice (and Hausdorff distance), averaged over foreground classes."""
    labels = predict_labels(model, ds.images)
    scores = [per_class_scores(labels[i], ds.masks[i], ds.num_classes) for i in range(len(ds))]
    dice = np.array([s[0] for s in scores])
    hd = np.array([s[1] for s in scores]) if with_hd else None
    return dice, hd


def gap(dice: float, log_base: str = "10") -> float:
    """Sampling proportion for one domain; 0 for a perfect score."""
    m = min(max(float(dice), DICE_FLOOR), 1.0)
    if log_base == "10":
        return 0.0 - math.expm1(math.log10(m))
    if log_base == "e":
        return 1.0 - m
    raise ConfigError(f"gap_log_base must be '10' or 'e', got {log_base!r}")


def calculate_gap(scores, log_base: str = "10") -> list[float]:
    """Proportions for a list of Dice values or :class:`DomainScore` objects."""
    return [gap(s.dice if isinstance(s, DomainScore) else s, log_base) for s in scores]


def evaluate_domains(model: SegModel, validation_sets: list[DomainDataset], log_base: str = "10") -> list[DomainScore]:
    if not validation_sets:
        raise ConfigError("no validation sets given")
    out = []
    for ds in validation_sets:
        if len(ds) == 0:
            raise ConfigError(f"validation split for domain {ds.domain_id} is empty")
        dice = float(score_dataset(model, ds)[0].mean())
        out.append(DomainScore(ds.domain_id, dice, gap(dice, log_base)))
    return out


def quota(proportion: float, n: int) -> int:
    return math.ceil(proportion * n) if proportion > 0 else 0


def draw_indices(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """``count`` indices without replacement, re-shuffling once ``n`` is exhausted."""
    chunks, left = [], count
    while left > 0:
        take = min(left, n)
        chunks.append(rng.permutation(n)[:take])
        left -= take
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)


@dataclass
class RetrainLog:
    samples: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    domains_seen: set = field(default_factory=set)


def fdrt_retrain(model: SegModel, datasets: list[DomainDataset], proportions: list[float], cfg: TrainConfig,
                 rng: np.random.Generator | None = None, log: RetrainLog | None = None) -> SegModel:
    """Supervised Dice-loss training on proportion-weighted samples (in place)."""
    if len(datasets) != len(proportions):
        raise ConfigError(f"{len(datasets)} datasets but {len(proportions)} proportions")
    rng = rng or np.random.default_rng(0)
    log = log if log is not None else RetrainLog()
    quotas = [quota(g, len(ds)) for g, ds in zip(proportions, datasets)]
    log.samples = quotas
    if sum(quotas) == 0 or cfg.epochs_fdrt == 0:
        return model
    dtype = _dtype_of(model)
    images = [torch.as_tensor(ds.images, dtype=dtype) for ds in datasets]
    masks = [torch.as_tensor(ds.masks, dtype=torch.long) for ds in datasets]
    params = list(model.parameters())
    if cfg.fdrt_optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.eta)
    else:
        opt = torch.optim.SGD(params, lr=cfg.eta)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay_factor)
    for _ in range(cfg.epochs_fdrt):
        pool = np.concatenate([
            np.stack([np.full(q, t), draw_indices(rng, len(ds), q)], axis=1)
            for t, (q, ds) in enumerate(zip(quotas, datasets)) if q > 0
        ])
        pool = pool[rng.permutation(len(pool))]
        for start in range(0, len(pool), cfg.batch_size):
            chunk = pool[start:start + cfg.batch_size]
            log.domains_seen.update(int(t) for t in chunk[:, 0])
            x = torch.cat([images[t][i:i + 1] for t, i in chunk])
            y = torch.cat([masks[t][i:i + 1] for t, i in chunk])
            _, probs = forward(model, x)
            loss = dice_loss(probs, y)
            if not torch.isfinite(loss):
                raise NumericError("non-finite loss during retraining")
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.losses.append(loss.item())
        sched.step()
    return model


def run_fdrt(model: SegModel, train_sets: list[DomainDataset], val_sets: list[DomainDataset], cfg: TrainConfig,
             meta_epoch=None, rng: np.random.Generator | None = None, history: list | None = None) -> SegModel:
    """Evaluate, retrain, and (optionally) run more meta-learning, for up to ``max_rounds``.

    ``meta_epoch(model)`` runs ``cfg.fdrt_meta_epochs`` meta-learning epochs in
    place. The model comes back holding the best-validation weights seen.
    ``history`` receives one dict per (round, domain).
    """
    rng = rng or np.random.default_rng(0)
    history = history if history is not None else []
    scores = evaluate_domains(model, val_sets, cfg.gap_log_base)
    best_score = float(np.mean([s.dice for s in scores]))
    best_params = get_params(model)
    prev = best_score
    for rnd in range(cfg.max_rounds):
        proportions = [s.proportion for s in scores]
        if all(g == 0 for g in proportions):
            break
        log = RetrainLog()
        fdrt_retrain(model, train_sets, proportions, cfg, rng, log)
        if meta_epoch is not None and cfg.fdrt_meta_epochs > 0:
            meta_epoch(model)
        new_scores = evaluate_domains(model, val_sets, cfg.gap_log_base)
        mean_after = float(np.mean([s.dice for s in new_scores]))
        for s, q in zip(scores, log.samples):
            history.append({"round": rnd, "domain": s.domain_id, "dice": s.dice, "gap": s.proportion,
                            "samples": q, "mean_dice_after": mean_after})
        if mean_after > best_score:
            best_score, best_params = mean_after, get_params(model)
        scores = new_scores
        if mean_after - prev < cfg.plateau_tol:
            break
        prev = mean_after
    set_params(model, best_params)
    return model
