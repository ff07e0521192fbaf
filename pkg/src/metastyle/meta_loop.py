"""Episodic meta-learning with style memory and recall.

Domains are visited in order ``D[0] ... D[T]`` (source first). Each episode
pairs a support batch from ``D[t]`` with a query batch from ``D[t+1]``
(wrapping to ``D[0]``). Meta-train takes a ``gamma`` step on the support loss,
with the previous domain's banked style mixed into the shallow features;
meta-test takes a ``beta`` step on the query segmentation loss at the updated
weights. Gradients are first order: nothing is differentiated through the
inner update.

The alignment and consistency losses compare the support batch with the same
sample indices in a paired domain: the source when ``t > 0``, otherwise an
augmented domain chosen round-robin.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .backbone import SegModel, forward, grads_of, param_update
from .config import TrainConfig
from .data import DomainDataset
from .errors import ConfigError, NumericError
from .style_bank import StyleBank, save_style_bank
from .style_stats import (
    StyleStats,
    compute_style_stats,
    dynamic_weight,
    mix_styles,
    recall_normalize,
    style_delta,
)

LOG_COLUMNS = ("epoch", "domain", "L_total", "L_dice", "L_align", "L_cons", "w", "delta_style", "lr")


@dataclass
class Batch:
    images: torch.Tensor
    masks: torch.Tensor
    domain: int


@dataclass
class Episode:
    support: Batch
    query: Batch
    t: int
    recalled: StyleStats | None = None
    partner: Batch | None = None


@dataclass
class StepRecord:
    L_total: float
    L_dice: float
    L_align: float = 0.0
    L_cons: float = 0.0
    w: float = 0.0
    delta_style: float = 0.0
    support_stats: StyleStats | None = field(default=None, repr=False)


class AdamState:
    """Functional Adam for the meta steps when ``meta_optimizer = adam``."""

    def __init__(self, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads, lr):
        self.t += 1
        out = OrderedDict()
        for k, p in params.items():
            g = grads[k]
            m = self.b1 * self.m.get(k, torch.zeros_like(g)) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, torch.zeros_like(g)) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[k] = p - lr * mhat / (vhat.sqrt() + self.eps)
        return out


def _step(params, grads, lr, adam: AdamState | None):
    if adam is None:
        return param_update(params, grads, lr)
    return adam.step(params, grads, lr)


def _require_grad(params):
    return OrderedDict((k, v.detach().requires_grad_(True)) for k, v in params.items())


def _check(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite {what} loss")


def _inject_at(cfg: TrainConfig) -> str:
    return "input" if cfg.style_source == "input" else "feature"


def support_loss(model: SegModel, params, episode: Episode, cfg: TrainConfig):
    """Total support loss at ``params`` and its record.

    When the episode carries a recalled style, the support batch's own shallow
    statistics are mixed with it and injected before the rest of the forward.
    """
    recall = cfg.recall
    inject_at = _inject_at(cfg)
    sup = episode.support
    captured = {}
    part = episode.partner
    n = sup.images.shape[0]

    def mixer(raw):
        # only the first n rows (the support batch) are banked and re-styled
        if not torch.isfinite(raw).all():
            raise NumericError("non-finite activations at the style hook")
        captured["current"] = compute_style_stats(raw[:n])
        if episode.recalled is None:
            return None
        captured["mixed"] = mix_styles(captured["current"], episode.recalled, recall.alpha)
        restyled = recall_normalize(raw[:n], captured["mixed"], recall)
        return restyled if part is None else torch.cat([restyled, raw[n:]])

    images = sup.images if part is None else torch.cat([sup.images, part.images])
    shallow, probs = forward(model, images, params, mixer, recall, inject_at)
    shallow_s, probs_s = shallow[:n], probs[:n]
    l_dice = losses.dice_loss(probs_s, sup.masks)
    rec = StepRecord(0.0, 0.0, support_stats=captured["current"])
    total = l_dice
    if part is not None:
        shallow_p, probs_p = shallow[n:], probs[n:]
        l_dice = 0.5 * (l_dice + losses.dice_loss(probs_p, part.masks))
        total = l_dice
        if cfg.mka and (cfg.l_align or cfg.l_cons):
            if cfg.style_source == "input":
                sup_view = sup.images
                if "mixed" in captured:
                    sup_view = recall_normalize(sup.images, captured["mixed"], recall)
                part_view = part.images
            else:
                sup_view, part_view = shallow_s, shallow_p
            src, aug = (0, 1) if episode.t == 0 else (1, 0)
            feats, probs, views = (shallow_s, shallow_p), (probs_s, probs_p), (sup_view, part_view)
            rec.delta_style = style_delta(
                compute_style_stats(views[src]), compute_style_stats(views[aug]), recall.sensitivity
            )
            rec.w = dynamic_weight(rec.delta_style)
            zero = l_dice.new_zeros(())
            l_align = zero
            if cfg.l_align:
                l_align = losses.batch_align_loss(
                    losses.feature_embed(feats[src]), losses.feature_embed(feats[aug]), cfg.margin
                )
            l_cons = losses.consistency_loss(probs[src], probs[aug], cfg.cons_reduction) if cfg.l_cons else zero
            total = losses.total_loss(losses.aux_loss(l_cons, l_align, rec.w), l_dice, cfg.lam)
            rec.L_align, rec.L_cons = l_align.item(), l_cons.item()
    rec.L_total, rec.L_dice = total.item(), l_dice.item()
    return total, rec


def meta_train_step(model: SegModel, params, episode: Episode, cfg: TrainConfig, lr: float | None = None,
                    adam: AdamState | None = None):
    """``theta' = theta - gamma * grad(L_total on the support batch)``."""
    lr = cfg.gamma if lr is None else lr
    params = _require_grad(params)
    total, rec = support_loss(model, params, episode, cfg)
    _check(total, "meta-train")
    if lr == 0:
        return OrderedDict((k, v.detach()) for k, v in params.items()), rec
    return _step(params, grads_of(total, params), lr, adam), rec


def query_loss(model: SegModel, params, query: Batch) -> torch.Tensor:
    _, probs = forward(model, query.images, params)
    return losses.dice_loss(probs, query.masks)


def meta_test_step(model: SegModel, params_prime, query: Batch, cfg: TrainConfig, lr: float | None = None,
                   adam: AdamState | None = None):
    """Segmentation-loss step of rate ``beta`` on the query batch at ``theta'``."""
    lr = cfg.beta if lr is None else lr
    params_prime = _require_grad(params_prime)
    loss = query_loss(model, params_prime, query)
    _check(loss, "meta-test")
    if lr == 0:
        return OrderedDict((k, v.detach()) for k, v in params_prime.items()), loss.item()
    return _step(params_prime, grads_of(loss, params_prime), lr, adam), loss.item()


# --- epoch driver -------------------------------------------------------------


class DomainTensors:
    """Torch views of a domain's arrays at the training dtype."""

    def __init__(self, ds: DomainDataset, dtype: torch.dtype):
        self.images = torch.as_tensor(ds.images, dtype=dtype)
        self.masks = torch.as_tensor(ds.masks, dtype=torch.long)
        self.domain = ds.domain_id
        self.n = len(ds)

    def batch(self, idx) -> Batch:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return Batch(self.images[idx], self.masks[idx], self.domain)


def torch_dtype(cfg: TrainConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


@dataclass
class EpochState:
    """Everything that persists between epochs besides the weights."""

    bank: StyleBank = field(default_factory=StyleBank)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    adam_train: AdamState | None = None
    adam_test: AdamState | None = None
    epoch: int = 0
    trajectory: list = field(default_factory=list)


def _batches(perm: np.ndarray, size: int) -> list[np.ndarray]:
    return [perm[i:i + size] for i in range(0, len(perm), size)]


def run_metastyle_epoch(model: SegModel, params, domains: list, state: EpochState, cfg: TrainConfig):
    """One pass over all domains; returns ``(params, state, epoch_records)``.

    ``domains`` are :class:`DomainTensors` (or datasets, converted on the fly),
    ordered source first. Stats are banked under the domain they came from;
    recall at domain ``t`` loads domain ``t - 1``.
    """
    if not domains:
        raise ConfigError("meta-learning needs at least one domain")
    dtype = torch_dtype(cfg)
    domains = [d if isinstance(d, DomainTensors) else DomainTensors(d, dtype) for d in domains]
    if cfg.meta_optimizer == "adam" and state.adam_train is None:
        state.adam_train, state.adam_test = AdamState(), AdamState()
    gamma = cfg.lr_at(cfg.gamma, state.epoch)
    beta = cfg.lr_at(cfg.beta, state.epoch)
    n_dom = len(domains)
    aligned = all(d.n == domains[0].n for d in domains)
    epoch_records = []

    for t, dom in enumerate(domains):
        query_dom = domains[(t + 1) % n_dom]
        recalled = None
        if cfg.metastyle and t > 0:
            recalled = state.bank.entries.get(domains[t - 1].domain)
        sup_batches = _batches(state.rng.permutation(dom.n), cfg.batch_size)
        qry_perm = state.rng.permutation(query_dom.n)
        if len(qry_perm) < dom.n:
            reps = math.ceil(dom.n / len(qry_perm))
            qry_perm = np.concatenate([qry_perm] + [state.rng.permutation(query_dom.n) for _ in range(reps - 1)])
        qry_batches = _batches(qry_perm[:dom.n], cfg.batch_size)

        episodes = []
        for k, idx in enumerate(sup_batches):
            partner = None
            if n_dom > 1 and aligned:
                pdom = domains[0] if t > 0 else domains[1 + k % (n_dom - 1)]
                partner = pdom.batch(idx)
            episodes.append(Episode(dom.batch(idx), query_dom.batch(qry_batches[k]), t, recalled, partner))

        step_records = []
        if cfg.meta_update_mode == "carry_forward":
            for ep in episodes:
                prime, rec = meta_train_step(model, params, ep, cfg, gamma, state.adam_train)
                params, _ = meta_test_step(model, prime, ep.query, cfg, beta, state.adam_test)
                step_records.append(rec)
        else:
            # literal: theta' restarts from the fixed theta for every support batch,
            # then the query loop chains on theta' which becomes the new theta
            prime = params
            for ep in episodes:
                prime, rec = meta_train_step(model, params, ep, cfg, gamma, state.adam_train)
                step_records.append(rec)
            for ep in episodes:
                prime, _ = meta_test_step(model, prime, ep.query, cfg, beta, state.adam_test)
            params = prime
        if cfg.metastyle:
            for rec in step_records:
                state.bank = save_style_bank(state.bank, dom.domain, rec.support_stats)

        row = {"epoch": state.epoch, "domain": dom.domain, "lr": gamma}
        for key in ("L_total", "L_dice", "L_align", "L_cons", "w", "delta_style"):
            row[key] = float(np.mean([getattr(r, key) for r in step_records]))
        epoch_records.append(row)
        state.trajectory.extend(r.L_total for r in step_records)

    state.epoch += 1
    return params, state, epoch_records
