"""End-to-end runs: augmentation, meta-learning, retraining, evaluation.

Also the ablation grid. Variants that share a meta-learning configuration
reuse one trained model, so the FDRT rows continue from exactly the weights
their non-FDRT counterparts were evaluated on.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .augmentation import augment_with, sample_bezier
from .backbone import SegModel, get_params, set_params
from .config import TrainConfig
from .data import DomainDataset, ScenarioDomain
from .fdrt import run_fdrt, score_dataset
from .meta_loop import DomainTensors, EpochState, run_metastyle_epoch, torch_dtype

log = logging.getLogger(__name__)


@dataclass
class TrainingData:
    train: list[DomainDataset]  # source first, then augmented copies
    val: list[DomainDataset]
    source_test: DomainDataset
    targets: list[DomainDataset]  # held-out target test splits


def prepare_domains(scenario: list[ScenarioDomain], cfg: TrainConfig, seed: int) -> TrainingData:
    """Augmented training/validation domains from the source; targets stay unseen."""
    src = scenario[0]
    rng = np.random.default_rng([seed, 1])
    curves = [sample_bezier(rng, cfg.strength) for _ in range(cfg.num_aug_domains)]
    return TrainingData(
        train=[src.train] + augment_with(src.train, curves),
        val=[src.val] + augment_with(src.val, curves),
        source_test=src.test,
        targets=[d.test for d in scenario[1:]],
    )


@dataclass
class RunResult:
    model: SegModel
    state: EpochState
    records: list = field(default_factory=list)
    fdrt_history: list = field(default_factory=list)
    seconds: float = 0.0


def new_model(cfg: TrainConfig, num_classes: int, seed: int) -> SegModel:
    torch.manual_seed(seed)
    return SegModel(num_classes, cfg.depth, cfg.base_channels).to(torch_dtype(cfg))


def meta_train(cfg: TrainConfig, data: TrainingData, seed: int, epochs: int | None = None,
               on_epoch=None) -> RunResult:
    """Meta-learning from a fresh model. ``on_epoch(state, model, rows)`` runs after each epoch."""
    start = time.perf_counter()
    model = new_model(cfg, data.train[0].num_classes, seed)
    params = get_params(model)
    state = EpochState(rng=np.random.default_rng([seed, 2]))
    tensors = [DomainTensors(d, torch_dtype(cfg)) for d in data.train]
    records = []
    for _ in range(cfg.epochs_meta if epochs is None else epochs):
        params, state, rows = run_metastyle_epoch(model, params, tensors, state, cfg)
        records.extend(rows)
        if on_epoch is not None:
            set_params(model, params)
            on_epoch(state, model, rows)
    set_params(model, params)
    return RunResult(model, state, records, seconds=time.perf_counter() - start)


def retrain(result: RunResult, cfg: TrainConfig, data: TrainingData, seed: int) -> RunResult:
    """FDRT rounds on a copy of ``result``; meta epochs inside rounds continue its state."""
    start = time.perf_counter()
    model = copy.deepcopy(result.model)
    state = copy.deepcopy(result.state)
    tensors = [DomainTensors(d, torch_dtype(cfg)) for d in data.train]
    records = list(result.records)

    def meta_epoch(m):
        params = get_params(m)
        for _ in range(cfg.fdrt_meta_epochs):
            params, _, rows = run_metastyle_epoch(m, params, tensors, state, cfg)
            records.extend(rows)
        set_params(m, params)

    history = []
    run_fdrt(model, data.train, data.val, cfg, meta_epoch, np.random.default_rng([seed, 3]), history)
    return RunResult(model, state, records, history, result.seconds + time.perf_counter() - start)


def train(cfg: TrainConfig, data: TrainingData, seed: int) -> RunResult:
    result = meta_train(cfg, data, seed)
    if cfg.fdrt:
        result = retrain(result, cfg, data, seed)
    return result


def evaluate(model: SegModel, datasets: list[DomainDataset], with_hd: bool = True) -> list[dict]:
    rows = []
    for ds in datasets:
        dice, hd = score_dataset(model, ds, with_hd)
        rows.append({"domain": ds.name or str(ds.domain_id), "dice": float(dice.mean()),
                     "hd": float(hd.mean()) if hd is not None else float("nan"), "n": len(ds)})
    return rows


def target_dice(model: SegModel, data: TrainingData) -> float:
    return float(np.mean([r["dice"] for r in evaluate(model, data.targets, with_hd=False)]))


# Desk-scale settings for the ablation benchmark (single CPU core, minutes per variant).
# Plain SGD fast enough for 12 epochs collapses once style recall is on, so the
# meta steps use Adam at small rates here.
BENCHMARK = dict(
    base_channels=8, epochs_meta=12, meta_optimizer="adam", gamma=1e-3, beta=5e-4, lr_decay_every=4,
    max_rounds=1, epochs_fdrt=20, eta=1e-3,
)

# --- ablation grid ------------------------------------------------------------

TABLE3 = [
    ("Meta-Base", dict(mka=False, metastyle=False, fdrt=False)),
    ("Variant 1", dict(mka=False, metastyle=True, fdrt=False)),
    ("Variant 2", dict(mka=False, metastyle=False, fdrt=True)),
    ("Variant 3", dict(mka=False, metastyle=True, fdrt=True)),
    ("Variant 4", dict(mka=True, metastyle=False, fdrt=False)),
    ("Variant 5", dict(mka=True, metastyle=True, fdrt=False)),
    ("Variant 6", dict(mka=True, metastyle=False, fdrt=True)),
    ("FGML-DG", dict(mka=True, metastyle=True, fdrt=True)),
]

TABLE4 = [
    ("FGML-DG w/o L_cons + L_align", dict(l_align=False, l_cons=False)),
    ("FGML-DG w/o L_align", dict(l_align=False, l_cons=True)),
    ("FGML-DG w/o L_cons", dict(l_align=True, l_cons=False)),
    ("FGML-DG", dict(l_align=True, l_cons=True)),
]


def _meta_key(cfg: TrainConfig) -> tuple:
    mka = cfg.mka and (cfg.l_align or cfg.l_cons)
    return (mka, cfg.metastyle, cfg.l_align if mka else None, cfg.l_cons if mka else None)


class AblationRunner:
    """Runs variants, sharing meta-learning between rows that differ only in FDRT."""

    def __init__(self, base: TrainConfig, data: TrainingData, seed: int):
        self.base, self.data, self.seed = base, data, seed
        self._meta: dict[tuple, RunResult] = {}
        self._final: dict[tuple, tuple[RunResult, list[dict]]] = {}

    def run(self, **toggles) -> tuple[RunResult, list[dict]]:
        cfg = self.base.replace(**toggles)
        key = _meta_key(cfg) + (cfg.fdrt,)
        if key in self._final:
            return self._final[key]
        mkey = _meta_key(cfg)
        if mkey not in self._meta:
            log.info("meta-training %s", mkey)
            self._meta[mkey] = meta_train(cfg, self.data, self.seed)
        result = self._meta[mkey]
        if cfg.fdrt:
            log.info("retraining %s", mkey)
            result = retrain(result, cfg, self.data, self.seed)
        rows = evaluate(result.model, self.data.targets)
        self._final[key] = (result, rows)
        return result, rows


def summarize(rows: list[dict]) -> tuple[float, float]:
    return float(np.mean([r["dice"] for r in rows])), float(np.mean([r["hd"] for r in rows]))


def run_ablation(base: TrainConfig, data: TrainingData, seed: int) -> list[dict]:
    """Rows for both ablation tables: label, table, toggles, target Dice / HD."""
    runner = AblationRunner(base, data, seed)
    out = []
    for label, toggles in TABLE3:
        _, rows = runner.run(**toggles)
        dice, hd = summarize(rows)
        out.append({"table": 3, "label": label, **toggles, "l_align": True, "l_cons": True, "dice": dice, "hd": hd})
    for label, toggles in TABLE4:
        _, rows = runner.run(mka=True, metastyle=True, fdrt=True, **toggles)
        dice, hd = summarize(rows)
        out.append({"table": 4, "label": label, "mka": True, "metastyle": True, "fdrt": True, **toggles,
                    "dice": dice, "hd": hd})
    return out
