"""Acceptance suite: one reported line per criterion (see the summary at the end of the run).

Criteria 6 and 7 train the ablation variants on the synthetic brats-like
scenario and take several minutes; they are marked ``slow`` but are part of
the default run.
"""
import time

import mpmath
import numpy as np
import pytest
import torch

from gradcheck import fd_check, rel_err
from metastyle import losses
from metastyle.backbone import SegModel, forward, get_params
from metastyle.config import TrainConfig
from metastyle.data import make_scenario
from metastyle.experiment import BENCHMARK, AblationRunner, _meta_key, prepare_domains, summarize
from metastyle.fdrt import evaluate_domains, gap
from metastyle.meta_loop import EpochState, run_metastyle_epoch
from metastyle.metrics import dice_coefficient, hausdorff_distance
from metastyle.style_bank import StyleBank, deserialize, serialize
from metastyle.style_stats import (
    StyleRecallConfig,
    StyleStats,
    compute_style_stats,
    dynamic_weight,
    instance_stats,
    recall_normalize,
    style_delta,
)
from test_metrics import brute_dice, brute_hd

RESULTS = {}


def report(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, detail


# --- 1 -------------------------------------------------------------------------


def test_criterion_1_formula_oracles():
    mpmath.mp.dps = 50
    src = StyleStats([0.0], [1.0], 1)
    aug = StyleStats([0.1], [1.2], 1)
    w = dynamic_weight(style_delta(src, aug, 10.0))
    w_err = abs(w - 5 / 6)

    def oracle(m):
        return float(1 - mpmath.exp(mpmath.log10(mpmath.mpf(m))))

    got = {m: gap(m) for m in (1.0, 0.1, 0.5)}
    errs = {m: abs(got[m] - oracle(m)) for m in got}
    stated = {1.0: 0.0, 0.1: 0.632121, 0.5: 0.260241}
    ok = w_err < 1e-9 and all(e < 1e-6 for e in errs.values()) and got[1.0] == 0.0
    ok = ok and abs(got[0.1] - stated[0.1]) < 1e-6
    report(1, ok, f"|w-5/6|={w_err:.1e}; gap(1)={got[1.0]}, gap(0.1)={got[0.1]:.9f}, "
                  f"gap(0.5)={got[0.5]:.9f} (50-digit oracle {oracle(0.5):.9f}; "
                  f"the listed 0.260241 differs from the oracle by {abs(oracle(0.5) - 0.260241):.2e})")


@pytest.mark.xfail(strict=True, reason="0.260241 is not the value of 1 - exp(log10(0.5)); oracle gives 0.259944")
def test_listed_half_dice_constant():
    assert abs(gap(0.5) - 0.260241) < 1e-6


# --- 2 -------------------------------------------------------------------------


def test_criterion_2_recall_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    cfg = StyleRecallConfig(epsilon=1e-5)
    worst_stat, worst_drift = 0.0, 0.0
    for _ in range(100):
        b, c = rng.integers(1, 5), rng.integers(1, 9)
        F = torch.as_tensor(rng.normal(rng.normal(0, 2), rng.uniform(0.2, 3), size=(b, c, 16, 16)))
        target = StyleStats(rng.normal(0, 2, c), rng.uniform(0.1, 3, c), 1)
        mu, sigma = instance_stats(recall_normalize(F, target, cfg))
        worst_stat = max(worst_stat, (mu - torch.as_tensor(target.mean)).abs().max().item(),
                         (sigma - torch.as_tensor(target.std)).abs().max().item())
        same = torch.cat([recall_normalize(F[i:i + 1], compute_style_stats(F[i:i + 1]), cfg) for i in range(b)])
        worst_drift = max(worst_drift, ((same - F).norm() / F.norm()).item())

    # identity injection through the network
    torch.manual_seed(0)
    model = SegModel(2, 3, 8).double()
    x = torch.as_tensor(rng.uniform(size=(4, 1, 32, 32)))
    _, plain = forward(model, x)

    def own(h):
        return torch.cat([recall_normalize(h[i:i + 1], compute_style_stats(h[i:i + 1]), cfg) for i in range(len(h))])

    _, injected = forward(model, x, style_override=own, recall_cfg=cfg)
    net_drift = ((injected - plain).norm() / plain.norm()).item()
    secs = time.perf_counter() - start
    ok = worst_stat < 1e-3 and worst_drift < 1e-4 and net_drift < 1e-4 and secs < 10
    report(2, ok, f"max stat error {worst_stat:.1e}; identity drift features {worst_drift:.1e}, "
                  f"network {net_drift:.1e}; {secs:.1f}s")


# --- 3 -------------------------------------------------------------------------


def test_criterion_3_gradient_suite():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(3)
    rng = np.random.default_rng(3)
    worst = {}

    def check(name, fn, x, tol):
        coords = rng.choice(x.numel(), min(20, x.numel()), replace=False)
        a, n = fd_check(fn, x, coords)
        worst[name] = (float(rel_err(a, n, 1e-6).max()), tol)

    e1 = torch.randn(4, 6, dtype=torch.float64, generator=g)
    e2 = torch.randn(4, 6, dtype=torch.float64, generator=g)
    check("align", lambda z: losses.batch_align_loss(losses.feature_embed(z.reshape(4, 6, 1, 1)), e2 / e2.norm(dim=1, keepdim=True)), e1, 1e-4)
    p2 = torch.softmax(torch.randn(2, 3, 5, 5, dtype=torch.float64, generator=g), 1)
    logits = torch.randn(2, 3, 5, 5, dtype=torch.float64, generator=g)
    check("consistency", lambda z: losses.consistency_loss(torch.softmax(z, 1), p2), logits, 1e-4)
    y = torch.randint(0, 3, (2, 5, 5), generator=g)
    check("dice", lambda z: losses.dice_loss(torch.softmax(z, 1), y), logits, 1e-4)

    torch.manual_seed(3)
    model = SegModel(2, 3, 4).double()
    params = get_params(model)
    names = list(params)
    flat0 = torch.cat([params[k].reshape(-1) for k in names])
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64, generator=g)
    xa = 1 - x**2
    yy = (x[:, 0] > 0.5).long()

    def total(flat):
        p, i = {}, 0
        for k in names:
            p[k] = flat[i:i + params[k].numel()].reshape(params[k].shape)
            i += params[k].numel()
        s1, q1 = forward(model, x, p)
        s2, q2 = forward(model, xa, p)
        aux = losses.aux_loss(losses.consistency_loss(q1, q2),
                              losses.batch_align_loss(losses.feature_embed(s1), losses.feature_embed(s2)), 0.6)
        return losses.total_loss(aux, losses.dice_loss(q1, yy), 0.5)

    check("end-to-end", total, flat0, 1e-3)
    secs = time.perf_counter() - start
    ok = all(err < tol for err, tol in worst.values()) and secs < 60
    report(3, ok, ", ".join(f"{k} {v[0]:.1e}" for k, v in worst.items()) + f" (max rel err); {secs:.1f}s")


# --- 4 -------------------------------------------------------------------------


def random_mask(rng, size=64):
    yy, xx = np.mgrid[0:size, 0:size]
    m = np.zeros((size, size), bool)
    for _ in range(rng.integers(0, 4)):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(2, size / 3, 2)
        m |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    return m ^ (rng.uniform(size=(size, size)) < rng.choice([0.0, 0.01, 0.05]))


def test_criterion_4_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(200):
        p, g = random_mask(rng), random_mask(rng)
        if dice_coefficient(p, g) != brute_dice(p, g) or hausdorff_distance(p, g) != brute_hd(p, g):
            mismatches += 1
    secs = time.perf_counter() - start
    report(4, mismatches == 0 and secs < 60, f"{mismatches}/200 pairs differ from brute force; {secs:.1f}s")


# --- 5 -------------------------------------------------------------------------


def test_criterion_5_bank_and_determinism():
    rng = np.random.default_rng(5)
    roundtrips = 0
    for _ in range(50):
        c = int(rng.integers(1, 9))
        bank = StyleBank({int(i): StyleStats(rng.normal(size=c), rng.uniform(0, 3, c), int(rng.integers(1, 1000)))
                          for i in rng.choice(1000, rng.integers(0, 6), replace=False)})
        blob = serialize(bank)
        back = deserialize(blob)
        roundtrips += back == bank and serialize(back) == blob

    scenario = make_scenario("brats-like", n_train=16, n_val=4, n_test=4, size=16)
    cfg = TrainConfig(dtype="float64", depth=2, base_channels=4, batch_size=4, gamma=0.05, beta=0.02,
                      num_aug_domains=2)
    data = prepare_domains(scenario, cfg, 0)

    def trajectory():
        torch.manual_seed(0)
        model = SegModel(2, 2, 4).double()
        params, state = get_params(model), EpochState(rng=np.random.default_rng(0))
        while len(state.trajectory) < 50:
            params, state, _ = run_metastyle_epoch(model, params, data.train, state, cfg)
        return np.array(state.trajectory[:50])

    a, b = trajectory(), trajectory()
    same = a.tobytes() == b.tobytes()
    report(5, roundtrips == 50 and same, f"{roundtrips}/50 banks round-trip bitwise; 50-step float64 "
                                         f"trajectories {'identical' if same else 'differ'}")


# --- 6 and 7: synthetic benchmark -------------------------------------------


@pytest.fixture(scope="module")
def bench():
    cfg = TrainConfig().replace(**BENCHMARK)
    data = prepare_domains(make_scenario(cfg.scenario), cfg, 0)
    runner = AblationRunner(cfg, data, 0)
    start = time.perf_counter()
    dice = {}
    fdrt_ok = []
    variants = {
        "Meta-Base": dict(mka=False, metastyle=False, fdrt=False),
        "+MetaStyle": dict(mka=False, metastyle=True, fdrt=False),
        "+FDRT": dict(mka=False, metastyle=False, fdrt=True),
        "+MKA": dict(mka=True, metastyle=False, fdrt=False),
        "FGML-DG": dict(mka=True, metastyle=True, fdrt=True),
        "w/o L_align": dict(mka=True, metastyle=True, fdrt=True, l_align=False),
        "w/o L_cons": dict(mka=True, metastyle=True, fdrt=True, l_cons=False),
    }
    for name, toggles in variants.items():
        result, rows = runner.run(**toggles)
        dice[name] = summarize(rows)[0]
        if toggles["fdrt"]:
            before = runner._meta[_meta_key(cfg.replace(**toggles))].model
            b = np.mean([s.dice for s in evaluate_domains(before, data.val)])
            a = np.mean([s.dice for s in evaluate_domains(result.model, data.val)])
            fdrt_ok.append((name, b, a))
    return dice, fdrt_ok, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_6_ablation_ordering(bench):
    dice, fdrt_ok, secs = bench
    base = dice["Meta-Base"]
    gains = {k: dice[k] - base for k in ("+MetaStyle", "+FDRT", "+MKA")}
    a = dice["FGML-DG"] - base >= 0.05
    b = gains["+MKA"] == max(gains.values())
    c = all(after >= before for _, before, after in fdrt_ok)
    detail = (f"(a) FGML-DG {dice['FGML-DG']:.4f} vs Meta-Base {base:.4f} ({dice['FGML-DG'] - base:+.4f}) "
              f"{'ok' if a else 'FAIL'}; (b) gains " + ", ".join(f"{k} {v:+.4f}" for k, v in gains.items())
              + f" {'ok' if b else 'FAIL'}; (c) val before/after FDRT "
              + ", ".join(f"{n} {x:.3f}->{y:.3f}" for n, x, y in fdrt_ok) + f" {'ok' if c else 'FAIL'}; "
              f"{secs / 60:.1f} min for criteria 6-7")
    report(6, a and b and c, detail)


@pytest.mark.slow
def test_criterion_7_loss_ablation(bench):
    dice, _, _ = bench
    full = dice["FGML-DG"]
    drop_align = full - dice["w/o L_align"]
    drop_cons = full - dice["w/o L_cons"]
    report(7, drop_align >= drop_cons, f"FGML-DG {full:.4f}; removing L_align {-drop_align:+.4f}, "
                                       f"removing L_cons {-drop_cons:+.4f}")
