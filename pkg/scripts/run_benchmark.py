"""Train Meta-Base and the full method on a scenario over several seeds.

Prints per-domain test Dice / HD for each seed and the mean over seeds.

    python scripts/run_benchmark.py --seeds 0,1,2 --scenario brats-like
"""
import argparse
import time

import numpy as np
import torch

from metastyle.config import TrainConfig, load_config
from metastyle.data import make_scenario
from metastyle.experiment import BENCHMARK, evaluate, prepare_domains, train

VARIANTS = {
    "Meta-Base": dict(mka=False, metastyle=False, fdrt=False),
    "FGML-DG": dict(mka=True, metastyle=True, fdrt=True),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--scenario", default="brats-like")
    ap.add_argument("--threads", type=int, default=0)
    args = ap.parse_args()
    if args.threads:
        torch.set_num_threads(args.threads)
    base = load_config(args.config, args.set, base=TrainConfig(scenario=args.scenario).replace(**BENCHMARK))
    scenario = make_scenario(base.scenario)
    seeds = [int(s) for s in args.seeds.split(",")]
    for name, toggles in VARIANTS.items():
        cfg = base.replace(**toggles)
        means = []
        for seed in seeds:
            data = prepare_domains(scenario, cfg, seed)
            start = time.perf_counter()
            result = train(cfg, data, seed)
            rows = evaluate(result.model, data.targets)
            means.append(np.mean([r["dice"] for r in rows]))
            print(f"{name:10s} seed {seed}: " + "  ".join(f"{r['domain']} {r['dice']:.3f}/{r['hd']:.1f}" for r in rows)
                  + f"  mean Dice {means[-1]:.4f}  ({time.perf_counter() - start:.0f}s)", flush=True)
        print(f"{name:10s} mean over {len(seeds)} seeds: {np.mean(means):.4f} +/- {np.std(means):.4f}")


if __name__ == "__main__":
    main()
