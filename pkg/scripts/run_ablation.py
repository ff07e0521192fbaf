"""Run both ablation tables on a synthetic scenario and print target-domain Dice.

Starts from the desk-scale benchmark settings; ``--set`` overrides them.

    python scripts/run_ablation.py --seed 0 --out ablation.csv
"""
import argparse
import csv
import logging
import time

import torch

from metastyle.config import TrainConfig, load_config
from metastyle.data import make_scenario
from metastyle.experiment import BENCHMARK, TABLE3, TABLE4, AblationRunner, prepare_domains, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    ap.add_argument("--threads", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)

    cfg = load_config(args.config, args.set, base=TrainConfig().replace(**BENCHMARK))
    data = prepare_domains(make_scenario(cfg.scenario), cfg, args.seed)
    runner = AblationRunner(cfg, data, args.seed)
    rows = []
    grid = [(3, label, t) for label, t in TABLE3]
    grid += [(4, label, dict(mka=True, metastyle=True, fdrt=True, **t)) for label, t in TABLE4]
    for table, label, toggles in grid:
        start = time.perf_counter()
        _, per_domain = runner.run(**toggles)
        dice, hd = summarize(per_domain)
        row = {"table": table, "label": label, "dice": round(dice, 4), "hd": round(hd, 3),
               **{d["domain"]: round(d["dice"], 4) for d in per_domain}}
        rows.append(row)
        print(f"T{table} {label:32s} dice {dice:.4f}  hd {hd:6.2f}  "
              + " ".join(f"{d['domain']}={d['dice']:.3f}" for d in per_domain)
              + f"  ({time.perf_counter() - start:.0f}s)", flush=True)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


if __name__ == "__main__":
    main()
