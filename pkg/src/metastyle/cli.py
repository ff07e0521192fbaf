"""Command line: ``metastyle {generate-data,train,eval,ablate,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import augment_with, sample_bezier
from .backbone import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .data import SCENARIOS, load_scenario, make_scenario, save_domain, save_scenario
from .errors import ConfigError, DataError, MetaStyleError
from .experiment import TABLE3, TABLE4, AblationRunner, evaluate, meta_train, prepare_domains, retrain, summarize
from .fdrt import FDRT_COLUMNS
from .meta_loop import LOG_COLUMNS
from .style_bank import write_bank

log = logging.getLogger("metastyle")

EVAL_COLUMNS = ("domain", "dice", "hd", "n")
ABLATION_COLUMNS = ("table", "label", "mka", "metastyle", "fdrt", "l_align", "l_cons", "dice", "dice_std", "hd")
SCENARIO_ALIASES = {"brats": "brats-like", "abdominal": "abdominal-like"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# --- helpers ------------------------------------------------------------------


def _scenario_name(name: str) -> str:
    name = SCENARIO_ALIASES.get(name, name)
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return name


def _seeds(text: str | None, cfg: TrainConfig) -> tuple[int, ...]:
    if text is None:
        return cfg.seeds
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def _config(args) -> TrainConfig:
    cfg = load_config(args.config, args.set)
    if getattr(args, "seeds", None) is not None:
        cfg = cfg.replace(seeds=_seeds(args.seeds, cfg))
    return cfg


def _require(path, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    return Path(path)


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} exists and is not empty (use --force)")
    if path.exists() and force:
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


class CsvLog:
    """Append-only CSV with a fixed header, flushed after every write."""

    def __init__(self, path: Path, columns):
        self.columns = list(columns)
        self.fh = open(path, "w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=self.columns, extrasaction="ignore")
        self.writer.writeheader()

    def write(self, rows):
        for row in rows:
            self.writer.writerow({k: _fmt(row.get(k, "")) for k in self.columns})
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def _write_csv(path: Path, columns, rows) -> None:
    out = CsvLog(path, columns)
    out.write(rows)
    out.close()


def text_table(columns, rows) -> str:
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# --- subcommands --------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    out = _prepare_out(_require(args.data_dir, "--data-dir"), args.force)
    name = _scenario_name(args.scenario or cfg.scenario)
    seed = SCENARIOS[name]["seed"] if args.seed is None else args.seed
    num_aug = cfg.num_aug_domains if args.num_aug_domains is None else args.num_aug_domains
    strength = cfg.strength if args.strength is None else args.strength
    cfg = cfg.replace(num_aug_domains=num_aug, strength=strength)
    domains = make_scenario(name, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                            size=args.size, seed=seed)
    save_scenario(domains, out, {"name": name, "seed": seed, "num_classes": domains[0].train.num_classes})
    # preview of the augmented source domains drawn with the same seed
    rng = np.random.default_rng([seed, 1])
    curves = [sample_bezier(rng, strength) for _ in range(num_aug)]
    for ds in augment_with(domains[0].train, curves):
        save_domain(ds, out / "augmented" / ds.name)
    log.info("wrote %d domains (%s, seed %d) to %s", len(domains), name, seed, out)
    return 0


def _train_one(cfg: TrainConfig, domains, seed: int, run_dir: Path, checkpoint: Path, bank_path: Path) -> list[dict]:
    data = prepare_domains(domains, cfg, seed)
    train_log = CsvLog(run_dir / "train_log.csv", LOG_COLUMNS)
    val_log = CsvLog(run_dir / "val_log.csv", ("epoch",) + EVAL_COLUMNS) if cfg.eval_every else None

    def on_epoch(state, model, rows):
        train_log.write(rows)
        write_bank(state.bank, bank_path)
        if val_log is not None and state.epoch % cfg.eval_every == 0:
            val_log.write({"epoch": state.epoch, **r} for r in evaluate(model, data.val, with_hd=False))
        last = rows[-1]
        log.info("seed %d epoch %d L_total %.4f w %.3f", seed, state.epoch, last["L_total"], last["w"])

    try:
        result = meta_train(cfg, data, seed, on_epoch=on_epoch)
        if cfg.fdrt:
            logged = len(result.records)
            result = retrain(result, cfg, data, seed)
            train_log.write(result.records[logged:])
            write_bank(result.state.bank, bank_path)
            _write_csv(run_dir / "fdrt.csv", FDRT_COLUMNS, result.fdrt_history)
    finally:
        train_log.close()
        if val_log is not None:
            val_log.close()
    save_checkpoint(checkpoint, result.model, cfg.to_dict(), {"seed": seed, "epochs": result.state.epoch})
    rows = evaluate(result.model, [domains[0].test] + data.targets)
    _write_csv(run_dir / "metrics.csv", EVAL_COLUMNS, rows)
    return rows


def cmd_train(args) -> int:
    cfg = _config(args)
    domains, _ = load_scenario(_require(args.data_dir, "--data-dir"))
    out = _prepare_out(_require(args.out_dir, "--out-dir"), args.force)
    (out / "config.resolved").write_text(cfg.dumps())
    multi = len(cfg.seeds) > 1
    summary = []
    for seed in cfg.seeds:
        run_dir = out / f"seed{seed}"
        run_dir.mkdir()
        ckpt = Path(args.checkpoint) if args.checkpoint and not multi else run_dir / "checkpoint.pt"
        bank = Path(args.style_bank) if args.style_bank and not multi else run_dir / "style_bank.msbk"
        rows = _train_one(cfg, domains, seed, run_dir, ckpt, bank)
        targets = [r for r in rows if r["domain"] != domains[0].name]
        summary.append({"seed": seed, **{r["domain"]: r["dice"] for r in rows},
                        "target_mean": float(np.mean([r["dice"] for r in targets]))})
    columns = list(summary[0])
    stats = [{"seed": name, **{c: float(fn([s[c] for s in summary])) for c in columns[1:]}}
             for name, fn in (("mean", np.mean), ("std", np.std))]
    _write_csv(out / "summary.csv", columns, summary + stats)
    sys.stdout.write(text_table(columns, summary + stats))
    return 0


def cmd_eval(args) -> int:
    model, blob = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    domains, _ = load_scenario(_require(args.data_dir, "--data-dir"))
    k = domains[0].test.num_classes
    if model.num_classes != k:
        raise ConfigError(f"checkpoint predicts {model.num_classes} classes but the data has {k}")
    rows = evaluate(model, [d.test for d in domains])
    rows.append({"domain": "mean", "dice": float(np.mean([r["dice"] for r in rows])),
                 "hd": float(np.mean([r["hd"] for r in rows])), "n": sum(r["n"] for r in rows)})
    table = text_table(EVAL_COLUMNS, rows)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "eval.csv", EVAL_COLUMNS, rows)
        (out / "eval.txt").write_text(table)
    sys.stdout.write(table)
    return 0


def ablation_rows(cfg: TrainConfig, domains, seeds) -> list[dict]:
    grid = [(3, label, {**t, "l_align": True, "l_cons": True}) for label, t in TABLE3]
    grid += [(4, label, {"mka": True, "metastyle": True, "fdrt": True, **t}) for label, t in TABLE4]
    scores = {label + str(table): [] for table, label, _ in grid}
    for seed in seeds:
        runner = AblationRunner(cfg, prepare_domains(domains, cfg, seed), seed)
        for table, label, toggles in grid:
            _, rows = runner.run(**toggles)
            scores[label + str(table)].append(summarize(rows))
            log.info("seed %d %s: dice %.4f", seed, label, scores[label + str(table)][-1][0])
    out = []
    for table, label, toggles in grid:
        dice = [s[0] for s in scores[label + str(table)]]
        hd = [s[1] for s in scores[label + str(table)]]
        out.append({"table": table, "label": label, **toggles, "dice": float(np.mean(dice)),
                    "dice_std": float(np.std(dice)), "hd": float(np.mean(hd))})
    return out


def cmd_ablate(args) -> int:
    cfg = _config(args)
    domains, _ = load_scenario(_require(args.data_dir, "--data-dir"))
    out = _prepare_out(_require(args.out_dir, "--out-dir"), args.force)
    (out / "config.resolved").write_text(cfg.dumps())
    rows = ablation_rows(cfg, domains, cfg.seeds)
    _write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    table = text_table(ABLATION_COLUMNS, rows)
    (out / "ablation.txt").write_text(table)
    sys.stdout.write(table)
    return 0


# --- report -------------------------------------------------------------------


def read_csv(path: Path, required) -> list[dict]:
    """Parse a log written by this tool; errors name the offending line."""
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not lines:
        raise DataError(f"{path}: empty log")
    reader = csv.reader(lines)
    header = next(reader)
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}:1: missing columns {missing}")
    rows = []
    for lineno, fields in enumerate(reader, 2):
        if len(fields) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        row = dict(zip(header, fields))
        for c in required:
            if c == "domain":
                continue
            try:
                row[c] = float(row[c])
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {c!r} is not numeric: {row[c]!r}") from None
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: log has a header but no rows")
    return rows


def _plot_training(rows, tag: str, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    domains = sorted({r["domain"] for r in rows}, key=lambda d: float(d))
    files = []

    fig, axes = plt.subplots(1, 4, figsize=(16, 3.5))
    for ax, col in zip(axes, ("L_total", "L_dice", "L_align", "L_cons")):
        for d in domains:
            pts = [(r["epoch"], r[col]) for r in rows if r["domain"] == d]
            ax.plot(*zip(*pts), label=f"domain {d}")
        ax.set_title(col)
        ax.set_xlabel("epoch")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    files.append(out / f"{tag}_losses.png")
    fig.savefig(files[-1])
    plt.close(fig)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, col in zip(axes, ("w", "delta_style")):
        for d in domains:
            pts = [(r["epoch"], r[col]) for r in rows if r["domain"] == d]
            ax.plot(*zip(*pts), label=f"domain {d}")
        ax.set_title(col)
        ax.set_xlabel("epoch")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    files.append(out / f"{tag}_style_weight.png")
    fig.savefig(files[-1])
    plt.close(fig)

    last = max(r["epoch"] for r in rows)
    final = {d: [1.0 - r["L_dice"] for r in rows if r["domain"] == d and r["epoch"] == last] for d in domains}
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([str(d) for d in domains], [float(np.mean(v)) if v else 0.0 for v in final.values()])
    ax.set_ylim(0, 1)
    ax.set_title(f"soft Dice (1 - L_dice), epoch {last:g}")
    ax.set_xlabel("domain")
    fig.tight_layout()
    files.append(out / f"{tag}_train_dice.png")
    fig.savefig(files[-1])
    plt.close(fig)
    return files


def _plot_eval(rows, tag: str, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    names = [r["domain"] for r in rows]
    axes[0].bar(names, [r["dice"] for r in rows])
    axes[0].set_ylim(0, 1)
    axes[0].set_title("Dice")
    axes[1].bar(names, [0.0 if math.isnan(r["hd"]) else r["hd"] for r in rows])
    axes[1].set_title("HD (pixels)")
    for ax in axes:
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = out / f"{tag}_domain_scores.png"
    fig.savefig(path)
    plt.close(fig)
    return [path]


def _report_inputs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(p.rglob("train_log.csv")) + sorted(p.rglob("metrics.csv")) + sorted(p.rglob("eval.csv"))
        elif p.is_file():
            found.append(p)
        else:
            raise DataError(f"no such log: {p}")
    if not found:
        raise DataError("no logs found")
    return found


def cmd_report(args) -> int:
    out = Path(args.out_dir or "report")
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, path in enumerate(_report_inputs(args.logs)):
        tag = f"{i:02d}_{path.parent.name or 'run'}_{path.stem}"
        header = path.read_text().split("\n", 1)[0].split(",")
        if "L_total" in header:
            files += _plot_training(read_csv(path, LOG_COLUMNS), tag, out)
        elif "dice" in header and "domain" in header:
            files += _plot_eval(read_csv(path, ("domain", "dice", "hd")), tag, out)
        else:
            raise DataError(f"{path}:1: unrecognised log header {header}")
    for f in files:
        print(f)
    return 0


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="metastyle", description="Style-aware meta-learning for single-source segmentation.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--data-dir")
        if out:
            p.add_argument("--out-dir")
            p.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("generate-data", help="materialize a synthetic scenario")
    common(p, out=False)
    p.add_argument("--force", action="store_true")
    p.add_argument("--scenario", help="brats-like or abdominal-like")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-aug-domains", type=int)
    p.add_argument("--strength", type=float)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="meta-learning followed by feedback-driven retraining")
    common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default from config)")
    p.add_argument("--checkpoint", help="checkpoint path (single-seed runs)")
    p.add_argument("--style-bank", help="style bank path (single-seed runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-domain Dice and HD on test splits")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run both ablation tables")
    common(p)
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plots from CSV logs")
    p.add_argument("logs", nargs="+", help="CSV logs or run directories")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        if args.command is None:
            raise ConfigError("missing subcommand (generate-data, train, eval, ablate, report)")
        for key in ("n_train", "n_val", "n_test", "size"):
            if getattr(args, key, 1) < 1:
                raise ConfigError(f"--{key.replace('_', '-')} must be >= 1")
        return args.func(args)
    except MetaStyleError as exc:
        print(f"metastyle: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"metastyle: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
