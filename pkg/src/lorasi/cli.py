"""Command-line interface.

    lorasi train      --config c.yaml --seed 7 --out runs/a
    lorasi eval       --checkpoint runs/a/checkpoint.bin
    lorasi heatmap    --checkpoint runs/a/checkpoint.bin
    lorasi compare    --config c.yaml --seed 0
    lorasi sweep-phi  --config c.yaml --seeds 0 1 2 --jobs 4
    lorasi gen-data   --task mc-rules --seed 3 --out pair.jsonl

Without ``--out``, outputs go under ``$LORASI_OUT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import yaml

from . import __version__
from .checkpoint import CheckpointError, checkpoint_from_trainer, load_checkpoint, restore_trainer, save_checkpoint
from .experiments import PHI_GRID, compare_strategies, monotone_violations, sweep_means, sweep_phi
from .importance import ImportanceError
from .model import ToyModel
from .report import (
    COMPARE_COLUMNS,
    CURVE_COLUMNS,
    EVAL_COLUMNS,
    HEATMAP_COLUMNS,
    CsvLog,
    format_table,
    heatmap_rows,
    write_csv,
    write_summary,
)
from .tasks import TaskSpec, export_task_pair, gen_task_pair
from .trainer import STRATEGIES, Trainer, TrainConfig, TrainingError, evaluate, train_nu

log = logging.getLogger("lorasi")

OUT_ENV = "LORASI_OUT"


class CliError(Exception):
    pass


# -- config ------------------------------------------------------------------


def default_config_text() -> str:
    return resources.files("lorasi").joinpath("configs/default.yaml").read_text()


def load_config(path: str | Path | None) -> TrainConfig:
    """Parse a YAML config; ``None`` means the packaged default file."""
    try:
        text = default_config_text() if path is None else Path(path).read_text()
        data = yaml.safe_load(text)
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}") from e
    except yaml.YAMLError as e:
        raise CliError(f"cannot parse config {path}: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise CliError(f"config {path}: expected a mapping of TrainConfig fields")
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as e:
        raise CliError(f"config {path}: {e}") from e


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    over = {}
    if getattr(args, "seed", None) is not None:
        over.update(seed=args.seed, task_seed=args.seed)
    for key in ("strategy", "phi", "optimizer_mode"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    try:
        return replace(cfg, **over)
    except ValueError as e:
        raise CliError(str(e)) from e


def _out_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / name


class Outputs:
    """Tracks files created by one command so a failure can remove them."""

    def __init__(self, root: Path):
        self.root = root
        self._made_root = not root.exists()
        self._new: list[Path] = []

    def path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        if not p.exists():
            self._new.append(p)
        return p

    def discard(self) -> None:
        for p in self._new:
            p.unlink(missing_ok=True)
        if self._made_root and self.root.exists():
            shutil.rmtree(self.root, ignore_errors=True)


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    if args.resume:
        ck = load_checkpoint(args.resume)
        trainer = restore_trainer(ck)
        out = Outputs(Path(args.out) if args.out else Path(args.resume).parent)
    else:
        cfg = _apply_overrides(load_config(args.config), args)
        trainer = Trainer(cfg, gen_task_pair(cfg.task, seed=cfg.task_seed))
        out = Outputs(_out_dir(args, f"train-{cfg.strategy}-seed{cfg.seed}"))
    cfg = trainer.config
    try:
        out.path("config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        rep = trainer.report
        # rewrite the logs from the checkpointed rows, then append as we go
        curve = CsvLog(out.path("curve.csv"), CURVE_COLUMNS, rep.steps)
        evals = CsvLog(out.path("evals.csv"), EVAL_COLUMNS, rep.evals)
        trainer.on_step = curve.append
        trainer.on_eval = evals.append
        with curve, evals:
            budget = args.max_steps
            while not trainer.done and budget != 0:
                chunk = args.checkpoint_every or None
                if budget is not None:
                    chunk = min(chunk or budget, budget)
                before = trainer.step
                trainer.run(max_steps=chunk)
                if budget is not None:
                    budget -= trainer.step - before
                save_checkpoint(out.path("checkpoint.bin"), checkpoint_from_trainer(trainer))
        if trainer.done:
            write_summary(out.path("summary.json"), rep.summary)
            write_csv(out.path("heatmap.csv"), HEATMAP_COLUMNS, heatmap_rows(trainer.importance))
            s = rep.summary
            print(
                f"{cfg.strategy} seed {cfg.seed}: forgetting {s['forgetting']:.4f}  "
                f"nu ppl {s['nu_ppl_after_mu']:.3f}  mu acc {s['mu_accuracy']:.4f}  -> {out.root}"
            )
        else:
            print(f"stopped at step {trainer.step} ({trainer.phase}); resume with --resume {out.root / 'checkpoint.bin'}")
    except BaseException:
        if not args.resume:
            out.discard()
        raise
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    trainer = restore_trainer(ck)
    splits = trainer.pair.splits()
    names = list(splits) if args.split == "all" else [args.split]
    result = {name: evaluate(trainer.model, splits[name]) for name in names}
    print(json.dumps(result, indent=2))
    return 0


def cmd_heatmap(args) -> int:
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        importance = ck.importance
    else:
        cfg = _apply_overrides(load_config(args.config), args)
        pair = gen_task_pair(cfg.task, seed=cfg.task_seed)
        model = ToyModel(cfg.model_config(len(pair.vocab)))
        importance = train_nu(model, pair.nu_train, cfg).importance
    if not importance.consolidated:
        raise CliError("no consolidated importance yet; the general-task phase has not finished")
    rows = heatmap_rows(importance)
    if args.out:
        out = Outputs(Path(args.out).parent)
        try:
            write_csv(out.path(Path(args.out).name), HEATMAP_COLUMNS, rows)
        except BaseException:
            out.discard()
            raise
    else:
        write_csv(sys.stdout, HEATMAP_COLUMNS, rows)
    return 0


def cmd_gen_data(args) -> int:
    params = {}
    for item in args.param or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--param expects key=value, got {item!r}")
        params[key] = yaml.safe_load(value)
    try:
        pair = gen_task_pair(TaskSpec(args.task, params, args.seed))
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from e
    target = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / f"{args.task}-seed{args.seed}.jsonl"
    out = Outputs(target.parent)
    try:
        export_task_pair(pair, out.path(target.name))
    except BaseException:
        out.discard()
        raise
    sizes = ", ".join(f"{k} {len(v)}" for k, v in pair.splits().items())
    print(f"{target}: {sizes}")
    return 0


def cmd_compare(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Outputs(_out_dir(args, f"compare-seed{cfg.seed}"))
    try:
        rows = compare_strategies(cfg, seeds=(cfg.seed,), jobs=args.jobs)
        write_csv(out.path("compare.csv"), COMPARE_COLUMNS, [[r[c] for c in COMPARE_COLUMNS] for r in rows])
        by = {r["strategy"]: r for r in rows}
        ours, ewc = by["ours"], by["ewc_lora"]
        cost = {
            "ours": {"importance_s": ours["importance_s"], "importance_bytes": ours["importance_bytes"]},
            "ewc_lora": {"importance_s": ewc["importance_s"], "importance_bytes": ewc["importance_bytes"]},
            "time_ratio_ewc_over_ours": ewc["importance_s"] / ours["importance_s"] if ours["importance_s"] else None,
            "bytes_ratio_ewc_over_ours": (
                ewc["importance_bytes"] / ours["importance_bytes"] if ours["importance_bytes"] else None
            ),
        }
        write_summary(out.path("cost.json"), cost)
    except BaseException:
        out.discard()
        raise
    print(format_table(rows, COMPARE_COLUMNS))
    print(
        f"\nimportance cost: ours {ours['importance_s']:.2f}s, ewc_lora {ewc['importance_s']:.2f}s "
        f"(ratio {cost['time_ratio_ewc_over_ours'] or float('nan'):.2f}); "
        f"stored bytes {ours['importance_bytes']} vs {ewc['importance_bytes']}"
    )
    return 0


def cmd_sweep_phi(args) -> int:
    cfg = load_config(args.config)
    out = Outputs(_out_dir(args, "sweep-phi"))
    phis = tuple(args.phis) if args.phis else PHI_GRID
    try:
        rows = sweep_phi(cfg, phis=phis, seeds=args.seeds, jobs=args.jobs)
        cols = ("phi", "seed", "forgetting", "ppl_nu", "acc_mu")
        write_csv(out.path("sweep.csv"), cols, [[r[c] for c in cols] for r in rows])
        means = sweep_means(rows)
        acc = dict(sweep_means(rows, "acc_mu"))
        ppl = dict(sweep_means(rows, "ppl_nu"))
        mean_rows = [{"phi": p, "forgetting": f, "ppl_nu": ppl[p], "acc_mu": acc[p]} for p, f in means]
        write_csv(
            out.path("sweep_mean.csv"),
            ("phi", "forgetting", "ppl_nu", "acc_mu"),
            [[r["phi"], r["forgetting"], r["ppl_nu"], r["acc_mu"]] for r in mean_rows],
        )
    except BaseException:
        out.discard()
        raise
    for r in mean_rows:
        r["ln_phi"] = f"{math.log(r['phi']):.0f}" if r["phi"] > 0 else "-inf"
    print(format_table(mean_rows, ("ln_phi", "forgetting", "ppl_nu", "acc_mu")))
    v = monotone_violations([f for _, f in means])
    print(f"\nadjacent increases in mean forgetting: {v}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorasi", description="Importance-regularised continual LoRA fine-tuning.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML file of TrainConfig fields (defaults if omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="run and data seed")
        sp.add_argument("--out", help=f"output location (default under ${OUT_ENV} or ./runs)")

    t = sub.add_parser("train", help="run one experiment; write checkpoint and reports")
    common(t)
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--phi", type=float)
    t.add_argument("--optimizer-mode", dest="optimizer_mode", choices=("adaptive", "sgd_exact"))
    t.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N steps")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the task splits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="all", choices=("all", "nu_train", "nu_eval", "mu_train", "mu_eval"))
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="per-matrix importance norms (block, matrix, l2, log10 l2)")
    src = h.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", help="read importance from a checkpoint")
    src.add_argument("--config", help="train the general task from this config first")
    h.add_argument("--seed", type=int)
    h.add_argument("--out", help="CSV path (stdout if omitted)")
    h.set_defaults(func=cmd_heatmap)

    c = sub.add_parser("compare", help="all five strategies under one seed")
    common(c)
    c.add_argument("--jobs", type=int, default=1, help="worker processes")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep-phi", help="strategy 'ours' over a grid of phi values")
    common(s, seed=False)
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--phis", type=float, nargs="+", help="default: 0, e^-4, e^-3, e^-2, e^-1")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep_phi)

    g = sub.add_parser("gen-data", help="write a task pair as JSON lines")
    g.add_argument("--task", default="grammar-shift")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter (repeatable)")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, CheckpointError, ImportanceError, TrainingError, ValueError, OSError) as e:
        print(f"lorasi {args.command}: error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print(f"lorasi {args.command}: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
