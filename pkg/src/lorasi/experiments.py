"""Multi-run experiments: strategy comparison and the phi sweep.

Runs are independent, so both helpers can fan out over worker processes.
Each run gets ``seed`` for both the model/batch order and the task data.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Sequence

import numpy as np

from .tasks import gen_task_pair
from .trainer import STRATEGIES, Trainer, TrainConfig

__all__ = ["PHI_GRID", "run_summary", "compare_strategies", "sweep_phi", "sweep_means", "monotone_violations"]

PHI_GRID = (0.0, math.exp(-4), math.exp(-3), math.exp(-2), math.exp(-1))


def seeded(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed, task_seed=seed)


def run_summary(config: TrainConfig) -> dict:
    """Run one experiment and return its summary plus importance cost figures."""
    pair = gen_task_pair(config.task, seed=config.task_seed)
    trainer = Trainer(config, pair)
    t0 = time.perf_counter()
    report = trainer.run()
    wall = time.perf_counter() - t0
    pen = trainer.penalty
    stored = 0
    if pen is not None and config.strategy in ("ours", "ewc_lora"):
        # what has to be kept around to apply the penalty: importance + anchor
        stored = sum(a.nbytes for a in pen.importance.values()) + sum(a.nbytes for a in pen.anchors.values())
    s = report.summary
    return {
        "strategy": config.strategy,
        "seed": config.seed,
        "phi": config.phi,
        "ppl_nu": s["nu_ppl_after_mu"],
        "acc_mu": s["mu_accuracy"],
        "forgetting": s["forgetting"],
        "nu_ce_after_mu": s["nu_ce_after_mu"],
        "mu_ce": s["mu_ce"],
        "importance_s": trainer.timings["importance_s"],
        "importance_bytes": stored,
        "wall_s": wall,
    }


def _map(configs: Sequence[TrainConfig], jobs: int) -> list[dict]:
    if jobs <= 1 or len(configs) <= 1:
        return [run_summary(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(run_summary, configs))


def compare_strategies(
    config: TrainConfig, seeds: Sequence[int] = (0,), strategies: Sequence[str] = STRATEGIES, jobs: int = 1
) -> list[dict]:
    """One summary row per (seed, strategy), seed-major."""
    return _map([replace(seeded(config, s), strategy=st) for s in seeds for st in strategies], jobs)


def sweep_phi(
    config: TrainConfig, phis: Sequence[float] = PHI_GRID, seeds: Sequence[int] = (0,), jobs: int = 1
) -> list[dict]:
    """Rows for strategy ``ours`` at every (phi, seed), phi-major."""
    return _map([replace(seeded(config, s), strategy="ours", phi=p) for p in phis for s in seeds], jobs)


def sweep_means(rows: Sequence[dict], key: str = "forgetting") -> list[tuple[float, float]]:
    """(phi, mean of ``key`` over seeds) in first-seen phi order."""
    phis = list(dict.fromkeys(r["phi"] for r in rows))
    return [(p, float(np.mean([r[key] for r in rows if r["phi"] == p]))) for p in phis]


def monotone_violations(values: Sequence[float]) -> int:
    """Number of adjacent pairs where the sequence increases."""
    return sum(1 for a, b in zip(values, values[1:]) if b > a)
