"""Synthetic benchmark: train variants over several seeds and tabulate test metrics."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..config import TrainConfig
from ..dataset import Dataset, SyntheticSpec, generate_synthetic
from .evaluation import EvalReport, evaluate, random_scores, report_from_scores
from .training import TrainResult, split_dataset, train

log = logging.getLogger(__name__)

VARIANTS = {"full": "adaptive", "no-contrastive": "none", "plain-contrastive": "plain"}


@dataclass
class SeedRun:
    seed: int
    variant: str
    result: TrainResult
    report: EvalReport
    random_map: float
    test: Dataset
    seconds: float = 0.0  # wall time of training; not part of any report


@dataclass
class BenchmarkTable:
    runs: list[SeedRun] = field(default_factory=list)

    def maps(self, variant: str) -> list[float]:
        return [r.report.MAP for r in self.runs if r.variant == variant]

    def to_json(self) -> dict:
        rows = [{"seed": r.seed, "variant": r.variant, "MAP": r.report.MAP, "NDCG@3": r.report.NDCG_3,
                 "NDCG@5": r.report.NDCG_5, "random_MAP": r.random_map} for r in self.runs]
        summary = {}
        for v in dict.fromkeys(r.variant for r in self.runs):
            sel = [r for r in self.runs if r.variant == v]
            summary[v] = {m: float(np.mean([getattr(r.report, a) for r in sel]))
                          for m, a in (("MAP", "MAP"), ("NDCG@3", "NDCG_3"), ("NDCG@5", "NDCG_5"))}
        return {"runs": rows, "mean": summary}

    def format(self) -> str:
        lines = [f"{'variant':<18} {'seed':>4} {'MAP':>7} {'NDCG@3':>7} {'NDCG@5':>7} {'random':>7}"]
        for r in self.runs:
            lines.append(f"{r.variant:<18} {r.seed:>4} {r.report.MAP:7.4f} {r.report.NDCG_3:7.4f} "
                         f"{r.report.NDCG_5:7.4f} {r.random_map:7.4f}")
        for v, m in self.to_json()["mean"].items():
            lines.append(f"{v:<18} {'mean':>4} {m['MAP']:7.4f} {m['NDCG@3']:7.4f} {m['NDCG@5']:7.4f}")
        return "\n".join(lines)


def run_seed(cfg: TrainConfig, spec: SyntheticSpec, seed: int, variant: str = "full") -> SeedRun:
    """Generate data and train one variant, with both data and model seeded by ``seed``."""
    ds = generate_synthetic(dataclasses.replace(spec, seed=seed))
    run_cfg = dataclasses.replace(cfg, seed=seed, contrastive=VARIANTS[variant])
    train_ds, test_ds = split_dataset(ds, run_cfg.test_fraction, seed)
    start = time.perf_counter()
    result = train(run_cfg, train_ds)
    seconds = time.perf_counter() - start
    report = evaluate(result.model, test_ds, run_cfg.tau)
    random_map = report_from_scores(random_scores(test_ds, seed), test_ds, run_cfg.tau).MAP
    log.info("seed %d %s: MAP %.4f (random %.4f)", seed, variant, report.MAP, random_map)
    return SeedRun(seed, variant, result, report, random_map, test_ds, seconds)


def run_benchmark(cfg: TrainConfig, spec: SyntheticSpec, seeds: Sequence[int],
                  variants: Sequence[str] = ("full", "no-contrastive")) -> BenchmarkTable:
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}; choose from {sorted(VARIANTS)}")
    table = BenchmarkTable()
    for variant in variants:
        for seed in seeds:
            table.runs.append(run_seed(cfg, spec, seed, variant))
    return table
