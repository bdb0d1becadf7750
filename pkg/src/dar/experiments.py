"""Desk-scale experiments: single-sample overfit and held-out generalization."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .config import ModelConfig, StepSchedule, TrainConfig, preset
from .evalio import MetricReport, mean_report, scene_batch
from .numerics import precision
from .pipeline import evaluate, fit, init_params

HELD_OUT_BASE = 100_000

# 64x64 scenes; the last step stops at 32x32 so the train preset fits a 2 hour CPU budget
GENERALIZE_SCHEDULE = StepSchedule(((2, 2), (4, 4), (8, 8), (16, 16), (32, 32)))


@dataclass
class RunResult:
    losses: list[float]
    reports: list[list[MetricReport]]  # [scene][step]
    seconds: float
    per_step: list[MetricReport] = field(init=False)

    def __post_init__(self):
        self.per_step = [mean_report([r[k] for r in self.reports]) for k in range(len(self.reports[0]))]

    @property
    def final(self) -> MetricReport:
        return self.per_step[-1]

    @property
    def monotone_fraction(self) -> float:
        """Share of scenes whose RMSE never increases from one step to the next."""
        ok = sum(all(b.rmse <= a.rmse for a, b in zip(r, r[1:])) for r in self.reports)
        return ok / len(self.reports)


def run(cfg: ModelConfig, tcfg: TrainConfig, train_seeds, eval_seeds, log=None) -> RunResult:
    """Train from a seeded init on synthetic scenes, then evaluate every step on ``eval_seeds``."""
    with precision("float32"):
        torch.manual_seed(tcfg.seed)
        size = cfg.image_size
        images, gt = scene_batch(list(train_seeds), size, cfg.depth_range)
        test_images, test_gt = scene_batch(list(eval_seeds), size, cfg.depth_range)
        params = init_params(cfg, seed=tcfg.seed)
        t0 = time.time()
        losses = fit(params, cfg, tcfg, images, gt, log=log)
        reports = evaluate(params, cfg, test_images, test_gt)
        return RunResult(losses, reports, time.time() - t0)


def overfit_config() -> tuple[ModelConfig, TrainConfig]:
    return preset("test"), TrainConfig(iters=300, batch_size=1, lr_init=2e-4, lr_peak=2e-3, seed=0)


def generalize_config(iters: int = 1000) -> tuple[ModelConfig, TrainConfig]:
    return (preset("train", schedule=GENERALIZE_SCHEDULE),
            TrainConfig(iters=iters, batch_size=4, lr_init=1e-4, lr_peak=1e-3, seed=0))


def overfit(seed: int = 42, log=None) -> RunResult:
    cfg, tcfg = overfit_config()
    return run(cfg, tcfg, [seed], [seed], log=log)


def generalize(n_train: int = 512, n_test: int = 64, iters: int = 1000, log=None) -> RunResult:
    cfg, tcfg = generalize_config(iters)
    return run(cfg, tcfg, range(n_train), range(HELD_OUT_BASE, HELD_OUT_BASE + n_test), log=log)
