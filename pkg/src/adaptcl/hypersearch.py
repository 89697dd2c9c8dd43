"""
Two-phase hyperparameter selection per task.

Maximal plasticity search fine-tunes throwaway copies of the model at each
candidate learning rate and keeps the rate with the best validation accuracy.
Stability decay then trains with the method's penalty, starting from a large
strength and halving it until the new-task accuracy reaches a fixed fraction
of the fine-tuning accuracy.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import ContinualModel
from .regularizers import LAMBDA_START, Lambdas, Method, RegularizerState
from .trainer import OptimizerConfig, TrainReport, train_task

log = logging.getLogger(__name__)


@dataclass
class SearchPolicy:
    first_task_lrs: tuple[float, ...] = (5e-1, 1e-1, 5e-2)
    later_task_lrs: tuple[float, ...] = (1e-1, 5e-2, 1e-2, 5e-3, 1e-3)
    accuracy_fraction: float = 0.95
    lambda_start: dict[Method, Lambdas] = field(default_factory=lambda: dict(LAMBDA_START))
    max_halvings: int = 8

    def __post_init__(self):
        for name in ("first_task_lrs", "later_task_lrs"):
            grid = tuple(getattr(self, name))
            if not grid or list(grid) != sorted(grid, reverse=True):
                raise ValueError(f"{name} must be non-empty and sorted descending")
            setattr(self, name, grid)
        if not 0 < self.accuracy_fraction <= 1:
            raise ValueError("accuracy_fraction must lie in (0, 1]")
        if self.max_halvings < 1:
            raise ValueError("max_halvings must be positive")

    def lr_grid(self, task_id: int) -> tuple[float, ...]:
        return self.first_task_lrs if task_id == 0 else self.later_task_lrs


@dataclass
class SearchRow:
    phase: str
    task: int
    candidate: str
    accuracy: float
    decision: str

    def to_dict(self) -> dict:
        return {"phase": self.phase, "task": self.task, "candidate": self.candidate,
                "accuracy": self.accuracy, "decision": self.decision}


@dataclass
class DecayResult:
    lambdas: Lambdas
    model: ContinualModel
    state: RegularizerState
    report: TrainReport
    exhausted: bool
    trace: list[Lambdas]
    rows: list[SearchRow]


def maximal_plasticity_search(model: ContinualModel, stream, task_id: int, policy: SearchPolicy,
                              cfg: OptimizerConfig, seed: int, grid=None) -> tuple[float, float, list[SearchRow]]:
    """Return (best_lr, its validation accuracy, log rows); ties go to the larger rate."""
    grid = tuple(grid) if grid is not None else policy.lr_grid(task_id)
    best_lr, best_acc = None, -np.inf
    rows = []
    for lr in sorted(grid, reverse=True):
        scratch = model.copy()
        report = train_task(scratch, stream, task_id, Method.FINETUNE, Lambdas(), replace(cfg, lr=lr),
                            np.random.default_rng(seed))
        acc = report.final_val_acc
        better = acc > best_acc
        if better:
            best_lr, best_acc = lr, acc
        rows.append(SearchRow("plasticity", task_id, f"lr={lr:g}", acc, "best" if better else "worse"))
        log.info("task %d lr %g finetune val_acc %.4f", task_id, lr, acc)
    return best_lr, float(best_acc), rows


def stability_decay(model: ContinualModel, stream, task_id: int, method: Method | str,
                    lambda_start: Lambdas, lr: float, finetune_acc: float, policy: SearchPolicy,
                    cfg: OptimizerConfig, state: RegularizerState, seed: int, **train_kwargs) -> DecayResult:
    """Train under ``method`` from a fixed pre-task checkpoint, halving lambda until accuracy is acceptable.

    ``model`` and ``state`` are not modified; the accepted attempt's copies are returned.
    """
    method = Method(method)
    threshold = policy.accuracy_fraction * finetune_acc
    start_sum = model.checksum()
    lam = lambda_start
    trace, rows = [], []
    cfg = replace(cfg, lr=lr)
    for attempt in range(policy.max_halvings + 1):
        if model.checksum() != start_sum:
            raise RuntimeError("pre-task checkpoint was mutated between attempts")
        trial = model.copy()
        trial_state = copy.deepcopy(state)
        report = train_task(trial, stream, task_id, method, lam, cfg, np.random.default_rng(seed),
                            trial_state, **train_kwargs)
        trace.append(lam)
        ok = report.final_val_acc >= threshold
        last = attempt == policy.max_halvings
        rows.append(SearchRow("stability", task_id, _fmt(lam), report.final_val_acc,
                              "accept" if ok else ("exhausted" if last else "halve")))
        log.info("task %d lambda %s val_acc %.4f threshold %.4f", task_id, _fmt(lam), report.final_val_acc, threshold)
        if ok or last:
            return DecayResult(lam, trial, trial_state, report, not ok, trace, rows)
        lam = lam.halved()
    raise AssertionError("unreachable")


def _fmt(lam: Lambdas) -> str:
    return f"weight={lam.weight:g},distill={lam.distill:g},backbone={lam.backbone:g}"
