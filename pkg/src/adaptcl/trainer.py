"""Per-task SGD training loop and post-task consolidation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError
from .nn import ContinualModel
from .regularizers import (
    DISTILL_TEMPERATURE,
    FrozenTeacher,
    Lambdas,
    Method,
    PathIntAccumulator,
    RegularizerState,
    WeightAnchor,
    estimate_fisher_diag,
    estimate_mas_importance,
    pathint_finalize,
    pathint_step,
    total_loss,
)
from .tensor import Tensor, backward, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4
    clip_norm: float | None = 1.0
    lr_decay_factor: float = 3.0
    patience_epochs: int = 10
    min_lr: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 128

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.lr > 0:
            out.append(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            out.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            out.append(f"clip_norm must be positive or None, got {self.clip_norm}")
        if not self.lr_decay_factor > 1:
            out.append(f"lr_decay_factor must exceed 1, got {self.lr_decay_factor}")
        if self.patience_epochs < 1:
            out.append(f"patience_epochs must be positive, got {self.patience_epochs}")
        if not self.min_lr > 0:
            out.append(f"min_lr must be positive, got {self.min_lr}")
        if self.max_epochs < 0:
            out.append(f"max_epochs must be non-negative, got {self.max_epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size must be positive, got {self.batch_size}")
        return out


@dataclass
class TrainReport:
    epochs_run: int = 0
    final_val_acc: float = float("nan")
    loss_trace: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    val_acc_trace: list[float] = field(default_factory=list)
    max_grad_norm: float = 0.0
    backbone_drift: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "final_val_acc": self.final_val_acc,
            "loss_trace": list(self.loss_trace),
            "lr_trace": list(self.lr_trace),
            "val_acc_trace": list(self.val_acc_trace),
            "max_grad_norm": self.max_grad_norm,
            "backbone_drift": self.backbone_drift,
        }


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             cfg: OptimizerConfig, lr: float | None = None) -> tuple[dict[str, np.ndarray], float]:
    """One momentum SGD update in place.

    Returns the applied parameter deltas and the global gradient norm after
    clipping.  Parameters missing from ``grads`` are left untouched.
    """
    lr = cfg.lr if lr is None else lr
    keys = [k for k in params if k in grads]
    for k in keys:
        if not np.all(np.isfinite(grads[k])):
            raise NumericError(f"non-finite gradient for {k}")
    eff = {k: grads[k] + cfg.weight_decay * params[k].data if cfg.weight_decay else grads[k] for k in keys}
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in eff.values())))
    if cfg.clip_norm is not None and norm > cfg.clip_norm:
        factor = cfg.clip_norm / norm
        eff = {k: g * factor for k, g in eff.items()}
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in eff.values())))
    deltas = {}
    for k in keys:
        v = velocity.get(k)
        v = eff[k].copy() if v is None else cfg.momentum * v + eff[k]
        velocity[k] = v
        before = params[k].data
        params[k].data = before - lr * v
        deltas[k] = params[k].data - before
    return deltas, norm


def task_il_accuracy(model: ContinualModel, x, y, task_id: int) -> float:
    if len(y) == 0:
        return float("nan")
    with no_grad():
        logits = model(x, task_id).data
    return float(np.mean(logits.argmax(axis=1) == np.asarray(y)))


def _batch_loss(model, method, state, lambdas, xb, yb, task_id, temperature, feature_metric, distill_target):
    xt = Tensor(xb)
    if not method.prediction_family or not state.teachers:
        logits = model(xt, task_id)
        task = softmax_cross_entropy(logits, yb)
        return total_loss(method, task, model, state, lambdas, xb, temperature, feature_metric)
    feats = model.features(xt)
    n_old = state.teachers[-1].model.num_tasks
    old = [model.branch(k)(feats) for k in range(n_old)]
    task = softmax_cross_entropy(model.branch(task_id)(feats), yb)
    return total_loss(method, task, model, state, lambdas, xb, temperature, feature_metric,
                      features=feats, student_logits=old, distill_target=distill_target)


def train_task(model: ContinualModel, stream, task_id: int, method: Method | str, lambdas: Lambdas,
               cfg: OptimizerConfig, rng: np.random.Generator, state: RegularizerState | None = None,
               temperature: float = DISTILL_TEMPERATURE, feature_metric: str = "cosine",
               distill_target: str = "heads") -> TrainReport:
    """Minimize the method's objective on one task's training split.

    The learning rate is divided by ``cfg.lr_decay_factor`` whenever validation
    accuracy has not improved for ``cfg.patience_epochs`` epochs; training stops
    once it falls below ``cfg.min_lr`` or after ``cfg.max_epochs`` epochs.
    """
    method = Method(method)
    state = state if state is not None else RegularizerState(method)
    x_tr, y_tr = stream.split(task_id, "train")
    if len(y_tr) == 0:
        raise InputError(f"task {task_id} has an empty training split")
    x_val, y_val = stream.split(task_id, "val")
    if len(y_val) == 0:
        x_val, y_val = x_tr, y_tr

    params = model.trainable_parameters(task_id)
    backbone_start = {k: v.data.copy() for k, v in model.backbone_parameters().items()}
    if method is Method.PATHINT:
        if state.pathint is None:
            state.pathint = PathIntAccumulator.start(model)
        elif state.pathint.steps == 0:
            state.pathint.reset(model)

    report = TrainReport()
    velocity: dict[str, np.ndarray] = {}
    n = len(y_tr)
    batch = min(cfg.batch_size, n)
    lr = cfg.lr
    best = -np.inf
    stale = 0
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            loss = _batch_loss(model, method, state, lambdas, x_tr[idx], y_tr[idx], task_id,
                               temperature, feature_metric, distill_target)
            model.zero_grad()
            backward(loss)
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
            deltas, gnorm = sgd_step(params, grads, velocity, cfg, lr)
            report.max_grad_norm = max(report.max_grad_norm, gnorm)
            if state.pathint is not None and method is Method.PATHINT:
                pathint_step(state.pathint, grads, deltas)
            losses.append(loss.item())
        model.zero_grad()
        acc = task_il_accuracy(model, x_val, y_val, task_id)
        report.epochs_run += 1
        report.loss_trace.append(float(np.mean(losses)))
        report.lr_trace.append(lr)
        report.val_acc_trace.append(acc)
        log.info("task %d epoch %d loss %.6f val_acc %.4f lr %.3g", task_id, epoch + 1,
                 report.loss_trace[-1], acc, lr)
        if acc > best:
            best, stale = acc, 0
        else:
            stale += 1
        if stale >= cfg.patience_epochs:
            lr /= cfg.lr_decay_factor
            stale = 0
            if lr < cfg.min_lr:
                break
    report.final_val_acc = task_il_accuracy(model, x_val, y_val, task_id)
    drift = sum(float(np.sum((v.data - backbone_start[k]) ** 2)) for k, v in model.backbone_parameters().items())
    report.backbone_drift = float(np.sqrt(drift))
    return report


def consolidate_after_task(model: ContinualModel, state: RegularizerState, task_id: int, x_train,
                           rng: np.random.Generator, num_classes: int | None = None,
                           fisher_samples: int | None = None) -> RegularizerState:
    """Record what the method needs to protect task ``task_id`` from now on."""
    method = state.method
    if method is Method.FINETUNE:
        return state
    if method.weight_family:
        theta = {k: v.data.copy() for k, v in model.named_parameters().items()}
        if method is Method.EWC:
            importance = estimate_fisher_diag(model, x_train, task_id, fisher_samples, rng)
        elif method is Method.MAS:
            importance = estimate_mas_importance(model, x_train, task_id)
        else:
            if state.pathint is None or state.pathint.steps == 0:
                importance = {k: np.zeros_like(v) for k, v in theta.items()}
            else:
                importance = pathint_finalize(state.pathint, theta)
            importance = {k: importance.get(k, np.zeros_like(v)) for k, v in theta.items()}
            if state.pathint is not None:
                state.pathint.reset(model)
        state.anchors.append(WeightAnchor(theta, importance, model.adapter_index_set()))
        return state
    n_cls = num_classes if num_classes is not None else model.branch(task_id).head.out_dim
    state.teachers.append(FrozenTeacher.capture(model, task_id, n_cls, rng))
    return state
