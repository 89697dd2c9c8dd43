"""
Continual-learning penalties.

Weight-family methods (EWC, MAS, PathInt) anchor backbone parameters to their
post-task values, weighted by a per-parameter importance diagonal.  Every
parameter under ``tasks.`` (adapters and heads) is excluded from those
penalties.  Prediction-family methods (LwF and its adapter variant) distill
the softened outputs of a frozen teacher and, for the adapter variant, also
align projected backbone features.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import AnchorError, ConfigurationError, InputError, StateError
from .nn import ContinualModel, Linear
from .tensor import (
    Tensor,
    add,
    backward,
    cosine_distance_rows,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    scale,
    softmax_cross_entropy,
    squared_distance_rows,
    sub,
    tsum,
)

PATHINT_DAMPING = 0.1
DISTILL_TEMPERATURE = 2.0


class Method(str, enum.Enum):
    FINETUNE = "finetune"
    EWC = "ewc"
    MAS = "mas"
    PATHINT = "pathint"
    LWF = "lwf"
    LWF_A = "lwf_a"

    @property
    def weight_family(self) -> bool:
        return self in (Method.EWC, Method.MAS, Method.PATHINT)

    @property
    def prediction_family(self) -> bool:
        return self in (Method.LWF, Method.LWF_A)


@dataclass(frozen=True)
class Lambdas:
    """Penalty strengths: ``weight`` for EWC/MAS/PathInt, ``distill`` and ``backbone`` for LwF."""

    weight: float = 0.0
    distill: float = 0.0
    backbone: float = 0.0

    def halved(self) -> "Lambdas":
        return Lambdas(self.weight / 2, self.distill / 2, self.backbone / 2)

    def is_zero(self) -> bool:
        return self.weight == 0 and self.distill == 0 and self.backbone == 0


# starting values for stability decay
LAMBDA_START = {
    Method.FINETUNE: Lambdas(),
    Method.EWC: Lambdas(weight=10000.0),
    Method.MAS: Lambdas(weight=400.0),
    Method.PATHINT: Lambdas(weight=10.0),
    Method.LWF: Lambdas(distill=10.0),
    Method.LWF_A: Lambdas(distill=5.0, backbone=0.5),
}


@dataclass
class WeightAnchor:
    theta_star: dict[str, np.ndarray]
    importance: dict[str, np.ndarray]
    excluded: frozenset[str] = frozenset()

    def __post_init__(self):
        for k, v in self.importance.items():
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError(f"importance for {k} must be finite and non-negative")

    def paths(self) -> list[str]:
        return [p for p in self.theta_star if p not in self.excluded]


@dataclass
class FrozenTeacher:
    """Snapshot of the model after a task plus that task's fixed feature projection."""

    model: ContinualModel
    projection: np.ndarray
    task_id: int

    def __post_init__(self):
        d, c = self.projection.shape
        if d != self.model.feature_dim or c > d:
            raise ValueError(f"projection must be {self.model.feature_dim} x c with c <= d, got {self.projection.shape}")
        self.model.frozen_backbone = True
        for p in self.model.named_parameters().values():
            p.requires_grad = False
        self.projection.setflags(write=False)

    @classmethod
    def capture(cls, model: ContinualModel, task_id: int, num_classes: int,
                rng: np.random.Generator) -> "FrozenTeacher":
        d = model.feature_dim
        c = min(num_classes, d)
        projection = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, c))
        return cls(model.copy(), projection, task_id)

    def features(self, x) -> np.ndarray:
        with no_grad():
            return self.model.features(x).data

    def logits(self, x) -> list[np.ndarray]:
        with no_grad():
            return [t.data for t in self.model.forward_all(x)]

    def checksum(self) -> str:
        return self.model.checksum()


@dataclass
class PathIntAccumulator:
    theta_at_task_start: dict[str, np.ndarray]
    damping: float = PATHINT_DAMPING
    omega: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        if not self.omega:
            self.omega = {k: np.zeros_like(v) for k, v in self.theta_at_task_start.items()}

    @classmethod
    def start(cls, model: ContinualModel, damping: float = PATHINT_DAMPING) -> "PathIntAccumulator":
        return cls({k: v.data.copy() for k, v in model.backbone_parameters().items()}, damping)

    def reset(self, model: ContinualModel) -> None:
        self.theta_at_task_start = {k: v.data.copy() for k, v in model.backbone_parameters().items()}
        self.omega = {k: np.zeros_like(v) for k, v in self.theta_at_task_start.items()}
        self.steps = 0


def pathint_step(acc: PathIntAccumulator, grads: dict[str, np.ndarray], deltas: dict[str, np.ndarray]) -> None:
    for k, om in acc.omega.items():
        if k in grads and k in deltas:
            om -= grads[k] * deltas[k]
    acc.steps += 1


def pathint_finalize(acc: PathIntAccumulator, current: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    if acc.steps == 0:
        raise StateError("path integral finalized before any optimizer step")
    out = {}
    for k, om in acc.omega.items():
        moved = current[k] - acc.theta_at_task_start[k]
        out[k] = np.maximum(om, 0.0) / (moved * moved + acc.damping)
    return out


@dataclass
class RegularizerState:
    """Everything a method carries from one task to the next."""

    method: Method
    anchors: list[WeightAnchor] = field(default_factory=list)
    teachers: list[FrozenTeacher] = field(default_factory=list)
    pathint: PathIntAccumulator | None = None


def ewc_penalty(model: ContinualModel, anchors: list[WeightAnchor], lam: float) -> Tensor | None:
    """``sum_anchors sum_{i not in A} lam/2 * F_i * (theta_i - theta*_i)^2``; None for no anchors."""
    params = model.named_parameters()
    total = None
    for a_idx, anchor in enumerate(anchors):
        for path in anchor.paths():
            if path not in params:
                raise AnchorError(f"anchor {a_idx}: parameter {path!r} not in model")
            theta = params[path]
            star = anchor.theta_star[path]
            if theta.shape != star.shape or anchor.importance[path].shape != star.shape:
                raise AnchorError(f"anchor {a_idx}: shape mismatch at {path!r}: {theta.shape} vs {star.shape}")
            diff = sub(theta, Tensor(star))
            term = tsum(mul(mul(diff, diff), Tensor(anchor.importance[path])))
            total = term if total is None else add(total, term)
    if total is None:
        return None
    return scale(total, lam / 2.0)


def _traced_backward(model: ContinualModel, x, task_id: int, loss_fn):
    """Run one batched backward of ``sum_n loss_n`` and return (layer, input, delta) triples.

    ``delta`` is d loss_n / d pre-activation per sample, which is exact because
    samples never interact in the forward pass.
    """
    params = list(model.named_parameters().values())
    saved = [(p, p.grad) for p in params]
    layers = _layers(model, task_id)
    for layer in layers:
        layer.trace = []
    try:
        logits = model(x, task_id)
        loss = loss_fn(logits)
        for p in params:
            p.grad = None
        backward(loss)
        out = []
        for layer in layers:
            for lyr, inp, z in layer.trace:
                delta = z.grad if z.grad is not None else np.zeros_like(z.data)
                out.append((lyr, inp.data, delta))
        return out
    finally:
        for layer in layers:
            layer.trace = None
        for p, g in saved:
            p.grad = g


def _layers(model: ContinualModel, task_id: int) -> list[Linear]:
    br = model.branch(task_id)
    layers = list(model.backbone.layers)
    if br.adapter is not None:
        layers += [br.adapter.down, br.adapter.up]
    return layers + [br.head]


def _layer_paths(model: ContinualModel, task_id: int) -> dict[int, str]:
    prefixes = {}
    for i, layer in enumerate(model.backbone.layers):
        prefixes[id(layer)] = f"backbone.layers.{i}."
    br = model.branch(task_id)
    if br.adapter is not None:
        prefixes[id(br.adapter.down)] = f"tasks.{task_id}.adapter.down."
        prefixes[id(br.adapter.up)] = f"tasks.{task_id}.adapter.up."
    prefixes[id(br.head)] = f"tasks.{task_id}.head."
    return prefixes


def _per_sample_reduce(model, x, task_id, loss_fn, reduce, n):
    diag = {k: np.zeros_like(v.data) for k, v in model.named_parameters().items()}
    prefixes = _layer_paths(model, task_id)
    for layer, inp, delta in _traced_backward(model, x, task_id, loss_fn):
        pre = prefixes[id(layer)]
        diag[pre + "weight"] += reduce(inp).T @ reduce(delta) / n
        if layer.bias is not None:
            diag[pre + "bias"] += reduce(delta).sum(axis=0) / n
    return diag


def sample_labels(model: ContinualModel, x, task_id: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one label per row from the model's own predictive distribution."""
    with no_grad():
        logits = model(x, task_id).data
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(len(probs))
    labels = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(labels, probs.shape[1] - 1)


def estimate_fisher_diag(model: ContinualModel, x, task_id: int, num_samples: int | None = None,
                         rng: np.random.Generator | None = None, labels=None) -> dict[str, np.ndarray]:
    """Diagonal Fisher ``mean_n (d log p(y_n|x_n) / d theta)^2``.

    Labels are sampled from the model's softmax unless ``labels`` is given.
    """
    x = np.asarray(x, dtype=np.float64)
    if num_samples is not None:
        x = x[:num_samples]
        labels = None if labels is None else np.asarray(labels)[:num_samples]
    if len(x) == 0:
        raise InputError("Fisher estimation needs at least one sample")
    if labels is None:
        labels = sample_labels(model, x, task_id, rng if rng is not None else np.random.default_rng(0))
    n = len(x)
    # sum of per-sample losses: scale the mean by n
    return _per_sample_reduce(model, x, task_id,
                              lambda lg: scale(softmax_cross_entropy(lg, labels), float(n)),
                              np.square, n)


def estimate_mas_importance(model: ContinualModel, x, task_id: int) -> dict[str, np.ndarray]:
    """MAS importance ``mean_n |d ||logits(x_n)||^2 / d theta|``."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise InputError("MAS importance needs at least one sample")
    return _per_sample_reduce(model, x, task_id, lambda lg: tsum(mul(lg, lg)), np.abs, len(x))


def distill_loss(teacher: FrozenTeacher | None, model: ContinualModel, x,
                 temperature: float = DISTILL_TEMPERATURE, student_logits: list[Tensor] | None = None) -> Tensor | None:
    """Temperature-scaled KL from each old branch of ``teacher`` to the same branch of ``model``.

    Returns None when there is nothing to distill.
    """
    if teacher is None or teacher.model.num_tasks == 0:
        return None
    n_old = teacher.model.num_tasks
    t_logits = teacher.logits(x)
    if student_logits is None:
        student_logits = model.forward_all(x, upto=n_old)
    total = None
    for k in range(n_old):
        p_log = log_softmax(Tensor(t_logits[k] * (1.0 / temperature))).data
        p = np.exp(p_log)
        q_log = log_softmax(scale(student_logits[k], 1.0 / temperature))
        kl = tsum(mul(Tensor(p), sub(Tensor(p_log), q_log)))
        total = kl if total is None else add(total, kl)
    batch = len(t_logits[0])
    return scale(total, temperature * temperature / batch)


def feature_distill_loss(teacher: FrozenTeacher | None, model: ContinualModel, x,
                         features: Tensor | None = None) -> Tensor | None:
    """Mean cosine distance between the teacher's and the model's raw backbone features."""
    if teacher is None:
        return None
    if features is None:
        features = model.features(x)
    return mean(cosine_distance_rows(Tensor(teacher.features(x)), features))


def backbone_reg(teachers: list[FrozenTeacher], model: ContinualModel, x, metric: str = "cosine",
                 features: Tensor | None = None) -> Tensor | None:
    """Sum over teachers of the mean distance between projected old and new features."""
    if not teachers:
        return None
    dist = {"cosine": cosine_distance_rows, "mse": squared_distance_rows}[metric]
    if features is None:
        features = model.features(x)
    total = None
    for teacher in teachers:
        if teacher.projection is None:
            raise ConfigurationError(f"teacher for task {teacher.task_id} has no projection")
        proj = Tensor(teacher.projection)
        old = Tensor(teacher.features(x) @ teacher.projection)
        term = mean(dist(old, matmul(features, proj)))
        total = term if total is None else add(total, term)
    return total


def total_loss(kind: Method, task_loss: Tensor, model: ContinualModel, state: RegularizerState,
               lambdas: Lambdas, x=None, temperature: float = DISTILL_TEMPERATURE,
               feature_metric: str = "cosine", features: Tensor | None = None,
               student_logits: list[Tensor] | None = None, distill_target: str = "heads") -> Tensor:
    """Assemble the per-method training objective around ``task_loss``.

    ``distill_target="features"`` swaps the prediction distillation for a
    cosine distance between raw old and new backbone features (experimental).
    """
    kind = Method(kind)
    loss = task_loss
    if kind is Method.FINETUNE:
        return loss
    if kind.weight_family:
        if state.anchors and lambdas.weight != 0:
            pen = ewc_penalty(model, state.anchors, lambdas.weight)
            if pen is not None:
                loss = add(loss, pen)
        return loss
    if x is None:
        raise ConfigurationError(f"{kind.value} needs the input batch for distillation")
    if kind is Method.LWF_A and state.teachers and any(t.projection is None for t in state.teachers):
        raise ConfigurationError("LwF with backbone regularization needs per-teacher projections")
    teacher = state.teachers[-1] if state.teachers else None
    if lambdas.distill != 0:
        if distill_target == "features":
            r = feature_distill_loss(teacher, model, x, features)
        else:
            r = distill_loss(teacher, model, x, temperature, student_logits)
        if r is not None:
            loss = add(loss, scale(r, lambdas.distill))
    if kind is Method.LWF_A and lambdas.backbone != 0:
        r = backbone_reg(state.teachers, model, x, feature_metric, features)
        if r is not None:
            loss = add(loss, scale(r, lambdas.backbone))
    return loss
