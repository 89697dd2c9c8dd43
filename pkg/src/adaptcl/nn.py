"""Layers, the shared backbone, bottleneck adapters and the multi-branch model."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TaskLookupError
from .tensor import ACTIVATIONS, Tensor, add, add_bias, matmul


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Fully connected layer ``activation(x @ W + b)`` with ``W`` of shape [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 bias: bool = True, rng: np.random.Generator | None = None,
                 zero_bias: bool = True):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        w = _uniform(rng, in_dim, (in_dim, out_dim)) if rng is not None else np.zeros((in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = None
        if bias:
            b = np.zeros(out_dim) if zero_bias or rng is None else _uniform(rng, in_dim, (out_dim,))
            self.bias = Tensor(b, requires_grad=True)
        # when a list, (input, pre-activation) pairs are appended on every call
        self.trace: list | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"layer expects {self.in_dim} input features, got shape {x.shape}")
        z = matmul(x, self.weight)
        if self.bias is not None:
            z = add_bias(z, self.bias)
        if self.trace is not None:
            self.trace.append((self, x, z))
        return ACTIVATIONS[self.activation](z)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = {prefix + "weight": self.weight}
        if self.bias is not None:
            params[prefix + "bias"] = self.bias
        return params

    def spec(self) -> dict:
        return {"in": self.in_dim, "out": self.out_dim, "activation": self.activation,
                "bias": self.bias is not None}


class Backbone:
    """Feature extractor: a chain of linear layers ending in dimension ``output_dim``."""

    def __init__(self, layers: list[Linear], input_dim: int | None = None):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        if not layers and input_dim is None:
            raise ValueError("an empty backbone needs an explicit input_dim")
        self.layers = layers
        self.input_dim = layers[0].in_dim if layers else input_dim
        self.output_dim = layers[-1].out_dim if layers else input_dim
        self.calls = 0

    @classmethod
    def mlp(cls, input_dim: int, hidden: int = 64, depth: int = 2, activation: str = "relu",
            rng: np.random.Generator | None = None) -> "Backbone":
        dims = [input_dim] + [hidden] * depth
        return cls([Linear(i, o, activation, rng=rng) for i, o in zip(dims, dims[1:])], input_dim)

    def __call__(self, x: Tensor) -> Tensor:
        self.calls += 1
        for layer in self.layers:
            x = layer(x)
        return x

    def named_parameters(self, prefix: str = "backbone.") -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.named_parameters(f"{prefix}layers.{i}."))
        return params


class Adapter:
    """Bottleneck adapter: ``x + up(down(x))`` with both projections activated by ``g``."""

    def __init__(self, dim: int, bottleneck_width: int, activation: str = "relu",
                 rng: np.random.Generator | None = None):
        if not 1 <= bottleneck_width <= dim:
            raise ValueError(f"bottleneck width must lie in [1, {dim}], got {bottleneck_width}")
        self.dim = dim
        self.bottleneck_width = bottleneck_width
        self.down = Linear(dim, bottleneck_width, activation, rng=rng)
        self.up = Linear(bottleneck_width, dim, activation, rng=rng)

    def __call__(self, features: Tensor) -> Tensor:
        return adapter_forward(self, features)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.down.named_parameters(prefix + "down."), **self.up.named_parameters(prefix + "up.")}


def adapter_forward(adapter: Adapter, features: Tensor) -> Tensor:
    if features.data.ndim != 2 or features.shape[1] != adapter.dim:
        raise DimensionError(f"adapter of width {adapter.dim} got features of shape {features.shape}")
    return add(features, adapter.up(adapter.down(features)))


@dataclass
class TaskBranch:
    head: Linear
    classes: list
    adapter: Adapter | None = None

    def __call__(self, features: Tensor) -> Tensor:
        if self.adapter is not None:
            features = self.adapter(features)
        return self.head(features)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        if self.adapter is not None:
            params.update(self.adapter.named_parameters(prefix + "adapter."))
        params.update(self.head.named_parameters(prefix + "head."))
        return params


@dataclass
class ContinualModel:
    """Shared backbone plus one (adapter, head) branch per task.

    Parameter paths look like ``backbone.layers.0.weight`` and
    ``tasks.2.adapter.down.bias``.  Everything under ``tasks.`` forms the set
    that weight penalties leave unconstrained.
    """

    backbone: Backbone
    use_adapters: bool = True
    adapter_activation: str = "relu"
    frozen_backbone: bool = False
    tasks: list[TaskBranch] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return self.backbone.output_dim

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def spawn_task(self, num_classes: int, bottleneck_width: int | None = None,
                   rng: np.random.Generator | None = None, classes: list | None = None) -> TaskBranch:
        rng = rng if rng is not None else np.random.default_rng()
        d = self.feature_dim
        adapter = None
        if self.use_adapters:
            adapter = Adapter(d, bottleneck_width or max(1, d // 2), self.adapter_activation, rng=rng)
        head = Linear(d, num_classes, "identity", rng=rng)
        branch = TaskBranch(head, list(classes) if classes is not None else list(range(num_classes)), adapter)
        self.tasks.append(branch)
        return branch

    def branch(self, task_id: int) -> TaskBranch:
        if not 0 <= task_id < len(self.tasks):
            raise TaskLookupError(f"task {task_id} not spawned ({len(self.tasks)} tasks seen)")
        return self.tasks[task_id]

    def features(self, x) -> Tensor:
        return self.backbone(_input(x))

    def __call__(self, x, task_id: int) -> Tensor:
        return model_forward(self, x, task_id)

    def forward_all(self, x, upto: int | None = None) -> list[Tensor]:
        """Logits of every branch (or the first ``upto``) from one backbone pass."""
        feats = self.features(x)
        n = len(self.tasks) if upto is None else upto
        return [self.branch(t)(feats) for t in range(n)]

    def named_parameters(self) -> dict[str, Tensor]:
        params = self.backbone.named_parameters()
        for t, br in enumerate(self.tasks):
            params.update(br.named_parameters(f"tasks.{t}."))
        return params

    def backbone_parameters(self) -> dict[str, Tensor]:
        return self.backbone.named_parameters()

    def adapter_index_set(self) -> frozenset[str]:
        return frozenset(p for p in self.named_parameters() if p.startswith("tasks."))

    def trainable_parameters(self, task_id: int) -> dict[str, Tensor]:
        """Parameters an optimizer may touch while training ``task_id``."""
        params = {} if self.frozen_backbone else self.backbone_parameters()
        params.update(self.branch(task_id).named_parameters(f"tasks.{task_id}."))
        return params

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            raise KeyError(f"state paths differ: {sorted(set(params) ^ set(state))}")
        for k, v in state.items():
            if params[k].shape != np.shape(v):
                raise DimensionError(f"{k}: expected {params[k].shape}, got {np.shape(v)}")
            params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "ContinualModel":
        clone = copy.deepcopy(self)
        for p in clone.named_parameters().values():
            p.grad = None
            p._node = None
        return clone

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.named_parameters().items()):
            if k.startswith(prefix):
                h.update(k.encode())
                h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()


def _input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def model_forward(model: ContinualModel, x, task_id: int) -> Tensor:
    branch = model.branch(task_id)
    return branch(model.features(x))


def spawn_task(model: ContinualModel, num_classes: int, bottleneck_width: int | None,
               rng: np.random.Generator) -> TaskBranch:
    return model.spawn_task(num_classes, bottleneck_width, rng)


def build_model(input_dim: int, hidden: int = 64, depth: int = 2, use_adapters: bool = True,
                adapter_activation: str = "relu", rng: np.random.Generator | None = None) -> ContinualModel:
    """Default desk-scale model: an MLP backbone of ``depth`` relu layers."""
    rng = rng if rng is not None else np.random.default_rng()
    return ContinualModel(Backbone.mlp(input_dim, hidden, depth, rng=rng), use_adapters, adapter_activation)
