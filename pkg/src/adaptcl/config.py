"""
Experiment configuration: YAML on disk, dataclasses in memory.

Schema (every key optional; defaults shown)::

    name: null                 # label in summaries; derived from method/flags if null
    dataset:
      kind: synthetic          # synthetic | csv | idx
      num_classes: 20          # synthetic only
      dim: 16
      per_class: 200
      sep: 3.0
      group_size: 5
      group_spread: null       # set to cluster class means into coarse groups
      seed: null               # data seed; null = the run seed
      path: null               # csv
      images: null             # idx images file
      labels: null             # idx labels file
      superclass_map: null     # two-column CSV class,group
    ordering: seeded_random    # alphabetical | seeded_random | coarse
    order_seed: null           # null = the run seed
    classes_per_task: 4
    num_tasks: null            # truncate the stream
    test_fraction: 0.2
    val_fraction: 0.1
    method: finetune           # finetune ewc mas pathint lwf lwf_a ewc_a mas_a pathint_a
    use_adapters: null         # null = implied by method
    freeze_backbone: false     # freeze the backbone after the first task
    use_backbone_reg: null     # null = implied by method
    bottleneck_width: null     # null = feature_dim / 2
    backbone: {hidden: 64, depth: 2}
    lambdas: null              # {weight, distill, backbone}; null = method defaults
    temperature: 2.0
    feature_metric: cosine     # cosine | mse
    distill_target: heads      # heads | features
    fisher_samples: null
    optimizer: {lr: 0.05, momentum: 0.9, weight_decay: 0.0002, clip_norm: 1.0,
                lr_decay_factor: 3.0, patience_epochs: 10, min_lr: 0.0001,
                max_epochs: 100, batch_size: 128}
    hypersearch: false
    search: {first_task_lrs: [0.5, 0.1, 0.05], later_task_lrs: [0.1, 0.05, 0.01, 0.005, 0.001],
             accuracy_fraction: 0.95, max_halvings: 8}
    seeds: [0]
    workers: 1
    output_dir: runs/experiment
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import ORDERINGS
from .errors import ConfigValidationError
from .hypersearch import SearchPolicy
from .regularizers import LAMBDA_START, Lambdas, Method
from .trainer import OptimizerConfig

METHODS = ("finetune", "ewc", "mas", "pathint", "lwf", "lwf_a", "ewc_a", "mas_a", "pathint_a")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 20
    dim: int = 16
    per_class: int = 200
    sep: float = 3.0
    group_size: int = 5
    group_spread: float | None = None
    seed: int | None = None
    path: str | None = None
    images: str | None = None
    labels: str | None = None
    superclass_map: str | None = None


@dataclass
class BackboneSpec:
    hidden: int = 64
    depth: int = 2


@dataclass
class OptimizerSpec:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4
    clip_norm: float | None = 1.0
    lr_decay_factor: float = 3.0
    patience_epochs: int = 10
    min_lr: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 128

    def build(self) -> OptimizerConfig:
        return OptimizerConfig(**dataclasses.asdict(self))


@dataclass
class SearchSpec:
    first_task_lrs: list[float] = field(default_factory=lambda: [5e-1, 1e-1, 5e-2])
    later_task_lrs: list[float] = field(default_factory=lambda: [1e-1, 5e-2, 1e-2, 5e-3, 1e-3])
    accuracy_fraction: float = 0.95
    max_halvings: int = 8


@dataclass
class LambdaSpec:
    weight: float = 0.0
    distill: float = 0.0
    backbone: float = 0.0


@dataclass
class ExperimentConfig:
    name: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    ordering: str = "seeded_random"
    order_seed: int | None = None
    classes_per_task: int = 4
    num_tasks: int | None = None
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    method: str = "finetune"
    use_adapters: bool | None = None
    freeze_backbone: bool = False
    use_backbone_reg: bool | None = None
    bottleneck_width: int | None = None
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    lambdas: LambdaSpec | None = None
    temperature: float = 2.0
    feature_metric: str = "cosine"
    distill_target: str = "heads"
    fisher_samples: int | None = None
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    hypersearch: bool = False
    search: SearchSpec = field(default_factory=SearchSpec)
    seeds: list[int] = field(default_factory=lambda: [0])
    workers: int = 1
    output_dir: str = "runs/experiment"

    # resolved views ------------------------------------------------------

    @property
    def base_method(self) -> Method:
        name = self.method[:-2] if self.method.endswith("_a") else self.method
        return Method(name)

    @property
    def adapters(self) -> bool:
        if self.use_adapters is not None:
            return self.use_adapters
        return self.method.endswith("_a") or bool(self.use_backbone_reg)

    @property
    def backbone_reg(self) -> bool:
        if self.use_backbone_reg is not None:
            return self.use_backbone_reg
        return self.method == "lwf_a"

    @property
    def loss_kind(self) -> Method:
        base = self.base_method
        return Method.LWF_A if base is Method.LWF and self.backbone_reg else base

    def resolved_lambdas(self) -> Lambdas:
        if self.lambdas is not None:
            return Lambdas(self.lambdas.weight, self.lambdas.distill, self.lambdas.backbone)
        return LAMBDA_START[self.loss_kind]

    def search_policy(self) -> SearchPolicy:
        start = dict(LAMBDA_START)
        start[self.loss_kind] = self.resolved_lambdas()
        return SearchPolicy(tuple(self.search.first_task_lrs), tuple(self.search.later_task_lrs),
                            self.search.accuracy_fraction, start, self.search.max_halvings)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        base = self.base_method.value
        if not self.adapters:
            return base
        if self.freeze_backbone:
            return f"{base}_a_fb"
        if self.base_method is Method.LWF and not self.backbone_reg:
            return "lwf_a_noreg"
        return f"{base}_a"

    # validation ----------------------------------------------------------

    def problems(self) -> list[str]:
        out = []
        if self.method not in METHODS:
            out.append(f"method must be one of {', '.join(METHODS)}; got {self.method!r}")
            return out
        implied_adapters = self.method.endswith("_a")
        if implied_adapters and self.use_adapters is False:
            out.append(f"method {self.method} implies use_adapters=true")
        if self.method == "lwf_a" and self.use_backbone_reg is False:
            out.append("method lwf_a implies use_backbone_reg=true")
        if self.backbone_reg and not self.adapters:
            out.append("use_backbone_reg requires use_adapters")
        if self.backbone_reg and self.base_method is not Method.LWF:
            out.append("use_backbone_reg is only defined for the lwf family")
        if self.backbone_reg and self.freeze_backbone:
            out.append("use_backbone_reg has no effect with freeze_backbone")
        ds = self.dataset
        if ds.kind not in ("synthetic", "csv", "idx"):
            out.append(f"dataset.kind must be synthetic, csv or idx; got {ds.kind!r}")
        elif ds.kind == "synthetic":
            for k in ("num_classes", "dim", "per_class", "group_size"):
                if getattr(ds, k) < 1:
                    out.append(f"dataset.{k} must be positive")
            if ds.sep < 0:
                out.append("dataset.sep must be non-negative")
        elif ds.kind == "csv" and not ds.path:
            out.append("dataset.path is required for csv datasets")
        elif ds.kind == "idx" and not (ds.images and ds.labels):
            out.append("dataset.images and dataset.labels are required for idx datasets")
        if self.ordering not in ORDERINGS:
            out.append(f"ordering must be one of {', '.join(ORDERINGS)}; got {self.ordering!r}")
        if self.ordering == "coarse" and ds.kind != "synthetic" and not ds.superclass_map:
            out.append("coarse ordering needs dataset.superclass_map for non-synthetic data")
        if self.classes_per_task < 1:
            out.append("classes_per_task must be positive")
        if self.num_tasks is not None and self.num_tasks < 1:
            out.append("num_tasks must be positive")
        if not 0 <= self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            out.append("test_fraction and val_fraction must lie in [0, 1)")
        if self.bottleneck_width is not None and self.bottleneck_width < 1:
            out.append("bottleneck_width must be positive")
        if self.bottleneck_width is not None and self.bottleneck_width > self.backbone.hidden:
            out.append("bottleneck_width cannot exceed the feature dimension")
        if self.backbone.hidden < 1 or self.backbone.depth < 1:
            out.append("backbone.hidden and backbone.depth must be positive")
        if self.temperature <= 0:
            out.append("temperature must be positive")
        if self.feature_metric not in ("cosine", "mse"):
            out.append("feature_metric must be cosine or mse")
        if self.distill_target not in ("heads", "features"):
            out.append("distill_target must be heads or features")
        if self.lambdas is not None and min(self.lambdas.weight, self.lambdas.distill, self.lambdas.backbone) < 0:
            out.append("lambdas must be non-negative")
        try:
            self.optimizer.build()
        except ValueError as exc:
            out.append(f"optimizer: {exc}")
        try:
            self.search_policy()
        except ValueError as exc:
            out.append(f"search: {exc}")
        if not self.seeds:
            out.append("seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            out.append("seeds must be distinct")
        if self.workers < 1:
            out.append("workers must be positive")
        return out

    def validate(self) -> "ExperimentConfig":
        try:
            problems = self.problems()
        except TypeError as exc:
            raise ConfigValidationError([f"wrong value type: {exc}"]) from None
        if problems:
            raise ConfigValidationError(problems)
        return self

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {}, "")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigValidationError([f"not valid YAML: {exc}"]) from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text(encoding="utf-8"))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {"dataset": DatasetSpec, "backbone": BackboneSpec, "optimizer": OptimizerSpec,
           "search": SearchSpec, "lambdas": LambdaSpec}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigValidationError([f"{where or 'config'} must be a mapping"])
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigValidationError([f"unknown key {where}{k}" for k in unknown])
    kwargs = {}
    for k, v in d.items():
        if k in _NESTED and cls is ExperimentConfig:
            kwargs[k] = None if v is None and k == "lambdas" else _build(_NESTED[k], v or {}, f"{k}.")
        else:
            kwargs[k] = v
    if cls is ExperimentConfig and "seeds" in kwargs:
        kwargs["seeds"] = [int(s) for s in kwargs["seeds"]]
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigValidationError([str(exc)]) from None
