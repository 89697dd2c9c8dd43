"""Experiment execution, persistence and summaries."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import atomic_write_text
from .config import ExperimentConfig, LambdaSpec
from .data import LabeledDataset, build_stream, load_csv, load_idx, load_superclass_map, make_synthetic
from .errors import InputError, NumericError, StateError
from .evaluation import AccuracyMatrix, average_accuracy, evaluate_class_il, evaluate_task_il, mean_forgetting
from .hypersearch import maximal_plasticity_search, stability_decay
from .nn import build_model
from .regularizers import LAMBDA_START, Lambdas, Method, RegularizerState
from .trainer import consolidate_after_task, train_task

log = logging.getLogger(__name__)

MANIFEST = "run.json"


def load_dataset(config: ExperimentConfig, seed: int) -> LabeledDataset:
    spec = config.dataset
    if spec.kind == "synthetic":
        rng = np.random.default_rng(spec.seed if spec.seed is not None else seed)
        return make_synthetic(spec.num_classes, spec.dim, spec.per_class, spec.sep, rng,
                              spec.group_size, spec.group_spread)
    ds = load_csv(spec.path) if spec.kind == "csv" else load_idx(spec.images, spec.labels)
    if spec.superclass_map:
        ds.superclass_map = load_superclass_map(spec.superclass_map)
    return ds


def make_stream(config: ExperimentConfig, seed: int):
    ds = load_dataset(config, seed)
    order_seed = config.order_seed if config.order_seed is not None else seed
    stream = build_stream(ds, config.classes_per_task, config.ordering, order_seed,
                          config.test_fraction, config.val_fraction)
    if config.num_tasks is not None:
        stream.tasks = stream.tasks[:config.num_tasks]
    return stream


@dataclass
class SeedResult:
    seed: int
    task_il: AccuracyMatrix
    class_il: AccuracyMatrix
    search_log: list[dict] = field(default_factory=list)
    reports: list[dict] = field(default_factory=list)
    lambdas: list[dict] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None

    def a_series(self, protocol: str = "task_il") -> list[float]:
        m = getattr(self, protocol)
        return [average_accuracy(m, t) for t in range(1, m.completed_rows() + 1)]

    def forgetting_series(self, protocol: str = "task_il") -> list[float]:
        m = getattr(self, protocol)
        return [mean_forgetting(m, t) for t in range(1, m.completed_rows() + 1)]


def run_seed(config: ExperimentConfig, seed: int) -> SeedResult:
    """Train and evaluate one seed end to end."""
    stream = make_stream(config, seed)
    n_tasks = len(stream.tasks)
    result = SeedResult(seed, AccuracyMatrix(n_tasks), AccuracyMatrix(n_tasks))
    init_rng, cons_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    model = build_model(stream.dataset.input_dim, config.backbone.hidden, config.backbone.depth,
                        config.adapters, rng=init_rng)
    # overflow surfaces as NumericError from the finiteness checks; silence numpy's duplicate warnings
    with np.errstate(over="ignore", invalid="ignore"):
        _train_stream(config, seed, stream, model, result, init_rng, cons_rng)
    return result


def _train_stream(config: ExperimentConfig, seed: int, stream, model, result: SeedResult,
                  init_rng: np.random.Generator, cons_rng: np.random.Generator) -> None:
    kind = config.loss_kind
    state = RegularizerState(kind)
    cfg = config.optimizer.build()
    policy = config.search_policy()
    lambdas = config.resolved_lambdas()
    extra = {"temperature": config.temperature, "feature_metric": config.feature_metric,
             "distill_target": config.distill_target}
    try:
        for t, task in enumerate(stream.tasks):
            model.spawn_task(task.num_classes, config.bottleneck_width, init_rng, task.classes)
            if config.freeze_backbone and t >= 1:
                model.frozen_backbone = True
            train_seed = seed * 100003 + t
            used = lambdas
            if config.hypersearch:
                lr, ft_acc, rows = maximal_plasticity_search(model, stream, t, policy, cfg, train_seed)
                res = stability_decay(model, stream, t, kind, lambdas, lr, ft_acc, policy, cfg, state,
                                      train_seed, **extra)
                model, state, report, used = res.model, res.state, res.report, res.lambdas
                result.search_log += [r.to_dict() for r in rows + res.rows]
            else:
                report = train_task(model, stream, t, kind, lambdas, cfg, np.random.default_rng(train_seed),
                                    state, **extra)
            result.reports.append(report.to_dict())
            result.lambdas.append(dataclasses.asdict(used))
            consolidate_after_task(model, state, t, stream.split(t, "train")[0], cons_rng,
                                   task.num_classes, config.fisher_samples)
            for k in range(t + 1):
                result.task_il.set(t + 1, k + 1, evaluate_task_il(model, stream, k))
                result.class_il.set(t + 1, k + 1, evaluate_class_il(model, stream, k))
            log.info("seed %d task %d A_t %.4f", seed, t + 1, average_accuracy(result.task_il, t + 1))
    except NumericError as exc:
        result.status = "failed"
        result.error = f"numeric error: {exc}"


def _run_seed_worker(args):
    config_dict, seed = args
    return run_seed(ExperimentConfig.from_dict(config_dict), seed)


@dataclass
class RunRecord:
    config: ExperimentConfig
    seeds: list[SeedResult]
    wall_clock: float = 0.0
    version: str = __version__
    directory: str | None = None

    @property
    def label(self) -> str:
        return self.config.label

    @property
    def failed(self) -> bool:
        return any(s.status != "ok" for s in self.seeds)

    @property
    def completed_seeds(self) -> list[SeedResult]:
        return [s for s in self.seeds if s.status == "ok"]

    def _aggregate(self, series_of) -> tuple[np.ndarray, np.ndarray]:
        done = self.completed_seeds
        if not done:
            raise StateError(f"run {self.label!r} has no completed seeds")
        series = np.array([series_of(s) for s in done], dtype=np.float64)
        return series.mean(axis=0), series.std(axis=0)

    def a_curve(self, protocol: str = "task_il") -> tuple[np.ndarray, np.ndarray]:
        """Mean and (population) std of A_t for t = 1..T over the seeds that finished."""
        return self._aggregate(lambda s: s.a_series(protocol))

    def forgetting_curve(self, protocol: str = "task_il") -> tuple[np.ndarray, np.ndarray]:
        return self._aggregate(lambda s: s.forgetting_series(protocol))

    def manifest(self) -> dict:
        seeds = []
        for s in self.seeds:
            seeds.append({
                "seed": s.seed,
                "status": s.status,
                "error": s.error,
                "task_il_csv": f"seed_{s.seed}/task_il.csv",
                "class_il_csv": f"seed_{s.seed}/class_il.csv",
                "search_log_csv": f"seed_{s.seed}/search_log.csv",
                "task_il": s.task_il.tolist(),
                "class_il": s.class_il.tolist(),
                "A_t": s.a_series("task_il"),
                "A_t_class_il": s.a_series("class_il"),
                "forgetting": s.forgetting_series("task_il"),
                "lambdas": s.lambdas,
                "reports": s.reports,
            })
        out = {
            "toolkit": "adaptcl",
            "version": self.version,
            "label": self.label,
            "status": "failed" if self.failed else "ok",
            "wall_clock_seconds": self.wall_clock,
            "config": self.config.to_dict(),
            "seeds": seeds,
        }
        if self.completed_seeds:
            for proto in ("task_il", "class_il"):
                mean, std = self.a_curve(proto)
                out[f"aggregate_{proto}"] = {"mean_A_t": mean.tolist(), "std_A_t": std.tolist(),
                                             "seeds": [s.seed for s in self.completed_seeds]}
        return out

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for s in self.seeds:
            sd = directory / f"seed_{s.seed}"
            sd.mkdir(exist_ok=True)
            s.task_il.to_csv(sd / "task_il.csv")
            s.class_il.to_csv(sd / "class_il.csv")
            _write_rows(sd / "search_log.csv", ["phase", "task", "candidate", "accuracy", "decision"], s.search_log)
        atomic_write_text(directory / "config.yaml", self.config.to_yaml())
        atomic_write_text(directory / MANIFEST, json.dumps(self.manifest(), indent=1))
        self.directory = str(directory)
        return directory

    @classmethod
    def load(cls, directory) -> "RunRecord":
        directory = Path(directory)
        doc = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
        config = ExperimentConfig.from_dict(doc["config"])
        seeds = []
        for s in doc["seeds"]:
            seeds.append(SeedResult(
                s["seed"],
                AccuracyMatrix.from_csv(directory / s["task_il_csv"]),
                AccuracyMatrix.from_csv(directory / s["class_il_csv"]),
                _read_rows(directory / s["search_log_csv"]),
                s.get("reports", []),
                s.get("lambdas", []),
                s["status"],
                s.get("error"),
            ))
        return cls(config, seeds, doc["wall_clock_seconds"], doc["version"], str(directory))


def _write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["task"] = int(r["task"])
        r["accuracy"] = float(r["accuracy"])
    return rows


def run_experiment(config: ExperimentConfig, out_dir=None, workers: int | None = None) -> RunRecord:
    """Run every seed of ``config`` and persist the record under ``out_dir``."""
    config.validate()
    out_dir = Path(out_dir if out_dir is not None else config.output_dir)
    workers = workers if workers is not None else config.workers
    start = time.perf_counter()
    if workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_worker, [(config.to_dict(), s) for s in config.seeds]))
    else:
        results = [run_seed(config, s) for s in config.seeds]
    record = RunRecord(config, results, time.perf_counter() - start)
    record.save(out_dir)
    return record


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label)


def emit_summary(records: list[RunRecord], out_dir, protocol: str = "task_il") -> dict[str, Path]:
    """Write ``summary.csv`` (avg and final A per record) and one curve file per record."""
    if not records:
        raise InputError("emit_summary needs at least one run record")
    out_dir = Path(out_dir)
    (out_dir / "curves").mkdir(parents=True, exist_ok=True)
    rows = []
    paths = {}
    for rec in records:
        mean, std = rec.a_curve(protocol)
        f_mean, _ = rec.forgetting_curve(protocol)
        rows.append({"method": rec.label, "protocol": protocol, "seeds": len(rec.completed_seeds),
                     "failed_seeds": len(rec.seeds) - len(rec.completed_seeds),
                     "avg_acc": float(mean.mean()), "final_acc": float(mean[-1]), "final_std": float(std[-1]),
                     "final_forgetting": float(f_mean[-1])})
        path = out_dir / "curves" / f"{_slug(rec.label)}.csv"
        _write_rows(path, ["t", "mean_A_t", "std_A_t"],
                    [{"t": t + 1, "mean_A_t": float(m), "std_A_t": float(s)} for t, (m, s) in enumerate(zip(mean, std))])
        paths[rec.label] = path
    summary = out_dir / "summary.csv"
    _write_rows(summary, ["method", "protocol", "seeds", "failed_seeds", "avg_acc", "final_acc", "final_std", "final_forgetting"], rows)
    paths["summary"] = summary
    return paths


ABLATION_FLAGS = {
    # label: (use_adapters, freeze_backbone, use_backbone_reg)
    "lwf": (False, False, False),
    "lwf_a_fb": (True, True, False),
    "lwf_a_noreg": (True, False, False),
    "lwf_a": (True, False, True),
}


def ablation_configs(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """The four flag combinations, all sharing the base's seeds, stream and distillation strength."""
    lam = base.resolved_lambdas() if base.base_method is Method.LWF else LAMBDA_START[Method.LWF_A]
    if base.loss_kind is Method.LWF:
        lam = Lambdas(distill=lam.distill, backbone=LAMBDA_START[Method.LWF_A].backbone)
    out = {}
    for label, (adapters, frozen, reg) in ABLATION_FLAGS.items():
        out[label] = base.replace(
            name=label,
            method="lwf_a" if reg else "lwf",
            use_adapters=adapters,
            freeze_backbone=frozen,
            use_backbone_reg=reg,
            lambdas=LambdaSpec(0.0, lam.distill, lam.backbone),
        )
    return out


def compare_ablation(base: ExperimentConfig, out_dir=None, workers: int | None = None) -> dict[str, RunRecord]:
    """Run the four co-training/freezing/regularization configurations and write a joint curve file."""
    out_dir = Path(out_dir if out_dir is not None else base.output_dir)
    records = {label: run_experiment(cfg, out_dir / label, workers) for label, cfg in ablation_configs(base).items()}
    rows = []
    for label, rec in records.items():
        mean, std = rec.a_curve()
        rows += [{"t": t + 1, "method": label, "mean_A_t": float(m), "std_A_t": float(s)}
                 for t, (m, s) in enumerate(zip(mean, std))]
    _write_rows(out_dir / "ablation_curves.csv", ["t", "method", "mean_A_t", "std_A_t"], rows)
    emit_summary(list(records.values()), out_dir)
    return records
