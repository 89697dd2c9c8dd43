"""
JSON checkpoint container.

Layout (``format_version`` 1)::

    {
      "format": "adaptcl-checkpoint",
      "format_version": 1,
      "model": {
        "architecture": {...},           # enough to rebuild the layers
        "params": {path: {"shape": [...], "values": [...]}, ...}
      },
      "regularizer": {...} | null        # optional RegularizerState
    }

Floats are written with ``repr`` precision, so a save/load round trip is exact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ParseError
from .nn import Adapter, Backbone, ContinualModel, Linear, TaskBranch
from .regularizers import FrozenTeacher, Method, PathIntAccumulator, RegularizerState, WeightAnchor

FORMAT = "adaptcl-checkpoint"
FORMAT_VERSION = 1


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in np.asarray(a).reshape(-1)]}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


def _linear_from_spec(spec: dict) -> Linear:
    return Linear(spec["in"], spec["out"], spec["activation"], bias=spec["bias"])


def model_to_dict(model: ContinualModel) -> dict:
    arch = {
        "input_dim": model.backbone.input_dim,
        "backbone": [layer.spec() for layer in model.backbone.layers],
        "use_adapters": model.use_adapters,
        "adapter_activation": model.adapter_activation,
        "frozen_backbone": model.frozen_backbone,
        "tasks": [
            {
                "classes": [int(c) for c in br.classes],
                "head": br.head.spec(),
                "bottleneck_width": br.adapter.bottleneck_width if br.adapter is not None else None,
            }
            for br in model.tasks
        ],
    }
    return {"architecture": arch, "params": {k: _arr(v.data) for k, v in model.named_parameters().items()}}


def model_from_dict(d: dict) -> ContinualModel:
    arch = d["architecture"]
    backbone = Backbone([_linear_from_spec(s) for s in arch["backbone"]], arch["input_dim"])
    model = ContinualModel(backbone, arch["use_adapters"], arch["adapter_activation"], arch["frozen_backbone"])
    for t in arch["tasks"]:
        adapter = None
        if t["bottleneck_width"] is not None:
            adapter = Adapter(backbone.output_dim, t["bottleneck_width"], arch["adapter_activation"])
        model.tasks.append(TaskBranch(_linear_from_spec(t["head"]), list(t["classes"]), adapter))
    model.load_state_dict({k: _unarr(v) for k, v in d["params"].items()})
    return model


def state_to_dict(state: RegularizerState) -> dict:
    out = {
        "method": state.method.value,
        "anchors": [
            {
                "theta_star": {k: _arr(v) for k, v in a.theta_star.items()},
                "importance": {k: _arr(v) for k, v in a.importance.items()},
                "excluded": sorted(a.excluded),
            }
            for a in state.anchors
        ],
        "teachers": [
            {"task_id": t.task_id, "projection": _arr(t.projection), "model": model_to_dict(t.model)}
            for t in state.teachers
        ],
        "pathint": None,
    }
    if state.pathint is not None:
        p = state.pathint
        out["pathint"] = {
            "damping": p.damping,
            "steps": p.steps,
            "theta_at_task_start": {k: _arr(v) for k, v in p.theta_at_task_start.items()},
            "omega": {k: _arr(v) for k, v in p.omega.items()},
        }
    return out


def state_from_dict(d: dict) -> RegularizerState:
    state = RegularizerState(Method(d["method"]))
    for a in d["anchors"]:
        state.anchors.append(WeightAnchor(
            {k: _unarr(v) for k, v in a["theta_star"].items()},
            {k: _unarr(v) for k, v in a["importance"].items()},
            frozenset(a["excluded"]),
        ))
    for t in d["teachers"]:
        state.teachers.append(FrozenTeacher(model_from_dict(t["model"]), _unarr(t["projection"]), t["task_id"]))
    if d.get("pathint"):
        p = d["pathint"]
        state.pathint = PathIntAccumulator(
            {k: _unarr(v) for k, v in p["theta_at_task_start"].items()}, p["damping"],
            {k: _unarr(v) for k, v in p["omega"].items()}, p["steps"])
    return state


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_checkpoint(path, model: ContinualModel, state: RegularizerState | None = None) -> None:
    doc = {"format": FORMAT, "format_version": FORMAT_VERSION, "model": model_to_dict(model),
           "regularizer": state_to_dict(state) if state is not None else None}
    atomic_write_text(path, json.dumps(doc))


def load_checkpoint(path) -> tuple[ContinualModel, RegularizerState | None]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a JSON checkpoint ({exc})") from None
    if doc.get("format") != FORMAT:
        raise ParseError(f"{path}: not an {FORMAT} file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    model = model_from_dict(doc["model"])
    state = state_from_dict(doc["regularizer"]) if doc.get("regularizer") else None
    return model, state
