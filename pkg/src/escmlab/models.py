"""The eight model variants, their training loop and checkpoints."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import neural, risk
from .errors import ConfigError, UndefinedMetricError
from .metrics import auc
from .neural import FieldSchema, ModelParams, TrainConfig

CHECKPOINT_FORMAT = "escmlab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelVariant:
    name: str

    def __post_init__(self):
        risk.check_variant(self.name)

    @property
    def has_imp_tower(self) -> bool:
        return self.name in risk.IMPUTING_VARIANTS

    @property
    def selection_task(self) -> str:
        # ESMM never sees CVR labels directly, so it is selected on CTCVR
        return "ctcvr" if self.name == "ESMM" else "cvr"


def _variant(v) -> ModelVariant:
    return v if isinstance(v, ModelVariant) else ModelVariant(v)


@dataclass
class Model:
    variant: ModelVariant
    params: ModelParams
    config: TrainConfig

    @property
    def tower_count(self) -> int:
        return len(self.params.tasks)

    @property
    def objective(self) -> risk.Objective:
        return risk.Objective.from_config(self.variant.name, self.config)


@dataclass(frozen=True)
class TrainedModel:
    variant: ModelVariant
    params: ModelParams
    selection_step: int
    validation_metric: float


@dataclass
class TrainingTrace:
    """Per-step objective values and per-checkpoint validation metrics."""

    steps: list = field(default_factory=list)
    breakdowns: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (step, metric)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(b, name) for b in self.breakdowns])

    def to_dict(self) -> dict:
        return {
            "steps": list(self.steps),
            **{k: self.column(k).tolist() for k in ("l_ctr", "l_cvr", "l_ctcvr", "total")},
            "checkpoints": [[s, m] for s, m in self.checkpoints],
        }


@dataclass
class Predictions:
    o_hat: np.ndarray
    r_hat: np.ndarray

    @property
    def ctcvr(self) -> np.ndarray:
        return self.o_hat * self.r_hat

    def __iter__(self):
        return iter((self.o_hat, self.r_hat, self.ctcvr))


def build(variant, schema: FieldSchema, config: TrainConfig) -> Model:
    """Fresh model: shared embedding table, one tower per task."""
    variant = _variant(variant)
    params = neural.init_params(schema, config, config.seed, with_imp=variant.has_imp_tower)
    return Model(variant, params, config)


def _frozen(params: ModelParams) -> ModelParams:
    out = params.copy()
    for v in out.tensors.values():
        v.setflags(write=False)
    return out


def _features(records):
    if hasattr(records, "features"):
        return np.asarray(records.features, dtype=np.int64)
    if isinstance(records, np.ndarray):
        return records.astype(np.int64)
    return np.asarray([rec.features for rec in records], dtype=np.int64)


def predict_params(params: ModelParams, records, chunk: int = 8192) -> Predictions:
    features = _features(records)
    if features.ndim == 1:
        features = features.reshape(0, params.schema.field_count)
    o_hat = np.empty(features.shape[0])
    r_hat = np.empty(features.shape[0])
    for start in range(0, features.shape[0], chunk):
        out, _ = neural.forward_batch(params, features[start : start + chunk], tasks=("ctr", "cvr"))
        o_hat[start : start + chunk] = out["ctr"]
        r_hat[start : start + chunk] = out["cvr"]
    return Predictions(o_hat, r_hat)


def predict(trained: TrainedModel, records) -> Predictions:
    """Per-record (CTR, CVR, CTCVR) estimates; CTCVR is their product."""
    return predict_params(trained.params, records)


def selection_metric(params: ModelParams, variant: ModelVariant, dataset) -> float:
    pred = predict_params(params, dataset)
    try:
        if variant.selection_task == "ctcvr":
            return auc(dataset.o * dataset.r, pred.ctcvr)
        clicked = dataset.o == 1
        return auc(dataset.r[clicked], pred.r_hat[clicked])
    except UndefinedMetricError:
        return float("nan")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def train(model: Model, train_set, valid_set, config: TrainConfig | None = None):
    """Mini-batch training with periodic validation and best-snapshot selection.

    Validation runs every ``eval_every`` steps and at the final step; the
    returned model is the checkpoint with the highest validation AUC.
    """
    config = config or model.config
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ConfigError("training and validation sets must be nonempty")
    if model.variant.has_imp_tower and "imp" not in model.params.tasks:
        raise ConfigError(f"{model.variant.name} needs an imputation tower")
    objective = risk.Objective.from_config(model.variant.name, config)
    params = model.params
    trace = TrainingTrace()

    best_params = params.copy()
    best_step = 0
    best_metric = float("nan")
    if config.max_steps == 0:
        best_metric = selection_metric(params, model.variant, valid_set)
        trace.checkpoints.append((0, best_metric))

    n = len(train_set)
    bs = min(config.batch_size, n)
    epoch, cursor = 0, 0
    order = _epoch_order(config.seed, epoch, n)
    for step in range(1, config.max_steps + 1):
        if cursor + bs > n:
            epoch += 1
            cursor = 0
            order = _epoch_order(config.seed, epoch, n)
        idx = order[cursor : cursor + bs]
        cursor += bs
        batch = SimpleNamespace(features=train_set.features[idx], o=train_set.o[idx], r=train_set.r[idx])
        _, breakdown = neural.grad_step(params, batch, objective, config)
        trace.steps.append(step)
        trace.breakdowns.append(breakdown)
        if step % config.eval_every == 0 or step == config.max_steps:
            metric = selection_metric(params, model.variant, valid_set)
            trace.checkpoints.append((step, metric))
            if np.isnan(best_metric) or metric > best_metric:
                best_metric, best_step = metric, step
                best_params = params.copy()

    trained = TrainedModel(model.variant, _frozen(best_params), best_step, float(best_metric))
    return trained, trace


# --------------------------------------------------------------------------
# checkpoints


def _encode(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def checkpoint_dict(trained: TrainedModel, config: TrainConfig) -> dict:
    p = trained.params
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": trained.variant.name,
        "schema": p.schema.to_dict(),
        "config": config.to_dict(),
        "architecture": {
            "hidden_sizes": list(p.hidden_sizes),
            "expert_count": p.expert_count,
            "tasks": list(p.tasks),
            "prob_epsilon": p.prob_epsilon,
        },
        "selection_step": trained.selection_step,
        "validation_metric": trained.validation_metric,
        "tensors": {name: _encode(p.tensors[name]) for name in sorted(p.tensors)},
    }


def save_checkpoint(trained: TrainedModel, config: TrainConfig, path):
    text = json.dumps(checkpoint_dict(trained, config), sort_keys=True, indent=1)
    Path(path).write_bytes((text + "\n").encode("utf-8"))


def load_checkpoint(path):
    """Return ``(TrainedModel, TrainConfig)`` from a checkpoint file."""
    obj = json.loads(Path(path).read_bytes().decode("utf-8"))
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {obj.get('version')}")
    s = obj["schema"]
    schema = FieldSchema(s["field_count"], tuple(s["cardinalities"]), s["embedding_dim"])
    arch = obj["architecture"]
    tensors = {name: _decode(t) for name, t in obj["tensors"].items()}
    params = ModelParams(
        schema=schema,
        hidden_sizes=tuple(arch["hidden_sizes"]),
        expert_count=arch["expert_count"],
        tasks=tuple(arch["tasks"]),
        prob_epsilon=arch["prob_epsilon"],
        tensors=tensors,
    )
    trained = TrainedModel(
        ModelVariant(obj["variant"]), _frozen(params), obj["selection_step"], obj["validation_metric"]
    )
    return trained, TrainConfig(**obj["config"])
