"""Shared-embedding multitask network with hand-written backpropagation.

Every model in the package is the same network: one embedding table per
categorical field, concatenated into ``x``, followed by independent towers
for the CTR, CVR and (optionally) imputation tasks. With ``expert_count > 0``
a multi-gate mixture-of-experts layer sits between ``x`` and the towers.

All arithmetic is float64. Parameters live in a flat ``name -> ndarray``
mapping so that the optimizer, checkpointing and gradient checks can treat
them uniformly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import risk
from ._numerics import bce, clamp_prob, sigmoid, softplus
from .errors import ConfigError, DomainError, IndexedFeatureError, TrainingDiverged

TASKS = ("ctr", "cvr", "imp")

__all__ = [
    "FieldSchema",
    "TrainConfig",
    "ModelParams",
    "AdamState",
    "init_params",
    "forward",
    "forward_batch",
    "bce",
    "loss_and_grads",
    "grad_step",
    "finite_diff_check",
    "param_checksum",
]


@dataclass(frozen=True)
class FieldSchema:
    field_count: int
    cardinalities: tuple
    embedding_dim: int = 5

    def __post_init__(self):
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        if self.field_count < 1:
            raise ConfigError("field_count must be positive")
        if len(self.cardinalities) != self.field_count:
            raise ConfigError(
                f"{len(self.cardinalities)} cardinalities for {self.field_count} fields"
            )
        if any(c < 1 for c in self.cardinalities):
            raise ConfigError("every cardinality must be positive")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")

    @property
    def input_dim(self) -> int:
        return self.field_count * self.embedding_dim

    def check_indices(self, features: np.ndarray):
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.field_count:
            raise IndexedFeatureError(
                f"expected {self.field_count} feature columns, got shape {features.shape}"
            )
        if features.size == 0:
            return
        upper = np.asarray(self.cardinalities)
        bad = (features < 0) | (features >= upper)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise IndexedFeatureError(
                f"feature {features[row, col]} out of range for field {col} "
                f"(cardinality {upper[col]})"
            )

    def to_dict(self) -> dict:
        return {
            "field_count": self.field_count,
            "cardinalities": list(self.cardinalities),
            "embedding_dim": self.embedding_dim,
        }


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    hidden_sizes: tuple = (64, 32)
    expert_count: int = 0
    batch_size: int = 256
    max_steps: int = 10_000
    eval_every: int = 1000
    seed: int = 0
    lambda_c: float = 0.1
    lambda_g: float = 1.0
    prob_epsilon: float = 0.02

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be positive")
        if self.expert_count < 0:
            raise ConfigError("expert_count must be non-negative")
        if self.expert_count > 0 and not self.hidden_sizes:
            raise ConfigError("a mixture-of-experts backbone needs at least one hidden size")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.lambda_c < 0 or self.lambda_g < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.prob_epsilon < 0.5:
            raise ConfigError("prob_epsilon must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class ModelParams:
    schema: FieldSchema
    hidden_sizes: tuple
    expert_count: int
    tasks: tuple
    prob_epsilon: float
    tensors: dict
    optimizer_state: AdamState = field(default_factory=AdamState)

    @property
    def embedding_table(self) -> list:
        return [self.tensors[f"emb.{f}"] for f in range(self.schema.field_count)]

    def tower(self, task: str) -> Optional[list]:
        if task not in self.tasks:
            return None
        layers = []
        i = 0
        while f"{task}.W{i}" in self.tensors:
            layers.append((self.tensors[f"{task}.W{i}"], self.tensors[f"{task}.b{i}"]))
            i += 1
        return layers

    @property
    def ctr_tower(self):
        return self.tower("ctr")

    @property
    def cvr_tower(self):
        return self.tower("cvr")

    @property
    def imp_tower(self):
        return self.tower("imp")

    @property
    def backbone(self) -> Optional[dict]:
        if self.expert_count == 0:
            return None
        return {
            "experts": [
                (self.tensors[f"expert.{k}.W"], self.tensors[f"expert.{k}.b"])
                for k in range(self.expert_count)
            ],
            "gates": {
                t: (self.tensors[f"gate.{t}.W"], self.tensors[f"gate.{t}.b"]) for t in self.tasks
            },
        }

    def copy(self) -> "ModelParams":
        state = AdamState(
            self.optimizer_state.step,
            {k: v.copy() for k, v in self.optimizer_state.m.items()},
            {k: v.copy() for k, v in self.optimizer_state.v.items()},
        )
        return ModelParams(
            self.schema,
            self.hidden_sizes,
            self.expert_count,
            self.tasks,
            self.prob_epsilon,
            {k: v.copy() for k, v in self.tensors.items()},
            state,
        )


def _tower_hidden(hidden_sizes: tuple, expert_count: int) -> tuple:
    return hidden_sizes[1:] if expert_count > 0 else hidden_sizes


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(
    schema: FieldSchema, config: TrainConfig, seed: int, with_imp: bool = False
) -> ModelParams:
    """Draw a fresh parameter set.

    Weights are uniform on a symmetric interval (Glorot limits for affine
    layers, +-0.05 for embeddings); biases start at zero.
    """
    if not isinstance(schema, FieldSchema):
        raise ConfigError("schema must be a FieldSchema")
    rng = np.random.default_rng(seed)
    tasks = ("ctr", "cvr", "imp") if with_imp else ("ctr", "cvr")
    tensors = {}
    for f, card in enumerate(schema.cardinalities):
        tensors[f"emb.{f}"] = rng.uniform(-0.05, 0.05, size=(card, schema.embedding_dim))

    in_dim = schema.input_dim
    if config.expert_count > 0:
        expert_dim = config.hidden_sizes[0]
        for k in range(config.expert_count):
            tensors[f"expert.{k}.W"] = _glorot(rng, in_dim, expert_dim)
            tensors[f"expert.{k}.b"] = np.zeros(expert_dim)
        for t in tasks:
            tensors[f"gate.{t}.W"] = _glorot(rng, in_dim, config.expert_count)
            tensors[f"gate.{t}.b"] = np.zeros(config.expert_count)
        tower_in = expert_dim
    else:
        tower_in = in_dim

    sizes = _tower_hidden(config.hidden_sizes, config.expert_count) + (1,)
    for t in tasks:
        prev = tower_in
        for i, width in enumerate(sizes):
            tensors[f"{t}.W{i}"] = _glorot(rng, prev, width)
            tensors[f"{t}.b{i}"] = np.zeros(width)
            prev = width

    return ModelParams(
        schema=schema,
        hidden_sizes=config.hidden_sizes,
        expert_count=config.expert_count,
        tasks=tasks,
        prob_epsilon=config.prob_epsilon,
        tensors=tensors,
    )


def _embed(params: ModelParams, features: np.ndarray) -> np.ndarray:
    cols = [params.tensors[f"emb.{f}"][features[:, f]] for f in range(params.schema.field_count)]
    return np.concatenate(cols, axis=1)


def forward_batch(params: ModelParams, features, tasks: Sequence[str] | None = None):
    """Run the network on an ``(n, field_count)`` index array.

    Returns ``(outputs, cache)``; ``outputs[task]`` is the clamped
    probability for ctr/cvr and the softplus value for imp.
    """
    features = np.asarray(features, dtype=np.int64)
    if features.ndim == 1:
        features = features[None, :]
    params.schema.check_indices(features)
    tasks = params.tasks if tasks is None else tuple(tasks)
    for t in tasks:
        if t not in params.tasks:
            raise ConfigError(f"model has no {t} tower")
    T = params.tensors
    x = _embed(params, features)
    cache = {"features": features, "x": x, "tasks": tasks}

    if params.expert_count > 0:
        expert_pre = [x @ T[f"expert.{k}.W"] + T[f"expert.{k}.b"] for k in range(params.expert_count)]
        experts = np.stack([np.maximum(z, 0.0) for z in expert_pre], axis=1)  # (n, K, H)
        cache["expert_pre"] = expert_pre
        cache["experts"] = experts

    outputs = {}
    eps = params.prob_epsilon
    for t in tasks:
        if params.expert_count > 0:
            gl = x @ T[f"gate.{t}.W"] + T[f"gate.{t}.b"]
            gl = gl - gl.max(axis=1, keepdims=True)
            gate = np.exp(gl)
            gate /= gate.sum(axis=1, keepdims=True)
            h = np.einsum("nk,nkh->nh", gate, cache["experts"])
            cache[f"gate.{t}"] = gate
        else:
            h = x
        acts = [h]
        i = 0
        n_layers = sum(1 for k in T if k.startswith(f"{t}.W"))
        for i in range(n_layers):
            z = acts[-1] @ T[f"{t}.W{i}"] + T[f"{t}.b{i}"]
            if i < n_layers - 1:
                acts.append(np.maximum(z, 0.0))
            else:
                acts.append(z[:, 0])
        logit_ = acts[-1]
        cache[f"acts.{t}"] = acts
        if t == "imp":
            outputs[t] = softplus(logit_)
        else:
            outputs[t] = clamp_prob(sigmoid(logit_), eps)
        cache[f"logit.{t}"] = logit_
    return outputs, cache


def forward(params: ModelParams, record, task: str) -> float:
    """Single-record forward pass for ``task`` in {"CTR", "CVR", "IMP"}."""
    t = task.lower()
    if t not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    features = np.asarray(getattr(record, "features", record), dtype=np.int64)[None, :]
    outputs, _ = forward_batch(params, features, tasks=(t,))
    return float(outputs[t][0])


def backward(params: ModelParams, cache: dict, d_outputs: dict) -> dict:
    """Gradients of a scalar loss given ``d loss / d output`` per task."""
    T = params.tensors
    grads = {k: np.zeros_like(v) for k, v in T.items()}
    eps = params.prob_epsilon
    x = cache["x"]
    dx = np.zeros_like(x)
    moe = params.expert_count > 0
    if moe:
        d_experts = np.zeros_like(cache["experts"])

    for t, d_out in d_outputs.items():
        if d_out is None:
            continue
        logit_ = cache[f"logit.{t}"]
        s = sigmoid(logit_)
        if t == "imp":
            dz = d_out * s
        else:
            inside = (s > eps) & (s < 1.0 - eps)
            dz = d_out * s * (1.0 - s) * inside
        acts = cache[f"acts.{t}"]
        n_layers = len(acts) - 1
        delta = dz[:, None]
        for i in reversed(range(n_layers)):
            a_in = acts[i]
            grads[f"{t}.W{i}"] += a_in.T @ delta
            grads[f"{t}.b{i}"] += delta.sum(axis=0)
            delta = delta @ T[f"{t}.W{i}"].T
            if i > 0:
                delta = delta * (acts[i] > 0.0)
        dh = delta
        if moe:
            gate = cache[f"gate.{t}"]
            experts = cache["experts"]
            d_experts += gate[:, :, None] * dh[:, None, :]
            d_gate = np.einsum("nh,nkh->nk", dh, experts)
            d_gl = gate * (d_gate - (d_gate * gate).sum(axis=1, keepdims=True))
            grads[f"gate.{t}.W"] += x.T @ d_gl
            grads[f"gate.{t}.b"] += d_gl.sum(axis=0)
            dx += d_gl @ T[f"gate.{t}.W"].T
        else:
            dx += dh

    if moe:
        for k in range(params.expert_count):
            dpre = d_experts[:, k, :] * (cache["expert_pre"][k] > 0.0)
            grads[f"expert.{k}.W"] += x.T @ dpre
            grads[f"expert.{k}.b"] += dpre.sum(axis=0)
            dx += dpre @ T[f"expert.{k}.W"].T

    d = params.schema.embedding_dim
    features = cache["features"]
    for f in range(params.schema.field_count):
        np.add.at(grads[f"emb.{f}"], features[:, f], dx[:, f * d : (f + 1) * d])
    return grads


def _batch_arrays(batch):
    features = np.asarray(batch.features, dtype=np.int64)
    if features.ndim == 1:
        features = features[None, :]
    o = np.atleast_1d(np.asarray(batch.o, dtype=np.float64))
    r = np.atleast_1d(np.asarray(batch.r, dtype=np.float64))
    return features, o, r


def _quantities(params: ModelParams, batch, objective: "risk.Objective"):
    risk.check_variant(objective.variant)
    if objective.variant in risk.IMPUTING_VARIANTS and "imp" not in params.tasks:
        raise ConfigError(f"{objective.variant} needs an imputation tower")
    features, o, r = _batch_arrays(batch)
    outputs, cache = forward_batch(params, features)
    sq = risk.SampleQuantities(
        o=o,
        r=r,
        o_hat=outputs["ctr"],
        r_hat=outputs["cvr"],
        delta_hat=outputs.get("imp") if objective.variant in risk.IMPUTING_VARIANTS else None,
    )
    return sq, cache


def loss_and_grads(params: ModelParams, batch, objective: "risk.Objective"):
    """Objective breakdown and parameter gradients on one batch."""
    sq, cache = _quantities(params, batch, objective)
    breakdown, g = risk.objective_gradients(
        sq, objective.variant, objective.lambda_c, objective.lambda_g
    )
    d_outputs = {"ctr": g["o_hat"], "cvr": g["r_hat"]}
    if g["delta_hat"] is not None:
        d_outputs["imp"] = g["delta_hat"]
    return breakdown, backward(params, cache, d_outputs)


def objective_value(params: ModelParams, batch, objective: "risk.Objective", frozen=None):
    sq, _ = _quantities(params, batch, objective)
    frozen = frozen or {}
    return risk.total_objective(
        sq,
        objective.variant,
        objective.lambda_c,
        objective.lambda_g,
        frozen_o_hat=frozen.get("o_hat"),
        frozen_delta=frozen.get("delta"),
    )


def adam_update(params: ModelParams, grads: dict, config: TrainConfig,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Adam step with decoupled weight decay, in place."""
    state = params.optimizer_state
    state.step += 1
    lr = config.learning_rate
    if lr == 0.0:
        return
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, theta in params.tensors.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if config.weight_decay:
            theta *= 1.0 - lr * config.weight_decay
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def grad_step(params: ModelParams, batch, objective: "risk.Objective", config: TrainConfig):
    """One optimizer step on ``batch``; mutates and returns ``params``."""
    step = params.optimizer_state.step + 1
    try:
        breakdown, grads = loss_and_grads(params, batch, objective)
    except DomainError as exc:
        # clamped outputs only leave (0, 1) when they are NaN
        raise TrainingDiverged(step, "loss") from exc
    if not np.isfinite(breakdown.total):
        raise TrainingDiverged(step, "loss")
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(step, "gradient")
    adam_update(params, grads, config)
    return params, breakdown


def finite_diff_check(
    params: ModelParams,
    batch,
    objective: "risk.Objective",
    h: float = 1e-5,
    per_tensor: int = 6,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled per tensor (embedding rows restricted to those
    the batch touches). Stop-gradient quantities are frozen at their values
    at the unperturbed point, so the check targets the same surrogate the
    optimizer descends.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigError("h must lie in [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    sq, _ = _quantities(params, batch, objective)
    frozen = {"o_hat": sq.o_hat.copy(), "delta": sq.error.copy()}
    _, analytic = loss_and_grads(params, batch, objective)
    features, _, _ = _batch_arrays(batch)

    worst = 0.0
    for name, theta in params.tensors.items():
        if name.startswith("emb."):
            f = int(name.split(".")[1])
            rows = np.unique(features[:, f])
            coords = [
                (int(rng.choice(rows)), int(rng.integers(theta.shape[1])))
                for _ in range(per_tensor)
            ]
        else:
            flat = rng.choice(theta.size, size=min(per_tensor, theta.size), replace=False)
            coords = [np.unravel_index(int(i), theta.shape) for i in flat]
        for c in coords:
            orig = theta[c]
            theta[c] = orig + h
            up = objective_value(params, batch, objective, frozen).total
            theta[c] = orig - h
            down = objective_value(params, batch, objective, frozen).total
            theta[c] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name][c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def param_checksum(params: ModelParams) -> str:
    digest = hashlib.sha256()
    for name in sorted(params.tensors):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params.tensors[name]).tobytes())
    return digest.hexdigest()
