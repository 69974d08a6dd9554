import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from escmlab import risk
from escmlab._numerics import bce, clamp_prob, sigmoid, softplus
from escmlab.errors import ConfigError, DomainError, IndexedFeatureError, TrainingDiverged
from escmlab.neural import (
    FieldSchema,
    TrainConfig,
    finite_diff_check,
    forward,
    forward_batch,
    grad_step,
    init_params,
    param_checksum,
)

from conftest import make_batch


# bce -------------------------------------------------------------------------


def test_bce_examples():
    assert bce(1, 0.5) == pytest.approx(0.6931471805599453, abs=1e-12)
    assert bce(0, 0.5) == pytest.approx(0.6931471805599453, abs=1e-12)
    assert bce(1, 0.9) == pytest.approx(0.10536051565782628, abs=1e-12)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_bce_rejects_out_of_domain(p):
    with pytest.raises(DomainError):
        bce(1, p)


@given(st.floats(-700, 700))
def test_sigmoid_stable_and_bounded(z):
    s = float(sigmoid(z))
    assert 0.0 <= s <= 1.0
    assert math.isfinite(s)


@given(st.floats(-50, 50))
def test_softplus_nonnegative(z):
    assert float(softplus(z)) >= 0.0


# schema / config -------------------------------------------------------------


@pytest.mark.parametrize(
    "args",
    [(1, (0,), 5), (1, (10,), 0), (2, (3,), 5), (0, (), 5)],
)
def test_schema_rejects_bad_shapes(args):
    with pytest.raises(ConfigError):
        FieldSchema(*args)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.weight_decay, c.lambda_c, c.lambda_g) == (1e-4, 1e-3, 0.1, 1.0)
    assert c.eval_every == 1000 and c.batch_size == 256 and c.prob_epsilon == 0.02


@pytest.mark.parametrize(
    "kw", [{"prob_epsilon": 0.0}, {"prob_epsilon": 0.5}, {"lambda_c": -1}, {"batch_size": 0}, {"hidden_sizes": (0,)}]
)
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# init ------------------------------------------------------------------------


def test_init_is_deterministic():
    schema = FieldSchema(1, (10,), 5)
    a = init_params(schema, TrainConfig(), seed=7)
    b = init_params(schema, TrainConfig(), seed=7)
    assert param_checksum(a) == param_checksum(b)
    assert a.optimizer_state.step == 0 and not a.optimizer_state.m


def test_embedding_shapes():
    p = init_params(FieldSchema(2, (3, 4), 5), TrainConfig(), seed=0)
    assert [t.shape for t in p.embedding_table] == [(3, 5), (4, 5)]


def test_init_weights_mean_zero():
    p = init_params(FieldSchema(4, (500, 500, 500, 500), 5), TrainConfig(), seed=1)
    w = np.concatenate([t.ravel() for t in p.embedding_table])[:10_000]
    se = w.std() / math.sqrt(w.size)
    assert abs(w.mean()) < 3 * se


def test_tower_output_has_one_unit(small_params):
    for tower in (small_params.ctr_tower, small_params.cvr_tower, small_params.imp_tower):
        assert tower[-1][0].shape[1] == 1


# forward ---------------------------------------------------------------------


def _zero_towers(params):
    for name, t in params.tensors.items():
        if not name.startswith("emb."):
            t[...] = 0.0
    return params


def test_zero_tower_gives_half(small_params):
    _zero_towers(small_params)
    assert forward(small_params, [0, 0, 0], "CVR") == 0.5
    assert forward(small_params, [1, 2, 0], "CTR") == 0.5


def test_forward_deterministic(small_params):
    rec = [3, 4, 2]
    assert forward(small_params, rec, "CVR") == forward(small_params, rec, "CVR")


def test_forward_rejects_bad_index(small_params):
    with pytest.raises(IndexedFeatureError):
        forward(small_params, [4, 0, 0], "CTR")
    with pytest.raises(IndexedFeatureError):
        forward(small_params, [0, -1, 0], "CTR")


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 0.49))
def test_output_range_respects_clamp(seed, eps):
    schema = FieldSchema(2, (3, 3), 3)
    p = init_params(schema, TrainConfig(hidden_sizes=(4,), prob_epsilon=eps), seed, with_imp=True)
    for name, t in p.tensors.items():
        t *= 50.0  # push logits to the extremes
    feats = np.array([[i, j] for i in range(3) for j in range(3)])
    out, cache = forward_batch(p, feats)
    for task in ("ctr", "cvr"):
        assert np.all(out[task] >= eps) and np.all(out[task] <= 1 - eps)
    assert np.all(out["imp"] >= 0)
    assert cache["x"].shape == (9, schema.field_count * schema.embedding_dim)


def test_clamp_example():
    assert clamp_prob(np.array([0.0, 0.5, 1.0]), 0.01).tolist() == [0.01, 0.5, 0.99]


def test_mixture_of_experts_forward(small_schema):
    cfg = TrainConfig(hidden_sizes=(6, 4), expert_count=3)
    p = init_params(small_schema, cfg, seed=2, with_imp=True)
    assert p.backbone is not None and len(p.backbone["experts"]) == 3
    out, _ = forward_batch(p, [[0, 1, 2]])
    assert set(out) == {"ctr", "cvr", "imp"}


# grad_step -------------------------------------------------------------------


def test_zero_learning_rate_leaves_params(small_params, random_batch):
    before = param_checksum(small_params)
    cfg = TrainConfig(hidden_sizes=(8, 4), learning_rate=0.0)
    grad_step(small_params, random_batch, risk.Objective("ESCM2-DR"), cfg)
    assert param_checksum(small_params) == before


def test_overfit_one_record(small_schema):
    cfg = TrainConfig(hidden_sizes=(8, 4), learning_rate=1e-2, weight_decay=0.0, lambda_c=1.0)
    p = init_params(small_schema, cfg, seed=0)
    batch = make_batch([[1, 2, 0]], [1], [1])
    obj = risk.Objective("NAIVE", lambda_c=1.0)
    for _ in range(500):
        _, br = grad_step(p, batch, obj, cfg)
    out, _ = forward_batch(p, batch.features)
    # the clamp caps r_hat at 1 - eps, so the floor is -log(1 - eps)
    assert bce(1, out["cvr"][0]) < 0.01 + bce(1, 1 - cfg.prob_epsilon)


def test_overfit_one_record_small_eps(small_schema):
    cfg = TrainConfig(hidden_sizes=(8, 4), learning_rate=1e-2, weight_decay=0.0, prob_epsilon=1e-4)
    p = init_params(small_schema, cfg, seed=0)
    batch = make_batch([[1, 2, 0]], [1], [1])
    for _ in range(500):
        grad_step(p, batch, risk.Objective("NAIVE", lambda_c=1.0), cfg)
    out, _ = forward_batch(p, batch.features)
    assert bce(1, out["cvr"][0]) < 0.01


def test_grad_step_deterministic(small_schema, small_config, random_batch):
    sums = []
    for _ in range(2):
        p = init_params(small_schema, small_config, seed=5, with_imp=True)
        for _ in range(5):
            grad_step(p, random_batch, risk.Objective("ESCM2-DR"), small_config)
        sums.append(param_checksum(p))
    assert sums[0] == sums[1]


def test_divergence_reports_step(small_params, random_batch, small_config):
    small_params.tensors["cvr.b2"][...] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        grad_step(small_params, random_batch, risk.Objective("ESCM2-IPS"), small_config)
    assert info.value.step == 1


def test_missing_imp_tower_is_config_error(small_schema, small_config, random_batch):
    p = init_params(small_schema, small_config, seed=0, with_imp=False)
    with pytest.raises(ConfigError):
        grad_step(p, random_batch, risk.Objective("ESCM2-DR"), small_config)


# finite differences ------------------------------------------------------------


@pytest.mark.parametrize("variant", risk.VARIANTS)
def test_finite_differences_every_variant(variant, small_params, random_batch):
    err = finite_diff_check(small_params, random_batch, risk.Objective(variant, 0.7, 1.3), h=1e-5)
    assert err < 1e-4


def test_finite_differences_with_experts(small_schema, random_batch):
    cfg = TrainConfig(hidden_sizes=(6, 4), expert_count=2)
    p = init_params(small_schema, cfg, seed=4, with_imp=True)
    assert finite_diff_check(p, random_batch, risk.Objective("ESCM2-DR", 0.5, 1.0)) < 1e-4


def test_naive_single_clicked_record(small_params):
    batch = make_batch([[1, 1, 1]], [1], [0])
    assert finite_diff_check(small_params, batch, risk.Objective("NAIVE", 1.0, 0.0)) < 1e-4


def test_constant_objective_has_zero_gradient(small_params):
    # with both weights zero and no CTR dependence on the CVR tower, CVR grads vanish
    from escmlab.neural import loss_and_grads

    batch = make_batch([[0, 0, 0], [1, 1, 1]], [0, 1], [0, 1])
    _, grads = loss_and_grads(small_params, batch, risk.Objective("ESCM2-IPS", 0.0, 0.0))
    assert all(np.all(g == 0) for k, g in grads.items() if k.startswith("cvr."))


def test_finite_diff_rejects_bad_h(small_params, random_batch):
    with pytest.raises(ConfigError):
        finite_diff_check(small_params, random_batch, risk.Objective("ESMM"), h=1e-2)
