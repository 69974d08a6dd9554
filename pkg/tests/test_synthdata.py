import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escmlab import synthdata
from escmlab.errors import AssumptionViolated, ConfigError, IntegrityError, ParseError, RatioInfeasible
from escmlab.neural import FieldSchema
from escmlab.synthdata import Dataset, SynthConfig


@pytest.fixture(scope="module")
def small():
    return synthdata.generate(SynthConfig(n_records=5000, seed=3, alpha_couple=1.0))


@pytest.fixture(scope="module")
def big():
    return synthdata.generate(SynthConfig(n_records=100_000, seed=1, alpha_couple=2.0))


def _toy(o, r, schema=None):
    n = len(o)
    schema = schema or FieldSchema(1, (3,), 2)
    return Dataset(schema, np.arange(n), np.arange(n), np.zeros((n, 1)), o, r)


def test_generation_is_deterministic():
    cfg = SynthConfig(n_records=3000, seed=11)
    a, _ = synthdata.generate(cfg)
    b, _ = synthdata.generate(SynthConfig(n_records=3000, seed=11))
    assert a.checksum() == b.checksum()
    c, _ = synthdata.generate(SynthConfig(n_records=3000, seed=12))
    assert c.checksum() != a.checksum()


def test_records_obey_invariants(small):
    ds, rep = small
    assert np.all(ds.r <= ds.o)
    assert np.array_equal(ds.r[ds.o == 1], ds.r_potential[ds.o == 1])
    assert np.all((ds.q_true > 0) & (ds.q_true < 1))
    assert np.all((ds.cvr_true > 0) & (ds.cvr_true < 1))
    assert rep.n_clicks == ds.o.sum()
    assert rep.click_space_cvr == pytest.approx(ds.r.sum() / ds.o.sum())
    assert ds.features.shape == (len(ds), ds.schema.field_count)
    assert np.all(ds.features < np.array(ds.schema.cardinalities))


def test_strong_coupling_selection_gap(big):
    # generator oracle: the selection gap clears 4 two-sample standard errors
    _, rep = big
    assert rep.selection_gap > 4 * rep.selection_gap_se
    assert rep.assumption_holds


def test_no_coupling_no_selection_gap():
    _, rep = synthdata.generate(SynthConfig(n_records=100_000, seed=2, alpha_couple=0.0))
    assert abs(rep.selection_gap) < 4 * rep.selection_gap_se


def test_assumption_violation_is_reported():
    # a negative selection effect cannot be produced by the generator, so force a
    # tiny sample where the sample means are likely to invert
    hits = 0
    for seed in range(40):
        try:
            synthdata.generate(SynthConfig(n_records=60, n_users=20, n_items=20, seed=seed, alpha_couple=0.01))
        except AssumptionViolated as exc:
            assert "alpha_couple" in str(exc)
            hits += 1
    assert hits > 0


def test_clicks_calibrated_against_truth(big):
    ds, _ = big
    edges = np.quantile(ds.q_true, np.linspace(0, 1, 11))
    bucket = np.clip(np.searchsorted(edges, ds.q_true, side="right") - 1, 0, 9)
    err = [abs(ds.o[bucket == b].mean() - ds.q_true[bucket == b].mean()) for b in range(10)]
    assert max(err) < 0.02


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(n_records=0)
    with pytest.raises(ConfigError):
        SynthConfig(alpha_couple=-1)
    with pytest.raises(ConfigError):
        SynthConfig(field_layout=FieldSchema(1, (3,), 2))


def test_id_fields_extend_the_layout():
    cfg = SynthConfig(n_records=500, n_users=50, n_items=40, seed=1, id_fields=True)
    ds, _ = synthdata.generate(cfg)
    assert ds.schema.cardinalities[:2] == (50, 40)
    assert np.array_equal(ds.features[:, 0], ds.user_id)
    assert np.array_equal(ds.features[:, 1], ds.item_id)


# downsampling -----------------------------------------------------------------


def _ratio_set(n, clicks, convs):
    o = np.zeros(n, dtype=int)
    o[:clicks] = 1
    r = np.zeros(n, dtype=int)
    r[:convs] = 1
    perm = np.random.default_rng(0).permutation(n)
    return _toy(o[perm], r[perm])


def test_downsample_fixed_point():
    ds = _ratio_set(1000, 100, 10)
    assert synthdata.downsample(ds, (100, 10, 1)) is ds


def test_downsample_counts():
    ds = _ratio_set(10_000, 100, 10)
    out = synthdata.downsample(ds, (100, 10, 1), seed=4)
    assert len(ds) - len(out) == 9000
    assert out.n_clicks == 100 and out.n_conversions == 10
    assert np.all(np.diff(out.user_id) > 0)  # order preserved


def test_downsample_infeasible():
    with pytest.raises(RatioInfeasible):
        synthdata.downsample(_ratio_set(500, 100, 10), (100, 10, 1))
    with pytest.raises(RatioInfeasible):
        synthdata.downsample(_ratio_set(50, 0, 0), (100, 10, 1))


# splits -----------------------------------------------------------------------


def test_split_sizes_and_order():
    ds = _toy(np.zeros(100, dtype=int), np.zeros(100, dtype=int))
    tr, va, te = synthdata.chronological_split(ds)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert np.array_equal(np.concatenate([tr.user_id, va.user_id, te.user_id]), np.arange(100))
    tr, va, te = synthdata.chronological_split(ds, (1.0, 0.0, 0.0))
    assert (len(tr), len(va), len(te)) == (100, 0, 0)
    with pytest.raises(ConfigError):
        synthdata.chronological_split(ds, (0.5, 0.2, 0.2))


@given(st.integers(0, 300), st.floats(0, 1), st.floats(0, 1))
def test_split_partitions_any_dataset(n, a, b):
    a, b = sorted((a, b))
    ds = _toy(np.zeros(n, dtype=int), np.zeros(n, dtype=int))
    parts = synthdata.chronological_split(ds, (a, b - a, 1 - b))
    joined = np.concatenate([p.user_id for p in parts])
    assert np.array_equal(joined, np.arange(n))


# file formats -----------------------------------------------------------------


@pytest.mark.parametrize("fmt", ["CSV", "JSONL"])
def test_log_round_trip_is_bit_exact(small, fmt, tmp_path):
    ds, _ = small
    path = tmp_path / f"log.{fmt.lower()}"
    synthdata.save_log(ds, path)
    back = synthdata.load_log(path, ds.schema)
    assert np.array_equal(back.q_true, ds.q_true) and np.array_equal(back.cvr_true, ds.cvr_true)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.o, ds.o) and np.array_equal(back.r, ds.r)
    synthdata.save_log(back, tmp_path / f"again.{fmt.lower()}")
    assert (tmp_path / f"again.{fmt.lower()}").read_bytes() == path.read_bytes()


def test_csv_layout():
    text = synthdata.dumps_log(_toy([1, 0], [1, 0]), "CSV")
    assert text == "user_id,item_id,f0,click,conversion\n0,0,0,1,1\n1,1,0,0,0\n"


def test_parse_examples():
    schema = FieldSchema(1, (3,), 2)
    empty = synthdata.loads_log("user_id,item_id,f0,click,conversion\n", schema)
    assert len(empty) == 0
    one = synthdata.loads_log("user_id,item_id,f0,click,conversion\n1,2,0,1,1\n", schema)
    rec = one[0]
    assert (rec.user_id, rec.item_id, rec.features, rec.o, rec.r) == (1, 2, (0,), 1, 1)
    with pytest.raises(IntegrityError):
        synthdata.loads_log("user_id,item_id,f0,click,conversion\n1,2,0,0,1\n", schema)


@pytest.mark.parametrize(
    "body,line",
    [
        ("1,2,0,1\n", 2),
        ("1,2,0,1,1\n1,2,x,1,1\n", 3),
        ("1,2,7,1,1\n", 2),
        ("1,2,0,2,0\n", 2),
    ],
)
def test_parse_errors_carry_line_numbers(body, line):
    with pytest.raises(ParseError) as info:
        synthdata.loads_log("user_id,item_id,f0,click,conversion\n" + body, FieldSchema(1, (3,), 2))
    assert info.value.line == line


def test_jsonl_errors():
    schema = FieldSchema(1, (3,), 2)
    with pytest.raises(ParseError):
        synthdata.loads_log('{"user_id": 1}\n', schema, "JSONL")
    with pytest.raises(ParseError):
        synthdata.loads_log("not json\n", schema, "JSONL")
    with pytest.raises(ParseError):
        synthdata.loads_log("x,y\n", schema, "CSV")


def test_record_invariants():
    with pytest.raises(IntegrityError):
        synthdata.ImpressionRecord(0, 0, (0,), 0, 1)
    with pytest.raises(IntegrityError):
        synthdata.ImpressionRecord(0, 0, (0,), 1, 0, r_potential=1)


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), max_size=40))
def test_loaded_logs_keep_click_space_rate(pairs):
    pairs = [(o, r * o) for o, r in pairs]
    ds = _toy([p[0] for p in pairs], [p[1] for p in pairs])
    back = synthdata.loads_log(synthdata.dumps_log(ds, "CSV"), ds.schema, "CSV")
    assert back.n_clicks == sum(p[0] for p in pairs)
    if back.n_clicks:
        assert back.click_space_cvr() == sum(p[1] for p in pairs) / back.n_clicks
    else:
        assert math.isnan(back.click_space_cvr())
