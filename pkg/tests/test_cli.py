import json

import numpy as np
import pytest
import yaml

from escmlab import cli, experiments, models
from escmlab.errors import ConfigError

SMALL = [
    "--set", "synth.n_records=3000",
    "--set", "synth.n_users=200",
    "--set", "synth.n_items=100",
    "--set", "train.max_steps=40",
    "--set", "train.eval_every=40",
    "--set", "train.batch_size=128",
    "--set", "train.hidden_sizes=[8]",
]


def run(tmp_path, *argv):
    return cli.main([argv[0], "-o", str(tmp_path / argv[1]), *argv[2:]])


def manifest(tmp_path, name):
    return json.loads((tmp_path / name / "manifest.json").read_text())


def test_gen_writes_rows_and_manifest(tmp_path):
    assert run(tmp_path, "gen", "g", "--seed", "1", "--set", "synth.n_records=1000",
               "--set", "analysis.formats=[csv,jsonl]") == 0
    csv_lines = (tmp_path / "g" / "data-seed1.csv").read_text().splitlines()
    assert len(csv_lines) == 1001
    assert len((tmp_path / "g" / "data-seed1.jsonl").read_text().splitlines()) == 1000
    m = manifest(tmp_path, "g")
    assert m["status"] == "ok" and m["config"]["seed"] == 1
    assert m["resolved"]["synth"]["1"]["n_records"] == 1000
    assert set(m["files"]) == {"data-seed1.csv", "data-seed1.jsonl", "generation_report.json"}
    rep = json.loads((tmp_path / "g" / "generation_report.json").read_text())
    assert rep["seeds"]["1"]["assumption_holds"] is True


def test_gen_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run(tmp_path, "gen", name, "--seed", "3", "--set", "synth.n_records=1000") == 0
    assert manifest(tmp_path, "a")["files"] == manifest(tmp_path, "b")["files"]


def test_config_file_and_flag_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 4, "synth": {"n_records": 500, "n_users": 100}}))
    cfg = cli.resolve_config("gen", str(path), ["synth.n_records=700"], seed=None, out="x", env={})
    assert cfg.seed == 4 and cfg.synth == {"n_records": 700, "n_users": 100}
    cfg = cli.resolve_config("gen", str(path), [], seed=9, out="x", env={"ESCMLAB_OUTPUT_ROOT": "/data"})
    assert cfg.seed == 9 and str(cfg.output_dir) == "/data/x"


@pytest.mark.parametrize(
    "overrides",
    [["nope.x=1"], ["analysis.bogus=1"], ["train.learning_rate=-1"], ["synth.n_recordz=5"], ["analysis.variants=[X]"]],
)
def test_bad_config_exits_2(tmp_path, overrides):
    argv = ["gen", "-o", str(tmp_path / "z")]
    for o in overrides:
        argv += ["--set", o]
    assert cli.main(argv) == cli.EXIT_CONFIG
    with pytest.raises(ConfigError):
        cli.resolve_config("gen", None, overrides, env={})


def test_bad_data_exits_3(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("user_id,item_id,f0,click,conversion\n1,2,0,0,1\n")
    assert run(tmp_path, "train", "t", "--set", f"data.path={bad}", "--set", "data.cardinalities=[3]") == cli.EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_4(tmp_path):
    code = run(tmp_path, "train", "t", *SMALL, "--set", "train.learning_rate=1.0e+300",
               "--set", "analysis.variants=[ESMM]")
    assert code == cli.EXIT_DIVERGED


def test_verify_pass_and_fail(tmp_path):
    base = ["--set", "analysis.verify_instances=1", "--set", "analysis.verify_draws=10000"]
    assert run(tmp_path, "verify", "ok", *base) == 0
    assert run(tmp_path, "verify", "bad", *base, "--set", "analysis.verify_k_match=0") == cli.EXIT_VERIFY_FAILED
    assert manifest(tmp_path, "bad")["status"] == "verification_failed"


def test_train_outputs_and_determinism(tmp_path):
    argv = [*SMALL, "--set", "analysis.variants=[ESMM,ESCM2-DR]"]
    assert run(tmp_path, "train", "a", *argv) == 0
    assert run(tmp_path, "train", "b", *argv) == 0
    fa, fb = manifest(tmp_path, "a")["files"], manifest(tmp_path, "b")["files"]
    assert fa == fb
    assert "checkpoints/ESCM2-DR-seed0.json" in fa and "reports/ESMM-seed0.json" in fa
    trained, _ = models.load_checkpoint(tmp_path / "a" / "checkpoints" / "ESCM2-DR-seed0.json")
    assert trained.variant.name == "ESCM2-DR"


def test_ingested_log_round_trip(tmp_path):
    assert run(tmp_path, "gen", "g", "--set", "synth.n_records=2000", "--set", "synth.n_users=200",
               "--set", "synth.n_items=100") == 0
    cards = experiments.standard_benchmark_config(0, n_users=200, n_items=100).field_layout.cardinalities
    code = run(tmp_path, "ieb", "i", *SMALL, "--set", f"data.path={tmp_path / 'g' / 'data-seed0.csv'}",
               "--set", f"data.cardinalities={list(cards)}", "--set", "analysis.variants=[ESMM]")
    assert code == 0
    rows = json.loads((tmp_path / "i" / "ieb.json").read_text())["rows"]
    assert rows[0]["label_source"] == "cvr_true"


def test_crr_report_has_both_families(tmp_path):
    assert run(tmp_path, "crr", "c", *SMALL, "--set", "analysis.crr_variants=[ESMM,ESCM2-IPS]") == 0
    rep = json.loads((tmp_path / "c" / "crr.json").read_text())
    assert set(rep["summary"]) == {"ESMM", "ESCM2-IPS"}
    assert all(r["crr_strength"] >= 0 for r in rep["rows"])


def test_sweep_zero_cvr_weight_is_esmm_objective(tmp_path):
    assert run(tmp_path, "sweep", "s", *SMALL, "--set", "analysis.lambda_c_grid=[0]",
               "--set", "analysis.lambda_g_grid=[1]", "--set", "analysis.sweep_variants=[ESCM2-IPS]") == 0
    row = json.loads((tmp_path / "s" / "sweep.json").read_text())["lambda_c"][0]
    # an ESMM run with the same seed optimises the identical objective
    cfg = cli.resolve_config("train", None, [a for a in SMALL if a != "--set"], env={})
    data = experiments.prepare(cfg.synth_config(0))
    esmm, _, _ = experiments.run_one(data, "ESMM", cfg.train_config(0))
    assert row["ctcvr_auc"] == esmm.ctcvr_auc
    assert row["cvr_auc"] == esmm.cvr_auc


def test_sweep_tables(tmp_path):
    assert run(tmp_path, "sweep", "s", *SMALL, "--set", "analysis.lambda_c_grid=[0,0.1]",
               "--set", "analysis.lambda_g_grid=[0]", "--set", "analysis.sweep_variants=[ESCM2-DR]") == 0
    lc = (tmp_path / "s" / "sweep_lambda_c.csv").read_text().splitlines()
    assert lc[0] == "seed,variant,lambda_c,cvr_auc,cvr_ks,ctcvr_auc,ctcvr_ks"
    assert len(lc) == 3
    assert np.isfinite(float(lc[1].split(",")[3]))
