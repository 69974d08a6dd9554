"""Command-line driver: ``escmlab {gen,train,verify,ieb,crr,sweep}``.

Every command reads an optional YAML config, applies ``--set key=value``
overrides, writes its outputs plus ``manifest.json`` under the run directory
and exits with one of the codes below.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__, analysis, experiments, models, synthdata
from .errors import (
    AssumptionViolated,
    ConfigError,
    DegenerateOutcomeError,
    IntegrityError,
    NoOverlapError,
    ParseError,
    RatioInfeasible,
    TrainingDiverged,
)
from .neural import FieldSchema, TrainConfig
from .synthdata import SynthConfig

log = logging.getLogger("escmlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_VERIFY_FAILED = 5

OUTPUT_ROOT_ENV = "ESCMLAB_OUTPUT_ROOT"
MANIFEST_VERSION = 1

DEFAULTS = {
    "seed": 0,
    "output_dir": None,
    "synth": {},  # SynthConfig fields; the standard benchmark fills the rest
    "train": {},  # TrainConfig fields; benchmark optimiser settings fill the rest
    "data": {"path": None, "format": None, "cardinalities": None, "embedding_dim": 5},
    "analysis": {
        "variants": list(experiments.MAIN_VARIANTS),
        "seeds": None,  # default: [seed]
        "formats": ["csv"],
        "caliper": None,
        "lambda_c_grid": list(experiments.DEFAULT_GRID),
        "lambda_g_grid": list(experiments.DEFAULT_GRID),
        "sweep_variants": ["ESCM2-IPS", "ESCM2-DR"],
        "crr_variants": ["ESMM", "ESCM2-IPS", "ESCM2-DR"],
        "verify_instances": 20,
        "verify_draws": 100_000,
        "verify_k_match": 5.0,  # standard errors allowed between Monte Carlo and formula
        "verify_k_zero": 4.0,  # standard errors allowed around zero bias
    },
}


@dataclass
class ExperimentConfig:
    command: str
    seed: int
    output_dir: Path
    synth: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)

    def seeds(self) -> list:
        s = self.analysis.get("seeds")
        return [self.seed] if s is None else [int(x) for x in s]

    def synth_config(self, seed: int) -> SynthConfig:
        return experiments.standard_benchmark_config(seed, **self.synth)

    def train_config(self, seed: int) -> TrainConfig:
        return experiments.benchmark_train_config(seed, **self.train)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "synth": self.synth,
            "train": self.train,
            "data": self.data,
            "analysis": self.analysis,
        }


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_override(tree: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key} does not name a config section")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_config(command: str, path: Optional[str], overrides=(), seed=None, out=None, env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    tree = copy.deepcopy(DEFAULTS)
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        tree = _merge(tree, loaded)
    for o in overrides:
        _apply_override(tree, o)
    unknown = set(tree) - set(DEFAULTS)
    for section in ("data", "analysis"):
        if isinstance(tree.get(section), dict):
            unknown |= {f"{section}.{k}" for k in set(tree[section]) - set(DEFAULTS[section])}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["output_dir"] = out
    try:
        seed_val = int(tree["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("seed must be an integer") from exc
    out_dir = tree["output_dir"] or f"{command}-seed{seed_val}"
    root = env.get(OUTPUT_ROOT_ENV)
    out_path = Path(out_dir)
    if root and not out_path.is_absolute():
        out_path = Path(root) / out_path
    cfg = ExperimentConfig(
        command=command,
        seed=seed_val,
        output_dir=out_path,
        synth=dict(tree["synth"] or {}),
        train=dict(tree["train"] or {}),
        data=dict(tree["data"] or {}),
        analysis=dict(tree["analysis"] or {}),
    )
    # fail early on bad field names or values
    try:
        cfg.synth_config(seed_val)
        cfg.train_config(seed_val)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("variants", "sweep_variants", "crr_variants"):
        for v in cfg.analysis.get(key) or []:
            models.ModelVariant(v)
    return cfg


# --------------------------------------------------------------------------
# run directory bookkeeping


class Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.files: dict = {}
        cfg.output_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.cfg.output_dir / name

    def record(self, path: Path) -> Path:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.files[str(Path(path).relative_to(self.cfg.output_dir))] = digest
        return path

    def json(self, name: str, obj) -> Path:
        return self.record(analysis.write_json(obj, self.path(name)))

    def csv(self, name: str, rows, columns=None) -> Path:
        return self.record(analysis.write_csv(rows, self.path(name), columns))

    def finish(self, status: str, extra: Optional[dict] = None) -> Path:
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "report_schema_version": analysis.REPORT_SCHEMA_VERSION,
            "package_version": __version__,
            "status": status,
            "config": self.cfg.to_dict(),
            "resolved": {
                "synth": {str(s): self.cfg.synth_config(s).to_dict() for s in self.cfg.seeds()},
                "train": {str(s): self.cfg.train_config(s).to_dict() for s in self.cfg.seeds()},
            },
            "files": dict(sorted(self.files.items())),
            **(extra or {}),
        }
        return analysis.write_json(manifest, self.path("manifest.json"))


def _load_or_generate(cfg: ExperimentConfig, seed: int) -> experiments.SeedData:
    data = cfg.data or {}
    if data.get("path"):
        cards = data.get("cardinalities")
        if not cards:
            raise ConfigError("data.cardinalities is required for ingested logs")
        schema = FieldSchema(len(cards), tuple(int(c) for c in cards), int(data.get("embedding_dim", 5)))
        ds = synthdata.load_log(data["path"], schema, data.get("format"))
        tr, va, te = synthdata.chronological_split(ds)
        return experiments.SeedData(seed, ds, synthdata.generation_report(ds), tr, va, te)
    return experiments.prepare(cfg.synth_config(seed))


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg: ExperimentConfig) -> int:
    """Generate synthetic logs and a generation report."""
    run = Run(cfg)
    reports = {}
    for seed in cfg.seeds():
        ds, rep = synthdata.generate(cfg.synth_config(seed))
        for fmt in cfg.analysis.get("formats", ["csv"]):
            fmt = fmt.lower()
            if fmt not in ("csv", "jsonl"):
                raise ConfigError(f"unknown format {fmt!r}")
            p = run.path(f"data-seed{seed}.{fmt}")
            synthdata.save_log(ds, p, fmt.upper())
            run.record(p)
        reports[str(seed)] = {**rep.to_dict(), "checksum": ds.checksum()}
        log.info("seed %d: %d records, E_O[r]=%.4f E_D[r]=%.4f", seed, rep.n_records, rep.click_space_cvr, rep.mean_r_potential)
    run.json("generation_report.json", {"schema_version": analysis.REPORT_SCHEMA_VERSION, "seeds": reports})
    run.finish("ok")
    return EXIT_OK


def _train_variants(cfg: ExperimentConfig, run: Run, variants, save_models: bool):
    results = []
    for seed in cfg.seeds():
        data = _load_or_generate(cfg, seed)
        tconf = cfg.train_config(seed)
        for v in variants:
            res, trained, trace = experiments.run_one(data, v, tconf)
            results.append(res)
            tag = f"{v}-seed{seed}"
            if save_models:
                p = run.path(f"checkpoints/{tag}.json")
                p.parent.mkdir(parents=True, exist_ok=True)
                models.save_checkpoint(trained, tconf, p)
                run.record(p)
                run.json(f"traces/{tag}.json", trace.to_dict())
                run.json(
                    f"reports/{tag}.json",
                    {"schema_version": analysis.REPORT_SCHEMA_VERSION, "test": res.test, "all": res.full},
                )
            log.info("%s: cvr_auc=%.4f ctcvr_auc=%.4f ieb_gap=%+.4f", tag, res.cvr_auc, res.ctcvr_auc, res.ieb_gap)
    return results


def cmd_train(cfg: ExperimentConfig) -> int:
    """Train variants and write checkpoints, traces and reports."""
    run = Run(cfg)
    results = _train_variants(cfg, run, cfg.analysis["variants"], save_models=True)
    run.csv("summary.csv", [r.row() for r in results])
    run.finish("ok")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig) -> int:
    """Monte Carlo check of the IPS and DR bias/variance formulas."""
    run = Run(cfg)
    rows = experiments.verify_estimators(
        count=int(cfg.analysis.get("verify_instances", 20)),
        seed=cfg.seed,
        draws=int(cfg.analysis.get("verify_draws", 100_000)),
        k_match=float(cfg.analysis.get("verify_k_match", 5.0)),
        k_zero=float(cfg.analysis.get("verify_k_zero", 4.0)),
    )
    run.csv("verify.csv", rows)
    failed = [r["instance"] for r in rows if not r["passed"]]
    run.json("verify.json", {"schema_version": analysis.REPORT_SCHEMA_VERSION, "rows": rows, "failed": failed})
    run.finish("ok" if not failed else "verification_failed")
    if failed:
        log.error("estimator checks failed on instances %s", failed)
        return EXIT_VERIFY_FAILED
    return EXIT_OK


def _summary(values) -> dict:
    a = np.asarray(values, dtype=float)
    se = float(a.std(ddof=1) / np.sqrt(a.size)) if a.size > 1 else float("nan")
    return {"mean": float(a.mean()), "se": se, "values": a.tolist()}


def cmd_ieb(cfg: ExperimentConfig) -> int:
    """Tabulate mean CVR estimate against the label per variant."""
    run = Run(cfg)
    results = _train_variants(cfg, run, cfg.analysis["variants"], save_models=False)
    rows = [
        {
            "seed": r.seed,
            "variant": r.variant,
            "mean_label": r.full.mean_label,
            "mean_estimate": r.full.mean_estimate,
            "ieb_gap": r.full.ieb_gap,
            "label_source": r.full.label_source,
            "mae_cvr_true": r.full.mae_cvr_true,
        }
        for r in results
    ]
    run.csv("ieb.csv", rows)
    summary = {v: _summary([r.ieb_gap for r in results if r.variant == v]) for v in cfg.analysis["variants"]}
    run.json("ieb.json", {"schema_version": analysis.REPORT_SCHEMA_VERSION, "rows": rows, "summary": summary})
    run.finish("ok")
    return EXIT_OK


def cmd_crr(cfg: ExperimentConfig) -> int:
    """Tabulate PSM causal risk ratio strength per variant."""
    run = Run(cfg)
    variants = cfg.analysis.get("crr_variants") or ["ESMM", "ESCM2-IPS"]
    results = _train_variants(cfg, run, variants, save_models=False)
    rows = [
        {
            "seed": r.seed,
            "variant": r.variant,
            "crr": r.full.crr,
            "crr_strength": r.full.crr_strength,
            "matched_pairs": r.full.matched_pairs,
        }
        for r in results
    ]
    run.csv("crr.csv", rows)
    summary = {v: _summary([r.crr_strength for r in results if r.variant == v]) for v in variants}
    run.json("crr.json", {"schema_version": analysis.REPORT_SCHEMA_VERSION, "rows": rows, "summary": summary})
    run.finish("ok")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    """Sweep the CVR and CTCVR loss weights."""
    run = Run(cfg)
    variants = cfg.analysis.get("sweep_variants") or ["ESCM2-IPS", "ESCM2-DR"]
    tables = {}
    for param in ("lambda_c", "lambda_g"):
        grid = [float(x) for x in cfg.analysis.get(f"{param}_grid") or experiments.DEFAULT_GRID]
        rows = []
        for seed in cfg.seeds():
            data = _load_or_generate(cfg, seed)
            tconf = cfg.train_config(seed)
            for v in variants:
                for x in grid:
                    res, _, _ = experiments.run_one(data, v, tconf, {param: x})
                    rows.append(
                        {
                            "seed": seed,
                            "variant": v,
                            param: x,
                            "cvr_auc": res.cvr_auc,
                            "cvr_ks": res.test.metrics["cvr"]["ks"],
                            "ctcvr_auc": res.ctcvr_auc,
                            "ctcvr_ks": res.test.metrics["ctcvr"]["ks"],
                        }
                    )
                    log.info("seed %d %s %s=%g: cvr_auc=%.4f ctcvr_auc=%.4f", seed, v, param, x, res.cvr_auc, res.ctcvr_auc)
        run.csv(f"sweep_{param}.csv", rows)
        tables[param] = rows
    run.json("sweep.json", {"schema_version": analysis.REPORT_SCHEMA_VERSION, **tables})
    run.finish("ok")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "verify": cmd_verify,
    "ieb": cmd_ieb,
    "crr": cmd_crr,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escmlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("-c", "--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("-o", "--out", help=f"run directory (relative paths go under ${OUTPUT_ROOT_ENV})")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.max_steps=500")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args.command, args.config, args.overrides, args.seed, args.out)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, IntegrityError, AssumptionViolated, RatioInfeasible, NoOverlapError, DegenerateOutcomeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
