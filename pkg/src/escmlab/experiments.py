"""Multi-seed experiment runners shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import analysis, models, synthdata
from .neural import TrainConfig
from .synthdata import SynthConfig

MAIN_VARIANTS = ("NAIVE", "ESMM", "ESCM2-IPS", "ESCM2-DR")
DEFAULT_GRID = (0.0, 0.05, 0.1, 0.5, 1.0, 1.5, 3.0)

# Standard synthetic benchmark: E_O[r] is about twice E_D[r_potential].
BENCHMARK_SYNTH = dict(
    n_records=100_000,
    ctr_bias=-3.0,
    cvr_bias=0.5,
    alpha_couple=1.0,
)
# Desk-scale optimiser settings; see the README for why lr is above the default.
BENCHMARK_TRAIN = dict(
    learning_rate=1e-3,
    batch_size=512,
    max_steps=2500,
    eval_every=500,
)


def standard_benchmark_config(seed: int, **overrides) -> SynthConfig:
    return SynthConfig(seed=seed, **{**BENCHMARK_SYNTH, **overrides})


def benchmark_train_config(seed: int, **overrides) -> TrainConfig:
    return TrainConfig(seed=seed, **{**BENCHMARK_TRAIN, **overrides})


@dataclass
class RunResult:
    seed: int
    variant: str
    train_overrides: dict
    selection_step: int
    validation_metric: float
    test: analysis.EvalReport  # ranking metrics on the held-out split
    full: analysis.EvalReport  # IEB, MAE and CRR over every exposure
    checksum: str = ""

    @property
    def cvr_auc(self) -> float:
        return self.test.metrics["cvr"]["auc"]

    @property
    def ctcvr_auc(self) -> float:
        return self.test.metrics["ctcvr"]["auc"]

    @property
    def ieb_gap(self) -> float:
        return self.full.ieb_gap

    @property
    def mae(self) -> float:
        return self.full.mae_cvr_true

    @property
    def crr_strength(self) -> float:
        return self.full.crr_strength

    def row(self) -> dict:
        out = {"seed": self.seed, "variant": self.variant, **self.train_overrides}
        for task in ("ctr", "cvr", "ctcvr"):
            for k, v in (self.test.metrics.get(task) or {}).items():
                out[f"{task}_{k}"] = v
        out.update(
            ieb_gap=self.full.ieb_gap,
            mean_estimate=self.full.mean_estimate,
            mean_label=self.full.mean_label,
            mae_cvr_true=self.full.mae_cvr_true,
            crr=self.full.crr,
            crr_strength=self.full.crr_strength,
            selection_step=self.selection_step,
            params_sha256=self.checksum,
        )
        return out


@dataclass
class SeedData:
    seed: int
    dataset: synthdata.Dataset
    report: synthdata.GenerationReport
    train: synthdata.Dataset
    valid: synthdata.Dataset
    test: synthdata.Dataset


def prepare(synth: SynthConfig) -> SeedData:
    ds, rep = synthdata.generate(synth)
    tr, va, te = synthdata.chronological_split(ds)
    return SeedData(synth.seed, ds, rep, tr, va, te)


def run_one(data: SeedData, variant: str, train_config: TrainConfig, overrides: Optional[dict] = None):
    """Train one variant on prepared data and evaluate it."""
    from .neural import param_checksum

    overrides = dict(overrides or {})
    config = dataclasses.replace(train_config, **overrides) if overrides else train_config
    model = models.build(variant, data.dataset.schema, config)
    trained, trace = models.train(model, data.train, data.valid, config)
    test = analysis.evaluate(trained, data.test, with_crr=False)
    full = analysis.evaluate(trained, data.dataset, with_crr=True)
    result = RunResult(
        seed=data.seed,
        variant=variant,
        train_overrides=overrides,
        selection_step=trained.selection_step,
        validation_metric=trained.validation_metric,
        test=test,
        full=full,
        checksum=param_checksum(trained.params),
    )
    return result, trained, trace


def run_benchmark(
    seeds: Iterable[int],
    variants: Sequence[str] = MAIN_VARIANTS,
    synth_overrides: Optional[dict] = None,
    train_overrides: Optional[dict] = None,
    log=None,
) -> list[RunResult]:
    results = []
    for seed in seeds:
        data = prepare(standard_benchmark_config(seed, **(synth_overrides or {})))
        config = benchmark_train_config(seed, **(train_overrides or {}))
        for v in variants:
            res, _, _ = run_one(data, v, config)
            results.append(res)
            if log:
                log(f"seed {seed} {v}: cvr_auc={res.cvr_auc:.4f} ieb_gap={res.ieb_gap:+.4f}")
    return results


@dataclass
class SweepCell:
    variant: str
    param: str
    value: float
    results: list = field(default_factory=list)

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.results]))


def run_sweep(
    seeds: Iterable[int],
    variants: Sequence[str] = ("ESCM2-IPS", "ESCM2-DR"),
    param: str = "lambda_c",
    grid: Sequence[float] = DEFAULT_GRID,
    synth_overrides: Optional[dict] = None,
    train_overrides: Optional[dict] = None,
    log=None,
) -> list[SweepCell]:
    """Retrain each variant over a grid of one loss weight, sharing data per seed."""
    if param not in ("lambda_c", "lambda_g"):
        raise ValueError("param must be lambda_c or lambda_g")
    cells = {(v, float(x)): SweepCell(v, param, float(x)) for v in variants for x in grid}
    for seed in seeds:
        data = prepare(standard_benchmark_config(seed, **(synth_overrides or {})))
        config = benchmark_train_config(seed, **(train_overrides or {}))
        for v in variants:
            for x in grid:
                res, _, _ = run_one(data, v, config, {param: float(x)})
                cells[(v, float(x))].results.append(res)
                if log:
                    log(f"seed {seed} {v} {param}={x:g}: cvr_auc={res.cvr_auc:.4f} ctcvr_auc={res.ctcvr_auc:.4f}")
    return list(cells.values())


def results_by(results: Sequence[RunResult], variant: str) -> list[RunResult]:
    return sorted((r for r in results if r.variant == variant), key=lambda r: r.seed)


def digest(rows: Sequence[dict]) -> str:
    """Stable hash of a result table."""
    return hashlib.sha256(analysis.dumps_json(list(rows)).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Monte Carlo verification of the estimator bias and variance formulas


@dataclass
class EstimatorInstance:
    delta: np.ndarray
    delta_hat: np.ndarray
    q: np.ndarray
    o_hat: np.ndarray


def estimator_instances(count: int = 20, seed: int = 0, max_size: int = 200, min_size: int = 20) -> list[EstimatorInstance]:
    """Random (delta, delta_hat, q, o_hat) instances with 0 < delta_hat < 2*delta."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(count):
        rng = np.random.default_rng(child)
        n = int(rng.integers(min_size, max_size + 1))
        delta = rng.uniform(0.05, 2.0, n)
        q = rng.uniform(0.05, 0.95, n)
        o_hat = np.clip(q * np.exp(rng.normal(0.0, 0.4, n)), 0.02, 0.98)
        delta_hat = delta * rng.uniform(0.2, 1.8, n)
        out.append(EstimatorInstance(delta, delta_hat, q, o_hat))
    return out


def _within(observed: float, expected: float, se: float, k: float) -> bool:
    # the additive slack only absorbs floating-point rounding when se is ~0
    return bool(abs(observed - expected) <= k * se + 1e-12 * (1.0 + abs(expected)))


def verify_estimators(count: int = 20, seed: int = 0, draws: int = 100_000, k_match: float = 5.0, k_zero: float = 4.0):
    """Run every estimator check on ``count`` random instances; return table rows."""
    rows = []
    for idx, inst in enumerate(estimator_instances(count, seed)):
        sub = seed * 1_000_003 + idx
        ips = analysis.mc_estimator_stats(inst.delta, inst.q, inst.o_hat, "IPS", draws=draws, seed=sub)
        dr = analysis.mc_estimator_stats(
            inst.delta, inst.q, inst.o_hat, "DR", delta_hat=inst.delta_hat, draws=draws, seed=sub
        )
        ips_exact = analysis.mc_estimator_stats(inst.delta, inst.q, inst.q, "IPS", draws=draws, seed=sub)
        dr_prop = analysis.mc_estimator_stats(
            inst.delta, inst.q, inst.q, "DR", delta_hat=inst.delta_hat, draws=draws, seed=sub
        )
        dr_imp = analysis.mc_estimator_stats(
            inst.delta, inst.q, inst.o_hat, "DR", delta_hat=inst.delta, draws=draws, seed=sub
        )
        checks = {
            "ips_bias_matches": _within(ips.empirical_bias, ips.analytic_signed_bias, ips.bias_se, k_match),
            "ips_variance_matches": _within(ips.empirical_variance, ips.analytic_variance, ips.variance_se, k_match),
            "ips_unbiased_at_true_propensity": _within(ips_exact.empirical_bias, 0.0, ips_exact.bias_se, k_zero),
            "dr_bias_matches": _within(dr.empirical_bias, dr.analytic_signed_bias, dr.bias_se, k_match),
            "dr_variance_matches": _within(dr.empirical_variance, dr.analytic_variance, dr.variance_se, k_match),
            "dr_unbiased_correct_propensity": _within(dr_prop.empirical_bias, 0.0, dr_prop.bias_se, k_zero),
            "dr_unbiased_correct_imputation": _within(dr_imp.empirical_bias, 0.0, dr_imp.bias_se, k_zero),
            "dr_variance_below_ips_analytic": dr.analytic_variance < ips.analytic_variance,
            "dr_variance_below_ips_empirical": dr.empirical_variance < ips.empirical_variance,
        }
        rows.append(
            {
                "instance": idx,
                "size": int(inst.delta.size),
                "ips_empirical_bias": ips.empirical_bias,
                "ips_bias_se": ips.bias_se,
                "ips_analytic_bias": ips.analytic_signed_bias,
                "ips_empirical_variance": ips.empirical_variance,
                "ips_variance_se": ips.variance_se,
                "ips_analytic_variance": ips.analytic_variance,
                "ips_exact_bias_z": ips_exact.bias_z(0.0),
                "dr_empirical_bias": dr.empirical_bias,
                "dr_bias_se": dr.bias_se,
                "dr_analytic_bias": dr.analytic_signed_bias,
                "dr_empirical_variance": dr.empirical_variance,
                "dr_variance_se": dr.variance_se,
                "dr_analytic_variance": dr.analytic_variance,
                **checks,
                "passed": all(checks.values()),
            }
        )
    return rows
