"""Estimator statistics, the Jensen gap, IEB and causal-risk-ratio reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    ConfigError,
    DegenerateOutcomeError,
    DomainError,
    LengthMismatchError,
    NoOverlapError,
    UndefinedMetricError,
)
from .metrics import auc, rank_metrics  # noqa: F401  (re-exported)

REPORT_SCHEMA_VERSION = 1
MC_CHUNK = 10_000
ESTIMATORS = ("IPS", "DR")


def _arrays(*cols):
    arrs = [np.asarray(c, dtype=np.float64).ravel() for c in cols]
    if len({a.size for a in arrs}) != 1:
        raise LengthMismatchError("inputs differ in length")
    return arrs


def _check_propensity(o_hat):
    if np.any(o_hat <= 0):
        raise DomainError("propensity estimates must be positive")


# --------------------------------------------------------------------------
# analytic bias / variance


def ips_signed_bias(delta, q, o_hat) -> float:
    """E[R_IPS] - P, keeping the sign."""
    delta, q, o_hat = _arrays(delta, q, o_hat)
    _check_propensity(o_hat)
    return float(np.sum(delta * (q / o_hat - 1.0)) / delta.size)


def analytic_ips_stats(delta, q, o_hat) -> tuple[float, float]:
    """(|bias|, variance) of the IPS risk estimator under O ~ Bernoulli(q)."""
    delta, q, o_hat = _arrays(delta, q, o_hat)
    _check_propensity(o_hat)
    n = delta.size
    variance = np.sum(q * (1.0 - q) * delta**2 / o_hat**2) / n**2
    return abs(ips_signed_bias(delta, q, o_hat)), float(variance)


def dr_signed_bias(delta, delta_hat, q, o_hat) -> float:
    delta, delta_hat, q, o_hat = _arrays(delta, delta_hat, q, o_hat)
    _check_propensity(o_hat)
    return float(np.sum((q - o_hat) * (delta - delta_hat) / o_hat) / delta.size)


def analytic_dr_stats(delta, delta_hat, q, o_hat) -> tuple[float, float]:
    """(|bias|, variance) of the doubly robust error estimator."""
    delta, delta_hat, q, o_hat = _arrays(delta, delta_hat, q, o_hat)
    _check_propensity(o_hat)
    n = delta.size
    variance = np.sum(q * (1.0 - q) * (delta_hat - delta) ** 2 / o_hat**2) / n**2
    return abs(dr_signed_bias(delta, delta_hat, q, o_hat)), float(variance)


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class EstimatorStats:
    estimator: str
    draws: int
    empirical_bias: float  # signed
    bias_se: float
    empirical_variance: float
    variance_se: float
    analytic_bias: float  # absolute value
    analytic_signed_bias: float
    analytic_variance: float

    def bias_z(self, reference: Optional[float] = None) -> float:
        """Distance of the empirical bias from ``reference`` in standard errors."""
        ref = self.analytic_signed_bias if reference is None else reference
        return abs(self.empirical_bias - ref) / self.bias_se

    def variance_z(self) -> float:
        return abs(self.empirical_variance - self.analytic_variance) / self.variance_se

    def to_dict(self) -> dict:
        return asdict(self)


def _estimator_values(o, delta, delta_hat, o_hat, estimator):
    # o: (draws, n) click indicators
    if estimator == "IPS":
        return (o * (delta / o_hat)).mean(axis=1)
    return (delta_hat + o * ((delta - delta_hat) / o_hat)).mean(axis=1)


def mc_estimator_stats(
    delta,
    q,
    o_hat,
    estimator: str = "IPS",
    delta_hat=None,
    draws: int = 100_000,
    seed: int = 0,
) -> EstimatorStats:
    """Redraw clicks ``draws`` times and measure the estimator's bias and variance.

    Draws are generated in chunks with spawned child seeds, so the result
    does not depend on how the chunks are scheduled.
    """
    if estimator not in ESTIMATORS:
        raise ConfigError(f"estimator must be one of {ESTIMATORS}")
    if draws < 2:
        raise ConfigError("need at least two draws")
    if estimator == "DR":
        if delta_hat is None:
            raise ConfigError("DR needs delta_hat")
        delta, delta_hat, q, o_hat = _arrays(delta, delta_hat, q, o_hat)
    else:
        delta, q, o_hat = _arrays(delta, q, o_hat)
        delta_hat = np.zeros_like(delta)
    _check_propensity(o_hat)
    if np.any((q < 0) | (q > 1)):
        raise DomainError("q must be a probability")

    n_chunks = -(-draws // MC_CHUNK)
    values = np.empty(draws)
    for c, child in enumerate(np.random.SeedSequence(seed).spawn(n_chunks)):
        rng = np.random.default_rng(child)
        lo = c * MC_CHUNK
        size = min(MC_CHUNK, draws - lo)
        o = (rng.random((size, delta.size)) < q).astype(np.float64)
        values[lo : lo + size] = _estimator_values(o, delta, delta_hat, o_hat, estimator)

    target = delta.mean()
    mean = values.mean()
    centred = values - mean
    var = float(np.sum(centred**2) / (draws - 1))
    m4 = float(np.mean(centred**4))
    # large-sample standard error of the sample variance
    var_se = float(np.sqrt(max(m4 - var**2, 0.0) / draws))

    if estimator == "IPS":
        a_bias, a_var = analytic_ips_stats(delta, q, o_hat)
        signed = ips_signed_bias(delta, q, o_hat)
    else:
        a_bias, a_var = analytic_dr_stats(delta, delta_hat, q, o_hat)
        signed = dr_signed_bias(delta, delta_hat, q, o_hat)
    tiny = float(np.finfo(float).tiny)
    return EstimatorStats(
        estimator=estimator,
        draws=draws,
        empirical_bias=float(mean - target),
        bias_se=max(float(np.sqrt(var / draws)), tiny),
        empirical_variance=var,
        variance_se=max(var_se, tiny),
        analytic_bias=a_bias,
        analytic_signed_bias=signed,
        analytic_variance=a_var,
    )


# --------------------------------------------------------------------------
# Jensen gap


class JensenGap(NamedTuple):
    lhs: float
    rhs: float
    gap: float


def jensen_gap(c_hat, o_hat) -> JensenGap:
    """Compare E[C]E[1/O] with E[C]/E[O] for independent samples of C and O."""
    c_hat = np.asarray(c_hat, dtype=np.float64).ravel()
    o_hat = np.asarray(o_hat, dtype=np.float64).ravel()
    if c_hat.size == 0 or o_hat.size == 0:
        raise DomainError("inputs must be nonempty")
    if np.any(c_hat <= 0) or np.any(o_hat <= 0):
        raise DomainError("inputs must be positive")
    lhs = float(c_hat.mean() * np.mean(1.0 / o_hat))
    rhs = float(c_hat.mean() / o_hat.mean())
    return JensenGap(lhs, rhs, max(lhs - rhs, 0.0))


# --------------------------------------------------------------------------
# IEB


class IebResult(NamedTuple):
    mean_label: float
    mean_estimate: float
    ieb_gap: float
    label_source: str


def _predictions(trained, dataset, predictions):
    if predictions is not None:
        return predictions
    from .models import predict

    return predict(trained, dataset)


def ieb_report(trained, dataset, predictions=None) -> IebResult:
    """Mean CVR estimate over all exposures against the best available label.

    The label is the mean potential conversion when the data is synthetic,
    else the mean true CVR if present, else the click-space conversion rate,
    which upper-bounds the exposure-space rate.
    """
    if len(dataset) == 0:
        raise DomainError("dataset is empty")
    pred = _predictions(trained, dataset, predictions)
    if dataset.r_potential is not None:
        label, source = float(np.mean(dataset.r_potential)), "r_potential"
    elif dataset.cvr_true is not None:
        label, source = float(np.mean(dataset.cvr_true)), "cvr_true"
    else:
        if dataset.n_clicks == 0:
            raise UndefinedMetricError("no clicks to form the click-space proxy")
        label, source = dataset.click_space_cvr(), "click_space_cvr"
    estimate = float(np.mean(pred.r_hat))
    return IebResult(label, estimate, estimate - label, source)


# --------------------------------------------------------------------------
# propensity score matching and CRR


@dataclass(frozen=True)
class MatchedPairs:
    treated: np.ndarray  # record indices, clicked
    control: np.ndarray  # record indices, unclicked
    distance: np.ndarray
    caliper: float

    def __len__(self) -> int:
        return int(self.treated.size)


def default_caliper(propensity) -> float:
    p = np.asarray(propensity, dtype=np.float64)
    return 0.1 * float(np.std(p))


def _find(parent, i):
    # path-halving find over "next unused slot" pointers
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def psm_match(records, propensity, caliper: Optional[float] = None) -> MatchedPairs:
    """Greedy 1:1 nearest-neighbour matching without replacement.

    Clicked records are visited in input order; each takes the closest unused
    unclicked record within ``caliper`` (ties go to the lower index) or is
    dropped.
    """
    o = np.asarray(records.o if hasattr(records, "o") else records, dtype=np.int64).ravel()
    p = np.asarray(propensity, dtype=np.float64).ravel()
    if o.size != p.size:
        raise LengthMismatchError("records and propensity differ in length")
    treated_idx = np.flatnonzero(o == 1)
    control_idx = np.flatnonzero(o == 0)
    if treated_idx.size == 0 or control_idx.size == 0:
        raise NoOverlapError("both click groups must be nonempty")
    if caliper is None:
        caliper = default_caliper(p)
    if not caliper > 0:
        raise ConfigError("caliper must be positive")

    order = np.argsort(p[control_idx], kind="mergesort")
    c_idx = control_idx[order]
    c_p = p[c_idx]
    m = c_idx.size
    # right[i]: first unused slot >= i (m = none); left[i+1]: last unused slot <= i, shifted by one
    right = list(range(m + 1))
    left = list(range(m + 1))

    pairs_t, pairs_c, dists = [], [], []
    for t in treated_idx:
        pt = p[t]
        pos = int(np.searchsorted(c_p, pt, side="left"))
        best = None
        r = _find(right, pos)
        if r < m:
            best = r
        lf = _find(left, pos) - 1
        if lf >= 0:
            # among equal propensities prefer the first unused control
            lf = _find(right, int(np.searchsorted(c_p, c_p[lf], side="left")))
            if best is None:
                best = lf
            else:
                dl, dr = pt - c_p[lf], c_p[best] - pt
                if dl < dr or (dl == dr and c_idx[lf] < c_idx[best]):
                    best = lf
        if best is None or abs(c_p[best] - pt) > caliper:
            continue
        pairs_t.append(t)
        pairs_c.append(c_idx[best])
        dists.append(abs(c_p[best] - pt))
        right[best] = best + 1
        left[best + 1] = best

    if not pairs_t:
        raise NoOverlapError(f"no clicked record has an unclicked partner within caliper {caliper:g}")
    return MatchedPairs(
        np.asarray(pairs_t, dtype=np.int64),
        np.asarray(pairs_c, dtype=np.int64),
        np.asarray(dists),
        float(caliper),
    )


class CrrResult(NamedTuple):
    crr: float
    strength: float
    n_pairs: int


def crr_strength(pairs: MatchedPairs, outcome) -> CrrResult:
    """Causal risk ratio of the outcome between matched clicked and unclicked records."""
    y = np.asarray(outcome, dtype=np.float64).ravel()
    if len(pairs) == 0:
        raise NoOverlapError("no matched pairs")
    treated = float(np.mean(y[pairs.treated]))
    control = float(np.mean(y[pairs.control]))
    if control == 0:
        raise DegenerateOutcomeError("control outcome mean is zero")
    crr = treated / control
    return CrrResult(crr, abs(1.0 - crr), len(pairs))


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    variant: str
    n_records: int
    metrics: dict = field(default_factory=dict)  # task -> {auc, ks, recall, f1}
    mean_label: float = float("nan")
    mean_estimate: float = float("nan")
    ieb_gap: float = float("nan")
    label_source: str = ""
    crr: Optional[float] = None
    crr_strength: Optional[float] = None
    matched_pairs: int = 0
    mae_cvr_true: Optional[float] = None

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}


def _safe_metrics(labels, scores):
    try:
        m = rank_metrics(labels, scores)
    except UndefinedMetricError:
        return None
    return {k: m[k] for k in ("auc", "ks", "recall", "f1")}


def evaluate(trained, dataset, predictions=None, with_crr: bool = True, caliper=None) -> EvalReport:
    """Ranking metrics per task, IEB gap and (optionally) CRR strength."""
    pred = _predictions(trained, dataset, predictions)
    clicked = dataset.o == 1
    report = EvalReport(variant=trained.variant.name, n_records=len(dataset))
    report.metrics["ctr"] = _safe_metrics(dataset.o, pred.o_hat)
    report.metrics["cvr"] = _safe_metrics(dataset.r[clicked], pred.r_hat[clicked])
    report.metrics["ctcvr"] = _safe_metrics(dataset.o * dataset.r, pred.ctcvr)
    ieb = ieb_report(trained, dataset, pred)
    report.mean_label, report.mean_estimate, report.ieb_gap, report.label_source = ieb
    if dataset.cvr_true is not None:
        report.mae_cvr_true = float(np.mean(np.abs(pred.r_hat - dataset.cvr_true)))
    if with_crr:
        pairs = psm_match(dataset, pred.o_hat, caliper)
        crr = crr_strength(pairs, pred.r_hat)
        report.crr, report.crr_strength, report.matched_pairs = crr
    return report


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_json(obj).encode("utf-8"))
    return path


def dumps_csv(rows: list, columns: Optional[list] = None) -> str:
    rows = [_plain(r) for r in rows]
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in columns])
    return buf.getvalue()


def write_csv(rows: list, path, columns: Optional[list] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_csv(rows, columns).encode("utf-8"))
    return path
