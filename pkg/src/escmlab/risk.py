"""Risk functionals for every CVR estimator in the family.

Each functional maps a batch of per-sample quantities (click ``o``, observed
conversion ``r``, CTR estimate ``o_hat``, CVR estimate ``r_hat``, imputed
error ``delta_hat``) to a scalar. Normalisers follow each estimator
literally: the naive risk averages over the click space, everything else
over the exposure space.

:func:`objective_gradients` returns per-sample derivatives of the weighted
objective with respect to ``o_hat``, ``r_hat`` and ``delta_hat``. Two
quantities are held constant there (stop-gradient): the propensity weight
``1 / o_hat`` inside the IPS and DR terms, and the true error ``delta``
inside the imputation-accuracy terms. :func:`total_objective` accepts the
same frozen values so that finite differences can be taken against the
identical surrogate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._numerics import bce, bce_grad
from .errors import ConfigError, DomainError, LengthMismatchError, UndefinedRiskError

VARIANTS = (
    "NAIVE",
    "MTL-IMP",
    "MTL-EIB",
    "MTL-IPS",
    "MTL-DR",
    "ESMM",
    "ESCM2-IPS",
    "ESCM2-DR",
)

# variant -> (CVR risk name or None, includes the CTCVR term)
_OBJECTIVES = {
    "NAIVE": ("naive", False),
    "MTL-IMP": ("imp", False),
    "MTL-EIB": ("eib", False),
    "MTL-IPS": ("ips", False),
    "MTL-DR": ("dr", False),
    "ESMM": (None, True),
    "ESCM2-IPS": ("ips", True),
    "ESCM2-DR": ("dr", True),
}

IMPUTING_VARIANTS = frozenset({"MTL-EIB", "MTL-DR", "ESCM2-DR"})


def check_variant(variant: str) -> str:
    if variant not in _OBJECTIVES:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


def uses_ctcvr(variant: str) -> bool:
    return _OBJECTIVES[check_variant(variant)][1]


@dataclass(frozen=True)
class Objective:
    """Which weighted objective to optimise."""

    variant: str
    lambda_c: float = 0.1
    lambda_g: float = 1.0

    def __post_init__(self):
        check_variant(self.variant)
        if self.lambda_c < 0 or self.lambda_g < 0:
            raise ConfigError("loss weights must be non-negative")

    @classmethod
    def from_config(cls, variant: str, config) -> "Objective":
        return cls(variant, config.lambda_c, config.lambda_g)


@dataclass
class SampleQuantities:
    """Columnar batch of per-sample quantities.

    ``delta`` may be supplied directly instead of ``r``/``r_hat`` when only
    the error values matter (as in the bias/variance harness).
    """

    o: np.ndarray
    r: Optional[np.ndarray] = None
    o_hat: Optional[np.ndarray] = None
    r_hat: Optional[np.ndarray] = None
    delta_hat: Optional[np.ndarray] = None
    q_true: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None

    def __post_init__(self):
        self.o = np.atleast_1d(np.asarray(self.o, dtype=np.float64))
        n = self.o.shape[0]
        for name in ("r", "o_hat", "r_hat", "delta_hat", "q_true", "delta"):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
            if arr.shape != (n,):
                raise LengthMismatchError(f"{name} has shape {arr.shape}, expected ({n},)")
            setattr(self, name, arr)
        if self.r is None and self.delta is None and self.r_hat is not None:
            self.r = np.zeros(n)

    def __len__(self):
        return self.o.shape[0]

    @property
    def error(self) -> np.ndarray:
        """CVR estimation error delta; label is ``r`` (0 for unclicked rows)."""
        if self.delta is not None:
            return self.delta
        if self.r_hat is None:
            raise ConfigError("either delta or r_hat is required")
        r = self.r if self.r is not None else np.zeros(len(self))
        return bce(r, self.r_hat)

    def _need(self, name: str) -> np.ndarray:
        value = getattr(self, name)
        if value is None:
            raise ConfigError(f"{name} is required for this risk")
        return value


@dataclass(frozen=True)
class RiskBreakdown:
    l_ctr: float
    l_cvr: float
    l_ctcvr: float
    total: float
    lambda_c: float = 0.0
    lambda_g: float = 0.0

    @classmethod
    def combine(cls, l_ctr, l_cvr, l_ctcvr, lambda_c, lambda_g) -> "RiskBreakdown":
        total = l_ctr + lambda_c * l_cvr + lambda_g * l_ctcvr
        return cls(float(l_ctr), float(l_cvr), float(l_ctcvr), float(total), lambda_c, lambda_g)

    def as_dict(self) -> dict:
        return {
            "l_ctr": self.l_ctr,
            "l_cvr": self.l_cvr,
            "l_ctcvr": self.l_ctcvr,
            "total": self.total,
        }


def cvr_error(r, r_hat):
    return bce(r, r_hat)


def _propensity(batch: SampleQuantities, frozen_o_hat=None) -> np.ndarray:
    o_hat = batch._need("o_hat") if frozen_o_hat is None else np.asarray(frozen_o_hat, dtype=np.float64)
    if np.any(o_hat <= 0.0):
        raise DomainError("propensity estimates must be positive")
    return o_hat


def _nonempty(batch: SampleQuantities):
    if len(batch) == 0:
        raise UndefinedRiskError("empty batch")


def naive_risk(batch: SampleQuantities) -> float:
    n_clicked = batch.o.sum()
    if n_clicked == 0:
        raise UndefinedRiskError("naive risk needs at least one clicked sample")
    clicked = batch.o > 0
    return float(np.sum(batch.error[clicked]) / n_clicked)


def mtl_imp_risk(batch: SampleQuantities) -> float:
    _nonempty(batch)
    r = batch.r if batch.r is not None else np.zeros(len(batch))
    return float(np.mean(bce(batch.o * r, batch._need("r_hat"))))


def _correction(batch: SampleQuantities, delta_hat) -> np.ndarray:
    # clicked rows carry delta - delta_hat, unclicked rows exactly 0
    clicked = batch.o > 0
    out = np.zeros(len(batch))
    out[clicked] = batch.error[clicked] - delta_hat[clicked]
    return out


def eib_risk(batch: SampleQuantities) -> float:
    _nonempty(batch)
    delta_hat = batch._need("delta_hat")
    return float(np.mean(delta_hat + _correction(batch, delta_hat)))


def eib_imp_risk(batch: SampleQuantities, frozen_delta=None) -> float:
    """Unweighted imputation-accuracy term paired with the EIB baseline."""
    _nonempty(batch)
    e = _imputation_residual(batch, frozen_delta)
    return float(np.mean(batch.o * e**2))


def ips_risk(batch: SampleQuantities, frozen_o_hat=None) -> float:
    _nonempty(batch)
    o_hat = _propensity(batch, frozen_o_hat)
    clicked = batch.o > 0
    terms = np.zeros(len(batch))
    terms[clicked] = batch.error[clicked] / o_hat[clicked]
    return float(np.mean(terms))


def dr_err_risk(batch: SampleQuantities, frozen_o_hat=None) -> float:
    _nonempty(batch)
    delta_hat = batch._need("delta_hat")
    o_hat = _propensity(batch, frozen_o_hat)
    return float(np.mean(delta_hat + _correction(batch, delta_hat) / o_hat))


def _imputation_residual(batch: SampleQuantities, frozen_delta=None) -> np.ndarray:
    delta_hat = batch._need("delta_hat")
    clicked = batch.o > 0
    delta = batch.error if frozen_delta is None else np.asarray(frozen_delta, dtype=np.float64)
    out = np.zeros(len(batch))
    out[clicked] = delta[clicked] - delta_hat[clicked]
    return out


def dr_imp_risk(batch: SampleQuantities, frozen_o_hat=None, frozen_delta=None) -> float:
    _nonempty(batch)
    o_hat = _propensity(batch, frozen_o_hat)
    e = _imputation_residual(batch, frozen_delta)
    return float(np.mean(batch.o * e**2 / o_hat))


def dr_risk(batch: SampleQuantities, frozen_o_hat=None, frozen_delta=None) -> float:
    return dr_err_risk(batch, frozen_o_hat) + dr_imp_risk(batch, frozen_o_hat, frozen_delta)


def ctr_risk(batch: SampleQuantities) -> float:
    _nonempty(batch)
    return float(np.mean(bce(batch.o, batch._need("o_hat"))))


def ctcvr_risk(batch: SampleQuantities) -> float:
    _nonempty(batch)
    r = batch.r if batch.r is not None else np.zeros(len(batch))
    product = batch._need("o_hat") * batch._need("r_hat")
    return float(np.mean(bce(batch.o * r, product)))


def _check_fields(batch: SampleQuantities, variant: str):
    batch._need("o_hat")
    cvr_name, with_ctcvr = _OBJECTIVES[variant]
    if cvr_name is not None or with_ctcvr:
        batch._need("r_hat")
    if variant in IMPUTING_VARIANTS:
        batch._need("delta_hat")


def total_objective(
    batch: SampleQuantities,
    variant: str,
    lambda_c: float,
    lambda_g: float,
    frozen_o_hat=None,
    frozen_delta=None,
) -> RiskBreakdown:
    """Weighted objective ``L_CTR + lambda_c * L_CVR + lambda_g * L_CTCVR``.

    Terms a variant does not use are reported as exactly 0. A batch without
    clicks contributes 0 to the naive CVR term instead of raising, so that
    training on small batches stays defined.
    """
    check_variant(variant)
    _check_fields(batch, variant)
    cvr_name, with_ctcvr = _OBJECTIVES[variant]
    l_ctr = ctr_risk(batch)
    l_ctcvr = ctcvr_risk(batch) if with_ctcvr else 0.0
    if cvr_name is None:
        l_cvr = 0.0
    elif cvr_name == "naive":
        l_cvr = naive_risk(batch) if batch.o.sum() > 0 else 0.0
    elif cvr_name == "imp":
        l_cvr = mtl_imp_risk(batch)
    elif cvr_name == "eib":
        l_cvr = eib_risk(batch) + eib_imp_risk(batch, frozen_delta)
    elif cvr_name == "ips":
        l_cvr = ips_risk(batch, frozen_o_hat)
    else:
        l_cvr = dr_risk(batch, frozen_o_hat, frozen_delta)
    return RiskBreakdown.combine(l_ctr, l_cvr, l_ctcvr, lambda_c, lambda_g)


def objective_gradients(batch: SampleQuantities, variant: str, lambda_c: float, lambda_g: float):
    """Objective value plus per-sample derivatives.

    Returns ``(breakdown, grads)`` where ``grads`` maps ``"o_hat"``,
    ``"r_hat"`` and ``"delta_hat"`` to arrays (``None`` when the variant has
    no dependence on that quantity).
    """
    breakdown = total_objective(batch, variant, lambda_c, lambda_g)
    cvr_name, with_ctcvr = _OBJECTIVES[variant]
    n = len(batch)
    o = batch.o
    o_hat = batch.o_hat
    r = batch.r if batch.r is not None else np.zeros(n)
    r_hat = batch.r_hat

    g_o = bce_grad(o, o_hat) / n
    g_r = None if r_hat is None else np.zeros(n)
    g_d = None

    if with_ctcvr:
        c = o * r
        gp = lambda_g * bce_grad(c, o_hat * r_hat) / n
        g_o = g_o + gp * r_hat
        g_r += gp * o_hat

    if cvr_name is not None:
        d_err = bce_grad(r, r_hat) * o
        if cvr_name == "naive":
            n_clicked = o.sum()
            if n_clicked > 0:
                g_r += lambda_c * d_err / n_clicked
        elif cvr_name == "imp":
            g_r += lambda_c * bce_grad(o * r, r_hat) / n
        elif cvr_name == "eib":
            e = _imputation_residual(batch)
            g_r += lambda_c * d_err / n
            g_d = lambda_c * ((1.0 - o) - 2.0 * o * e) / n
        elif cvr_name == "ips":
            g_r += lambda_c * d_err / o_hat / n
        else:
            e = _imputation_residual(batch)
            g_r += lambda_c * d_err / o_hat / n
            g_d = lambda_c * ((1.0 - o / o_hat) - 2.0 * o * e / o_hat) / n

    return breakdown, {"o_hat": g_o, "r_hat": g_r, "delta_hat": g_d}
