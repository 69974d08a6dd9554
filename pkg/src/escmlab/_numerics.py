import numpy as np

from .errors import DomainError


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def softplus(z):
    return np.logaddexp(0.0, np.asarray(z, dtype=np.float64))


def clamp_prob(p, eps: float):
    return np.clip(p, eps, 1.0 - eps)


def bce(label, estimate):
    """Binary cross-entropy ``-y log p - (1 - y) log(1 - p)``, elementwise.

    Raises DomainError if any estimate lies outside the open interval (0, 1);
    callers are expected to clamp first.
    """
    y = np.asarray(label, dtype=np.float64)
    p = np.asarray(estimate, dtype=np.float64)
    if np.any(~(p > 0.0)) or np.any(~(p < 1.0)):
        raise DomainError("bce estimate must lie in (0, 1)")
    out = -y * np.log(p) - (1.0 - y) * np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


def bce_grad(label, estimate):
    """Derivative of :func:`bce` with respect to the estimate."""
    y = np.asarray(label, dtype=np.float64)
    p = np.asarray(estimate, dtype=np.float64)
    return -y / p + (1.0 - y) / (1.0 - p)
