"""Triplet, quadruplet and reconstruction losses with gradients w.r.t. signatures.

All distances are squared Euclidean. Hinge terms that are exactly zero get a
zero subgradient.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

DEFAULT_ALPHA = 1.75


@dataclass(frozen=True)
class TripletMargin:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"margin must be non-negative, got {self.alpha}")


@dataclass(frozen=True)
class QuadrupletMargins:
    alpha1: float = DEFAULT_ALPHA
    alpha2: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not (self.alpha1 >= 0 and self.alpha2 >= 0):
            raise ValueError("quadruplet margins must be non-negative")


@dataclass
class LossReport:
    total_loss: float
    active_count: int
    per_term: np.ndarray = field(repr=False)


def _alpha(margin) -> float:
    if isinstance(margin, TripletMargin):
        return float(margin.alpha)
    return float(TripletMargin(float(margin)).alpha)


def _margins(margins) -> QuadrupletMargins:
    if isinstance(margins, QuadrupletMargins):
        return margins
    if margins is None:
        return QuadrupletMargins()
    a1, a2 = margins
    return QuadrupletMargins(float(a1), float(a2))


def _vectors(*vs):
    arrs = [np.asarray(v, dtype=np.float64) for v in vs]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs) or len(shape) != 1:
        raise DimensionError(f"points must be equal-length vectors, got shapes {[a.shape for a in arrs]}")
    return arrs


def _sqdist(u, v):
    d = u - v
    return float(np.dot(d, d))


def triplet_loss(x_a, x_p, x_n, margin=DEFAULT_ALPHA) -> float:
    a, p, n = _vectors(x_a, x_p, x_n)
    return max(_sqdist(a, p) - _sqdist(a, n) + _alpha(margin), 0.0)


def triplet_loss_grad(x_a, x_p, x_n, margin=DEFAULT_ALPHA):
    a, p, n = _vectors(x_a, x_p, x_n)
    if _sqdist(a, p) - _sqdist(a, n) + _alpha(margin) <= 0:
        z = np.zeros_like(a)
        return z, z.copy(), z.copy()
    return 2 * (n - p), 2 * (p - a), 2 * (a - n)


def quadruplet_loss(x_a, x_p, x_n, x_n2, margins=None) -> float:
    m = _margins(margins)
    a, p, n, n2 = _vectors(x_a, x_p, x_n, x_n2)
    d_ap = _sqdist(a, p)
    return max(d_ap - _sqdist(a, n) + m.alpha1, 0.0) + max(d_ap - _sqdist(n, n2) + m.alpha2, 0.0)


def quadruplet_loss_grad(x_a, x_p, x_n, x_n2, margins=None):
    m = _margins(margins)
    a, p, n, n2 = _vectors(x_a, x_p, x_n, x_n2)
    g = [np.zeros_like(a) for _ in range(4)]
    d_ap = _sqdist(a, p)
    if d_ap - _sqdist(a, n) + m.alpha1 > 0:
        g[0] += 2 * (n - p)
        g[1] += 2 * (p - a)
        g[2] += 2 * (a - n)
    if d_ap - _sqdist(n, n2) + m.alpha2 > 0:
        g[0] += 2 * (a - p)
        g[1] += 2 * (p - a)
        g[2] += 2 * (n2 - n)
        g[3] += 2 * (n - n2)
    return tuple(g)


def _index_array(tuples, width, B):
    idx = np.asarray(tuples, dtype=np.int64)
    if idx.size == 0:
        return idx.reshape(0, width)
    if idx.ndim != 2 or idx.shape[1] != width:
        raise ValueError(f"expected a sequence of {width}-tuples")
    if idx.min() < 0 or idx.max() >= B:
        raise IndexError(f"tuple index out of range for a batch of {B}")
    return idx


def _rowwise_sq(u, v):
    d = u - v
    return np.einsum("ij,ij->i", d, d)


def batch_triplet_loss(signatures, triplets, margin=DEFAULT_ALPHA):
    """Summed triplet loss over index triples into ``signatures``.

    Returns ``(LossReport, grad)`` with ``grad`` shaped like ``signatures``.
    """
    X = np.asarray(signatures, dtype=np.float64)
    alpha = _alpha(margin)
    idx = _index_array(triplets, 3, X.shape[0])
    grad = np.zeros_like(X)
    if idx.shape[0] == 0:
        return LossReport(0.0, 0, np.zeros(0)), grad
    a, p, n = X[idx[:, 0]], X[idx[:, 1]], X[idx[:, 2]]
    terms = _rowwise_sq(a, p) - _rowwise_sq(a, n) + alpha
    active = terms > 0
    per_term = np.where(active, terms, 0.0)
    w = active[:, None].astype(np.float64)
    np.add.at(grad, idx[:, 0], 2 * (n - p) * w)
    np.add.at(grad, idx[:, 1], 2 * (p - a) * w)
    np.add.at(grad, idx[:, 2], 2 * (a - n) * w)
    return LossReport(float(per_term.sum()), int(active.sum()), per_term), grad


def batch_quadruplet_loss(signatures, quadruplets, margins=None):
    """Summed quadruplet loss; ``per_term`` holds one combined value per quadruplet."""
    X = np.asarray(signatures, dtype=np.float64)
    m = _margins(margins)
    idx = _index_array(quadruplets, 4, X.shape[0])
    grad = np.zeros_like(X)
    if idx.shape[0] == 0:
        return LossReport(0.0, 0, np.zeros(0)), grad
    a, p, n, n2 = (X[idx[:, k]] for k in range(4))
    d_ap = _rowwise_sq(a, p)
    t1 = d_ap - _rowwise_sq(a, n) + m.alpha1
    t2 = d_ap - _rowwise_sq(n, n2) + m.alpha2
    on1 = (t1 > 0)[:, None].astype(np.float64)
    on2 = (t2 > 0)[:, None].astype(np.float64)
    per_term = np.maximum(t1, 0) + np.maximum(t2, 0)
    np.add.at(grad, idx[:, 0], 2 * (n - p) * on1 + 2 * (a - p) * on2)
    np.add.at(grad, idx[:, 1], 2 * (p - a) * (on1 + on2))
    np.add.at(grad, idx[:, 2], 2 * (a - n) * on1 + 2 * (n2 - n) * on2)
    np.add.at(grad, idx[:, 3], 2 * (n - n2) * on2)
    return LossReport(float(per_term.sum()), int((per_term > 0).sum()), per_term), grad


def autoencoder_loss(inputs, reconstruction):
    """Mean over rows of the squared reconstruction error, and its gradient
    w.r.t. ``reconstruction``."""
    x = np.asarray(inputs, dtype=np.float64)
    r = np.asarray(reconstruction, dtype=np.float64)
    if x.shape != r.shape:
        raise DimensionError(f"input shape {x.shape} != reconstruction shape {r.shape}")
    B = x.shape[0] if x.ndim > 1 else 1
    diff = r - x
    return float(np.sum(diff * diff) / B), 2 * diff / B
