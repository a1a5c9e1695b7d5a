"""Distribution distances between two batches of feature vectors.

``mmd_rbf``, ``coral`` and ``sinkhorn_divergence`` are differentiable and serve
as the alignment regularizer. ``exact_wasserstein`` solves the assignment
problem exactly and is only used to monitor training.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffcore as dc
from .diffcore import ContractError, DimensionError, DomainError, Node

log = logging.getLogger(__name__)

MEDIAN = "median"
_STOP_TOL = 1e-13
_DECAY = 0.7


class DegenerateBandwidthWarning(UserWarning):
    pass


class NegativeDivergenceWarning(UserWarning):
    pass


class SampleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    iterations: int = 100
    cost_power: int = 2
    # geometric epsilon schedule from the cost scale down to `epsilon` (at most
    # half of the iterations); False runs every round at `epsilon`
    anneal: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.cost_power not in (1, 2):
            raise ValueError(f"cost_power must be 1 or 2, got {self.cost_power}")


def _node(x) -> Node:
    return x if isinstance(x, Node) else dc.constant(x)


def _check_pair(a: Node, b: Node) -> None:
    for name, t in (("a", a), ("b", b)):
        if t.value.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
            raise DimensionError(f"feature batch {name} must be n x d with n, d >= 1, got {t.shape}")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dimension mismatch: {a.shape} vs {b.shape}")


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float | None:
    """Median of pairwise squared distances over the pooled batch (σ²), or None if zero."""
    pooled = np.concatenate([a, b], axis=0)
    diff = pooled[:, None, :] - pooled[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(d2[iu])) if len(iu[0]) else 0.0
    return med if med > 0 else None


def mmd_rbf(a, b, bandwidth: float | str = MEDIAN) -> Node:
    """Biased squared MMD with kernel exp(-|x-y|^2 / (2 sigma^2)).

    ``bandwidth`` is sigma, or ``"median"`` to set sigma^2 to the median pairwise
    squared distance of the pooled batch. The bandwidth is a constant in the
    backward pass.
    """
    a, b = _node(a), _node(b)
    _check_pair(a, b)
    if bandwidth == MEDIAN:
        sigma2 = median_bandwidth(a.value, b.value)
        if sigma2 is None:
            warnings.warn("all points coincide; falling back to sigma=1", DegenerateBandwidthWarning)
            sigma2 = 1.0
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        sigma2 = sigma * sigma
    gamma = -1.0 / (2.0 * sigma2)

    def kmean(x, y):
        return dc.mean(dc.exp(dc.scale(dc.sq_dist(x, y), gamma)))

    return dc.sub(dc.add(kmean(a, a), kmean(b, b)), dc.scale(kmean(a, b), 2.0))


def _covariance(h: Node) -> Node:
    n, d = h.shape
    col_sum = dc.reshape(dc.sum(h, axis=0), (1, d))
    outer = dc.matmul(dc.transpose(col_sum), col_sum)
    gram = dc.matmul(dc.transpose(h), h)
    return dc.scale(dc.sub(gram, dc.scale(outer, 1.0 / n)), 1.0 / (n - 1))


def coral(a, b) -> Node:
    """Squared Frobenius distance between covariances, scaled by 1/(4 d^2)."""
    a, b = _node(a), _node(b)
    _check_pair(a, b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise SampleSizeError(f"coral needs >= 2 samples per batch, got {a.shape[0]} and {b.shape[0]}")
    d = a.shape[1]
    diff = dc.sub(_covariance(a), _covariance(b))
    return dc.scale(dc.sum(dc.mul(diff, diff)), 1.0 / (4.0 * d * d))


# ---------------------------------------------------------------- optimal transport

def _cost(x: Node, y: Node, p: int) -> Node:
    d2 = dc.sq_dist(x, y)
    return d2 if p == 2 else dc.sqrt(d2)


def _cost_values(x: np.ndarray, y: np.ndarray, p: int) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return d2 if p == 2 else np.sqrt(d2)


def _softmin(eps: float, cost: np.ndarray, log_w: np.ndarray, pot: np.ndarray) -> np.ndarray:
    # -eps * log sum_j w_j exp((pot_j - C_ij) / eps), row-wise, in the log domain
    z = log_w[None, :] + (pot[None, :] - cost) / eps
    m = z.max(axis=1, keepdims=True)
    return -eps * (np.log(np.exp(z - m).sum(axis=1)) + m[:, 0])


def sinkhorn_potentials(cost: np.ndarray, cfg: SinkhornConfig) -> tuple[np.ndarray, np.ndarray]:
    """Log-domain Sinkhorn loop with uniform weights; returns (f, g) for the rows and columns."""
    if not np.all(np.isfinite(cost)):
        raise DomainError("non-finite entries in the cost matrix")
    n, m = cost.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    tol = _STOP_TOL * (1.0 + float(np.abs(cost).max(initial=0.0)))
    for eps in epsilon_schedule(cost, cfg):
        f_new = _softmin(eps, cost, log_b, g)
        g_new = _softmin(eps, cost.T, log_a, f_new)
        # once at the target epsilon, further rounds would leave the potentials unchanged
        done = eps == cfg.epsilon and np.abs(f_new - f).max() <= tol and np.abs(g_new - g).max() <= tol
        f, g = f_new, g_new
        if done:
            break
    return f, g


def epsilon_schedule(cost: np.ndarray, cfg: SinkhornConfig) -> np.ndarray:
    target = cfg.epsilon
    start = float(cost.max()) if cost.size else 0.0
    if not cfg.anneal or start <= target or cfg.iterations < 4:
        return np.full(cfg.iterations, target)
    # shrink by _DECAY per round, but never spend more than half the rounds annealing
    ramp = min(cfg.iterations // 2, math.ceil(math.log(start / target) / -math.log(_DECAY)) + 1)
    decay = np.geomspace(start, target, ramp)
    return np.concatenate([decay, np.full(cfg.iterations - ramp, target)])


def _ot(x: Node, y: Node, cfg: SinkhornConfig) -> Node:
    """Entropic OT value <a, f> + <b, g>.

    The loop runs outside the graph. One last differentiable update of each
    potential, against a detached copy of the other point cloud, carries the
    gradient (envelope theorem: the gradient of the converged value is the
    transport plan applied to the cost gradient).
    """
    eps, p = cfg.epsilon, cfg.cost_power
    xv, yv = x.value, y.value
    f, g = sinkhorn_potentials(_cost_values(xv, yv, p), cfg)
    n, m = len(xv), len(yv)
    c_xy = _cost(x, dc.constant(yv), p)
    c_yx = _cost(y, dc.constant(xv), p)
    shift_b = np.broadcast_to(-np.log(m) + g / eps, (n, m))
    shift_a = np.broadcast_to(-np.log(n) + f / eps, (m, n))
    f_new = dc.scale(dc.logsumexp(dc.add(dc.scale(c_xy, -1.0 / eps), dc.constant(shift_b)), axis=1), -eps)
    g_new = dc.scale(dc.logsumexp(dc.add(dc.scale(c_yx, -1.0 / eps), dc.constant(shift_a)), axis=1), -eps)
    return dc.add(dc.mean(f_new), dc.mean(g_new))


def sinkhorn_divergence(a, b, cfg: SinkhornConfig | None = None) -> Node:
    """Debiased entropic OT: OT(a, b) - OT(a, a)/2 - OT(b, b)/2, clamped at zero."""
    cfg = cfg or SinkhornConfig()
    a, b = _node(a), _node(b)
    _check_pair(a, b)
    # the truncated loop is not symmetric in its arguments; a canonical
    # orientation makes S(a, b) and S(b, a) bit-identical
    x, y = (a, b) if (a.shape, a.value.tobytes()) <= (b.shape, b.value.tobytes()) else (b, a)
    value = dc.sub(_ot(x, y, cfg), dc.add(dc.scale(_ot(a, a, cfg), 0.5), dc.scale(_ot(b, b, cfg), 0.5)))
    v = float(value.value)
    if v < 0:
        if v < -1e-9:
            warnings.warn(f"sinkhorn divergence {v:.3e} < 0 clamped to 0", NegativeDivergenceWarning)
        else:
            log.debug("sinkhorn divergence %.3e clamped to 0", v)
        return dc.relu(value)
    return value


def exact_wasserstein(a, b, p: int = 2) -> float:
    """(mean matched cost)^(1/p) under the optimal one-to-one assignment."""
    av = a.value if isinstance(a, Node) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Node) else np.asarray(b, dtype=np.float64)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionError(f"feature batch shape mismatch: {av.shape} vs {bv.shape}")
    if av.shape[0] != bv.shape[0]:
        raise ContractError(
            f"exact_wasserstein needs equal batch sizes ({av.shape[0]} vs {bv.shape[0]}); subsample first"
        )
    diff = av[:, None, :] - bv[None, :, :]
    cost = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) ** p
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean() ** (1.0 / p))


Distance = Literal["mmd", "coral", "sinkhorn"]


def distance_loss(name: Distance, a, b, sinkhorn: SinkhornConfig | None = None) -> Node:
    if name == "mmd":
        return mmd_rbf(a, b)
    if name == "coral":
        return coral(a, b)
    if name == "sinkhorn":
        return sinkhorn_divergence(a, b, sinkhorn)
    raise ValueError(f"unknown distance {name!r}")
