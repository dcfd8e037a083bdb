"""Training losses and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, node, weighted_sum

#: Floor for the distance in the reciprocal (abnormal-video) clustering branch.
DIST_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.90
    lambda2: float = 8.0e-5
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError(f"lambda1 must be in [0, 1], got {self.lambda1}")
        if self.lambda2 < 0:
            raise ValueError(f"lambda2 must be >= 0, got {self.lambda2}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class LossToggles:
    """Which optional terms participate; the regression term is always on."""

    ts_s: bool = True
    cluster: bool = True


@dataclass(frozen=True)
class LossBreakdown:
    pred: float
    cluster: float
    ts: float
    sparsity: float
    total: float


def mse_loss(y, yhat) -> Tensor:
    yhat = as_tensor(yhat)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != yhat.value.shape or y.ndim != 1:
        raise ValueError(f"mse_loss: label shape {y.shape} vs prediction shape {yhat.value.shape}")
    if y.size < 1:
        raise ValueError("mse_loss: empty batch")
    diff = yhat.value - y
    b = y.size
    return node(np.array(np.mean(diff**2)), (yhat,), lambda g: (g * 2.0 * diff / b,))


def temporal_smoothness(yhat) -> Tensor:
    yhat = as_tensor(yhat)
    v = yhat.value
    if v.ndim != 1 or v.size < 2:
        raise ValueError("temporal_smoothness needs at least 2 predictions")
    step = np.diff(v)

    def fn(g):
        grad = np.zeros_like(v)
        grad[1:] += 2.0 * step
        grad[:-1] -= 2.0 * step
        return (g * grad,)

    return node(np.array(np.sum(step**2)), (yhat,), fn)


def sparsity(yhat) -> Tensor:
    yhat = as_tensor(yhat)
    shape = yhat.value.shape
    return node(np.array(yhat.value.sum()), (yhat,), lambda g: (np.full(shape, float(g)),))


def clustering_loss(d, label: int, alpha: float = 1.0) -> Tensor:
    """``min(alpha, d)`` for normal videos, ``1/d`` for abnormal ones.

    The abnormal branch clamps the denominator at :data:`DIST_EPS`; below the
    floor the loss is constant and its gradient zero.
    """
    d = as_tensor(d)
    dv = float(d.value)
    if dv < 0:
        raise ValueError(f"clustering distance must be >= 0, got {dv}")
    if label == 0:
        if dv < alpha:
            return node(np.array(dv), (d,), lambda g: (g,))
        return node(np.array(float(alpha)), (d,), lambda g: (None,))
    if label != 1:
        raise ValueError(f"label must be 0 or 1, got {label}")
    if dv < DIST_EPS:
        return node(np.array(1.0 / DIST_EPS), (d,), lambda g: (None,))
    return node(np.array(1.0 / dv), (d,), lambda g: (-g / dv**2,))


def weighted_total(pred, cluster=None, ts=None, sparse=None, cfg=LossConfig(),
                   toggles=LossToggles()) -> Tensor:
    """Overall objective ``l1*pred + (1-l1)*cluster + l2*(sparse + ts)``.

    Terms that are ``None`` or toggled off contribute nothing.
    """
    terms = [(cfg.lambda1, pred)]
    if toggles.cluster and cluster is not None:
        terms.append((1.0 - cfg.lambda1, cluster))
    if toggles.ts_s:
        if sparse is not None:
            terms.append((cfg.lambda2, sparse))
        if ts is not None:
            terms.append((cfg.lambda2, ts))
    return weighted_sum(terms)


def total_loss(pred, cluster=None, ts=None, sparse=None, cfg=LossConfig(),
               toggles=LossToggles()) -> LossBreakdown:
    """Combine component values into a :class:`LossBreakdown`.

    Disabled or absent components are reported as 0 so that the breakdown
    always satisfies the weighted-sum identity.
    """
    def plain(t):
        return None if t is None else Tensor(as_tensor(t).value)

    def val(t, on=True):
        return float(as_tensor(t).value) if (t is not None and on) else 0.0

    tot = weighted_total(plain(pred), plain(cluster), plain(ts), plain(sparse), cfg, toggles)

    return LossBreakdown(
        pred=val(pred),
        cluster=val(cluster, toggles.cluster),
        ts=val(ts, toggles.ts_s),
        sparsity=val(sparse, toggles.ts_s),
        total=float(tot.value),
    )
