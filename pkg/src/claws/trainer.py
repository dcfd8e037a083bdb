"""RMSProp training loop over randomly ordered batches."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .clustering import ClusterState, batch_cluster_distance, epoch_refresh, write_cluster_dump
from .dataset import Batch, VideoFeatures, make_epoch_order, segment_batches
from .losses import (LossBreakdown, LossConfig, LossToggles, clustering_loss, mse_loss, sparsity,
                     temporal_smoothness, total_loss, weighted_total)
from .model import ClawsParams, ModelConfig, forward, init_params, save_checkpoint

log = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "lr", "pred", "cluster", "ts", "sparsity", "total"]
LOG_EVERY = 100


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Toggles:
    rbs: bool = True
    nsm1: bool = True
    nsm2: bool = True
    loss_ts_s: bool = True
    loss_c: bool = True

    @classmethod
    def bbn_only(cls) -> Toggles:
        return cls(rbs=False, nsm1=False, nsm2=False, loss_ts_s=False, loss_c=False)


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 100_000
    lr: float = 1e-4
    lr_drop_at: int = 80_000
    lr_drop_factor: float = 0.1
    batch_size: int = 64
    seed: int = 0
    rho: float = 0.99
    eps: float = 1e-8
    dropout_rate: float = 0.6
    toggles: Toggles = field(default_factory=Toggles)
    loss: LossConfig = field(default_factory=LossConfig)
    dims: tuple[int, int, int] = (2048, 512, 32)
    cluster_mode: str = "assignment"  # or "scalar"
    kmeans_iters: int = 100
    clip_norm: float | None = None
    checkpoint_every: int = 0
    gate_after_relu: bool = False

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must be in (0, 1]")
        if self.lr_drop_at > self.total_iters:
            raise ValueError(f"lr_drop_at ({self.lr_drop_at}) exceeds total_iters ({self.total_iters})")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.cluster_mode not in ("assignment", "scalar"):
            raise ValueError(f"unknown cluster_mode {self.cluster_mode!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")

    def model_config(self, train: bool) -> ModelConfig:
        return ModelConfig(self.toggles.nsm1, self.toggles.nsm2, self.dropout_rate, train,
                           self.gate_after_relu)


@dataclass
class OptState:
    v: ClawsParams
    iteration: int = 0


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < cfg.lr_drop_at:
        return cfg.lr
    return cfg.lr * cfg.lr_drop_factor


def rmsprop_step(params: ClawsParams, grads: dict[str, np.ndarray], state: OptState, lr: float,
                 rho: float = 0.99, eps: float = 1e-8) -> tuple[ClawsParams, OptState]:
    """Non-centered RMSProp without momentum.

    ``v <- rho*v + (1-rho)*g**2``; ``theta <- theta - lr*g/(sqrt(v)+eps)``.
    Returns new objects; the inputs are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite gradient at iteration {state.iteration} in {name} "
                f"(norm={np.linalg.norm(np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0)):.3g})")
    new_p, new_v = {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ad.DimensionError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        v = rho * getattr(state.v, name) + (1.0 - rho) * g * g
        new_v[name] = v
        new_p[name] = theta - lr * g / (np.sqrt(v) + eps)
    return ClawsParams(**new_p), OptState(ClawsParams(**new_v), state.iteration + 1)


def _clip(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def build_batches(videos: list[VideoFeatures], b: int) -> list[Batch]:
    return [bt for v in videos for bt in segment_batches(v, b)]


def dropout_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration, 0xD80]))


def training_step(batch: Batch, params: ClawsParams, cfg: TrainConfig,
                  cluster: ClusterState | None, m: int, rng=None):
    """Forward, losses and backward for one batch.

    Returns ``(grads, breakdown)``.  ``cluster`` is the video's frozen epoch
    state (``None`` when the clustering loss is off).
    """
    tape = ad.GradTape()
    trace = forward(batch.features, params, cfg.model_config(train=True), rng, tape)
    yhat = trace.scores
    y = np.full(len(batch), float(batch.label))
    t = cfg.toggles
    pred = mse_loss(y, yhat)
    ts = sparse = None
    if t.loss_ts_s:
        ts = temporal_smoothness(yhat)
        sparse = sparsity(yhat)
    lc = None
    if t.loss_c and cluster is not None and not cluster.degenerate:
        if cfg.cluster_mode == "assignment":
            rows = cluster.assignments[batch.segment_offset:batch.segment_offset + len(batch)]
            dist = batch_cluster_distance(trace.R1, rows, m)
            if dist is not None:
                lc = clustering_loss(dist, batch.label, cfg.loss.alpha)
        else:
            lc = clustering_loss(ad.Tensor(cluster.d), batch.label, cfg.loss.alpha)
    toggles = LossToggles(ts_s=t.loss_ts_s, cluster=t.loss_c)
    total = weighted_total(pred, lc, ts, sparse, cfg.loss, toggles)
    grads = ad.backward(tape, total)
    breakdown = total_loss(pred, lc, ts, sparse, cfg.loss, toggles)
    return grads, breakdown


@dataclass
class TrainResult:
    params: ClawsParams
    state: OptState
    metrics: list[dict] = field(default_factory=list)
    clusters: dict[str, ClusterState] = field(default_factory=dict)


def train(videos: list[VideoFeatures], cfg: TrainConfig, out_dir=None,
          params: ClawsParams | None = None, state: OptState | None = None) -> TrainResult:
    """Train from scratch (or resume from ``params``/``state``).

    One epoch is a full pass over all batches.  Metrics rows are the mean
    loss breakdown over each window of 100 iterations.  With ``out_dir`` the
    metrics CSV, the cluster dump and checkpoints (``ckpt_<iter>.bin`` every
    ``checkpoint_every`` iterations, ``final.ckpt`` at the end) are written.
    """
    if not videos:
        raise TrainingError("empty training set")
    labels = {v.label for v in videos}
    if len(labels) < 2:
        log.warning("training set has a single class (%s)", labels)
    d, z1, z2 = cfg.dims
    if params is None:
        params = init_params(cfg.seed, d, z1, z2)
    if params.dims[0] != videos[0].d:
        raise ad.DimensionError(f"model d={params.dims[0]} but features have d={videos[0].d}")
    if state is None:
        state = OptState(ClawsParams.zeros(*params.dims), 0)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    batches = build_batches(videos, cfg.batch_size)
    if not batches:
        raise TrainingError("no batches: every video is shorter than 2 segments")
    m_of = {v.video_id: v.m for v in videos}
    K = len(batches)
    result = TrainResult(params, state)
    window: list[LossBreakdown] = []
    metrics_fh = None
    if out is not None:
        metrics_fh = open(out / "metrics.csv", "w", newline="")
        metrics_writer = csv.writer(metrics_fh, lineterminator="\n")
        metrics_writer.writerow(METRICS_HEADER)

    try:
        it = state.iteration
        epoch = it // K
        clusters: dict[str, ClusterState] = {}
        while it < cfg.total_iters:
            if cfg.toggles.loss_c:
                clusters = epoch_refresh(videos, params, cfg.seed, epoch, cfg.batch_size,
                                         cfg.model_config(train=False), cfg.kmeans_iters)
                if out is not None:
                    write_cluster_dump(out / "clusters.csv", clusters, append=epoch > 0)
            order = make_epoch_order(K, epoch, cfg.seed) if cfg.toggles.rbs else np.arange(K)
            for k in order[it - epoch * K:]:
                if it >= cfg.total_iters:
                    break
                batch = batches[int(k)]
                grads, bd = training_step(batch, params, cfg, clusters.get(batch.video_id),
                                          m_of[batch.video_id], dropout_rng(cfg.seed, it))
                if not np.isfinite(bd.total):
                    _abort(out, params, state)
                    raise TrainingError(f"non-finite loss at iteration {it} on {batch.video_id}")
                if cfg.clip_norm is not None:
                    grads = _clip(grads, cfg.clip_norm)
                try:
                    params, state = rmsprop_step(params, grads, state, lr_at(it, cfg), cfg.rho, cfg.eps)
                except TrainingError:
                    _abort(out, params, state)
                    raise
                it += 1
                window.append(bd)
                if it % LOG_EVERY == 0:
                    row = _metrics_row(it, lr_at(it - 1, cfg), window)
                    window = []
                    result.metrics.append(row)
                    if metrics_fh is not None:
                        metrics_writer.writerow([row[k] for k in METRICS_HEADER])
                if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"ckpt_{it:07d}.bin", params, state.v, it)
            epoch += 1
        result.clusters = clusters
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    result.params, result.state = params, state
    if out is not None:
        save_checkpoint(out / "final.ckpt", params, state.v, state.iteration)
    return result


def _metrics_row(it, lr, window):
    n = len(window)
    return {
        "iteration": it,
        "lr": lr,
        "pred": sum(b.pred for b in window) / n,
        "cluster": sum(b.cluster for b in window) / n,
        "ts": sum(b.ts for b in window) / n,
        "sparsity": sum(b.sparsity for b in window) / n,
        "total": sum(b.total for b in window) / n,
    }


def _abort(out, params, state):
    if out is not None:
        save_checkpoint(out / "aborted.ckpt", params, state.v, state.iteration)
