"""Two-way k-means over per-video representations and the center distance.

At the start of every epoch each training video's module-1 representation
is split into two clusters.  The assignments are frozen for the epoch; during
training the distance between the two centers is recomputed from the
current batch rows so the clustering loss has a gradient path.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, node
from .model import ClawsParams, ModelConfig, intermediate_representation


@dataclass
class KMeansResult:
    assignments: np.ndarray  # (m,) ints in {0, 1}
    centers: np.ndarray  # (2, z)
    degenerate: bool
    n_iter: int


@dataclass
class ClusterState:
    video_id: str
    assignments: np.ndarray
    centers: np.ndarray
    d: float
    epoch: int
    degenerate: bool


def _plus_plus_init(X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    first = int(rng.integers(X.shape[0]))
    d2 = np.sum((X - X[first]) ** 2, axis=1)
    tot = d2.sum()
    if tot > 0:
        second = int(rng.choice(X.shape[0], p=d2 / tot))
    else:
        second = int(rng.integers(X.shape[0]))
    return np.stack([X[first], X[second]])


def _sq_dists(X, centers):
    return np.stack([np.sum((X - c) ** 2, axis=1) for c in centers], axis=1)


def _centers_of(X, assign):
    return np.stack([X[assign == k].mean(axis=0) for k in (0, 1)])


def _repair_empty(X, assign, centers):
    # move the point farthest from its own center into the empty cluster
    for k in (0, 1):
        if not np.any(assign == k):
            own = np.sum((X - centers[assign]) ** 2, axis=1)
            assign[int(np.argmax(own))] = k
    return assign


def kmeans2(points, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd iteration with k=2 and k-means++ seeding.

    Stops when assignments stop changing or after ``max_iters`` rounds.  An
    emptied cluster takes over the point farthest from its current center.
    Fewer than two points give a degenerate single-cluster result.
    """
    X = np.asarray(points, dtype=np.float64)
    m = X.shape[0]
    if m < 2:
        c = X.mean(axis=0) if m else np.zeros(X.shape[1])
        return KMeansResult(np.zeros(m, dtype=np.int64), np.stack([c, c]), True, 0)

    rng = np.random.default_rng(seed)
    centers = _plus_plus_init(X, rng)
    assign = np.argmin(_sq_dists(X, centers), axis=1)
    assign = _repair_empty(X, assign, centers)
    idx = np.arange(m)
    it = 0
    for it in range(1, max_iters + 1):
        centers = _centers_of(X, assign)
        dist = _sq_dists(X, centers)
        best = np.argmin(dist, axis=1)
        # only strictly closer centers move a point; ties stay put
        new = np.where(dist[idx, best] < dist[idx, assign], best, assign)
        new = _repair_empty(X, new, centers)
        if np.array_equal(new, assign):
            break
        assign = new
    centers = _centers_of(X, assign)
    degenerate = bool(np.all(X == X[0]))
    return KMeansResult(assign.astype(np.int64), centers, degenerate, it)


def within_cluster_ss(X, assign) -> float:
    X = np.asarray(X, dtype=np.float64)
    total = 0.0
    for k in (0, 1):
        pts = X[assign == k]
        if len(pts):
            total += float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return total


def video_distance(c1, c2, m: int) -> float:
    """Euclidean distance between the two centers divided by segment count."""
    if m < 1:
        raise ValueError("video_distance: m must be >= 1")
    return float(np.linalg.norm(np.asarray(c1, dtype=np.float64) - np.asarray(c2, dtype=np.float64))) / m


def video_seed(seed: int, epoch: int, video_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, zlib.crc32(video_id.encode())])


def cluster_video(rep: np.ndarray, video_id: str, epoch: int, seed: int,
                  max_iters: int = 100) -> ClusterState:
    m = rep.shape[0]
    res = kmeans2(rep, seed=video_seed(seed, epoch, video_id), max_iters=max_iters)
    d = 0.0 if res.degenerate else video_distance(res.centers[0], res.centers[1], m)
    return ClusterState(video_id, res.assignments, res.centers, d, epoch, res.degenerate)


def epoch_refresh(videos, params: ClawsParams, seed: int, epoch: int = 0, b: int = 64,
                  cfg: ModelConfig = ModelConfig(), max_iters: int = 100) -> dict[str, ClusterState]:
    """Cluster every video's current module-1 representation."""
    out = {}
    for v in videos:
        rep = intermediate_representation(v.segments, params, b, cfg)
        out[v.video_id] = cluster_video(rep, v.video_id, epoch, seed, max_iters)
    return out


def batch_cluster_distance(rows, assignments, m: int) -> Tensor | None:
    """Differentiable center distance over the rows of one batch.

    ``assignments`` are the frozen cluster labels of those rows.  Returns
    ``None`` when the batch does not contain both clusters.
    """
    rows = as_tensor(rows)
    a = np.asarray(assignments)
    R = rows.value
    if a.shape != (R.shape[0],):
        raise ValueError(f"assignments length {a.shape} does not match {R.shape[0]} rows")
    in1 = a == 1
    n1 = int(in1.sum())
    n0 = a.size - n1
    if n0 == 0 or n1 == 0:
        return None
    diff = R[~in1].mean(axis=0) - R[in1].mean(axis=0)
    norm = float(np.linalg.norm(diff))

    def fn(g):
        grad = np.zeros_like(R)
        if norm > 0:
            u = diff / (norm * m)
            grad[~in1] = u / n0
            grad[in1] = -u / n1
        return (g * grad,)

    return node(np.array(norm / m), (rows,), fn)


def write_cluster_dump(path, states: dict[str, ClusterState], append: bool = False):
    """Diagnostic CSV ``video_id,epoch,d_i,degenerate``."""
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writerow(["video_id", "epoch", "d_i", "degenerate"])
        for s in states.values():
            w.writerow([s.video_id, s.epoch, repr(s.d), int(s.degenerate)])
