"""Frame-level scoring and ROC/AUC against frame annotations."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FRAMES_PER_SEGMENT, FrameAnnotations, VideoFeatures
from .model import ClawsParams, ModelConfig, score_segments


class MetricError(ValueError):
    """The metric is undefined for the given labels."""


@dataclass
class FrameScoreSeries:
    video_id: str
    scores: np.ndarray


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    eer: float


def expand_to_frames(segment_scores, num_frames: int, p: int = FRAMES_PER_SEGMENT,
                     video_id: str = "") -> FrameScoreSeries:
    """Repeat each segment score over its ``p`` frames.

    Frames past the last full segment take the last segment's score.
    """
    s = np.asarray(segment_scores, dtype=np.float64)
    m = s.size
    if m == 0:
        raise ValueError(f"{video_id or 'video'}: no segment scores")
    if not m * p <= num_frames < (m + 2) * p:
        raise ValueError(f"{video_id or 'video'}: {num_frames} frames inconsistent with {m} segments of {p}")
    idx = np.minimum(np.arange(num_frames) // p, m - 1)
    return FrameScoreSeries(video_id, s[idx])


def frame_labels(intervals, num_frames: int) -> np.ndarray:
    out = np.zeros(num_frames, dtype=np.int64)
    for start, end in intervals:
        if not 0 <= start <= end < num_frames:
            raise ValueError(f"interval ({start}, {end}) outside [0, {num_frames})")
        out[start:end + 1] = 1
    return out


def roc_auc(scores, labels) -> RocResult:
    """ROC over all distinct thresholds and its trapezoidal area.

    Tied scores form a single threshold, so the area equals the
    Mann-Whitney probability P(s+ > s-) + P(s+ == s-)/2.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC/AUC undefined: labels contain a single class")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(fpr, tpr, auc, _eer(fpr, tpr))


def _eer(fpr, tpr) -> float:
    # first ROC segment on which fpr crosses the miss rate 1 - tpr
    gap = fpr - (1.0 - tpr)
    k = int(np.argmax(gap >= 0))
    if k == 0:
        return float(fpr[0])
    g0, g1 = gap[k - 1], gap[k]
    t = g0 / (g0 - g1) if g1 != g0 else 0.0
    return float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))


def mann_whitney_auc(scores, labels) -> float:
    """Brute-force pairwise comparison; O(n_pos * n_neg)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("single-class labels")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class EvalResult:
    roc: RocResult
    series: dict[str, FrameScoreSeries]
    labels: dict[str, np.ndarray]
    per_video_auc: float | None = None


def evaluate(test_set: list[VideoFeatures], annotations: FrameAnnotations, params: ClawsParams,
             cfg: ModelConfig = ModelConfig(), b: int = 64, p: int = FRAMES_PER_SEGMENT,
             out_dir=None, per_video: bool = False) -> EvalResult:
    """Score every test video, pool all frames and compute one ROC.

    Abnormal videos must have annotation intervals; normal videos missing
    from ``annotations`` are treated as entirely normal.  With ``per_video``
    the mean AUC over videos containing both classes is also reported.
    """
    if test_set and params.dims[0] != test_set[0].d:
        raise ValueError(f"model d={params.dims[0]} but test features have d={test_set[0].d}")
    series, labels = {}, {}
    for v in test_set:
        if v.video_id not in annotations and v.label == 1:
            raise ValueError(f"no frame annotations for abnormal test video {v.video_id!r}")
        seg_scores = score_segments(v.segments, params, b, cfg)
        series[v.video_id] = expand_to_frames(seg_scores, v.num_frames, p, v.video_id)
        labels[v.video_id] = frame_labels(annotations.get(v.video_id, []), v.num_frames)
    all_s = np.concatenate([series[v.video_id].scores for v in test_set])
    all_y = np.concatenate([labels[v.video_id] for v in test_set])
    result = EvalResult(roc_auc(all_s, all_y), series, labels)
    if per_video:
        aucs = [roc_auc(series[k].scores, labels[k]).auc for k in series
                if 0 < labels[k].sum() < labels[k].size]
        result.per_video_auc = float(np.mean(aucs)) if aucs else None
    if out_dir is not None:
        write_eval_outputs(out_dir, result, [v.video_id for v in test_set])
    return result


def write_eval_outputs(out_dir, result: EvalResult, order):
    out = Path(out_dir)
    (out / "scores").mkdir(parents=True, exist_ok=True)
    for vid in order:
        with open(out / "scores" / f"{vid}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["video_id", "frame", "score", "label"])
            for f, (sc, lb) in enumerate(zip(result.series[vid].scores, result.labels[vid])):
                w.writerow([vid, f, repr(float(sc)), int(lb)])
    n_frames = sum(len(v) for v in result.labels.values())
    n_anom = int(sum(int(v.sum()) for v in result.labels.values()))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["auc", "eer", "num_frames", "num_anomalous_frames"]
        row = [repr(result.roc.auc), repr(result.roc.eer), n_frames, n_anom]
        if result.per_video_auc is not None:
            header.append("per_video_auc")
            row.append(repr(result.per_video_auc))
        w.writerow(header)
        w.writerow(row)
