"""Feature ingestion, mean normalization, batching and random batch ordering.

File formats
------------
Feature file (one per video, little-endian)::

    b"CLWSFEAT" | u32 version=1 | u32 m | u32 d | m*d float32 values (row-major)

Manifest CSV: ``video_id,label,num_frames,feature_path`` (paths relative to
the manifest's directory unless absolute).

Annotation CSV: ``video_id,start_frame,end_frame`` with inclusive, 0-indexed
frame intervals.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"CLWSFEAT"
FEATURE_VERSION = 1
FRAMES_PER_SEGMENT = 16

_HEADER = struct.Struct("<8sIII")
MANIFEST_HEADER = ["video_id", "label", "num_frames", "feature_path"]
ANNOTATION_HEADER = ["video_id", "start_frame", "end_frame"]


class DataFormatError(ValueError):
    """A data file is malformed or inconsistent with the configuration."""


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    label: int
    num_frames: int
    feature_path: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    split: str = "train"
    root: Path = field(default_factory=Path)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.feature_path)
        return p if p.is_absolute() else self.root / p


@dataclass
class VideoFeatures:
    video_id: str
    label: int
    segments: np.ndarray  # (m, d) float64
    num_frames: int

    @property
    def m(self) -> int:
        return self.segments.shape[0]

    @property
    def d(self) -> int:
        return self.segments.shape[1]


@dataclass
class Batch:
    video_id: str
    label: int
    features: np.ndarray  # (b_actual, d)
    segment_offset: int

    def __len__(self):
        return self.features.shape[0]


@dataclass
class PreprocStats:
    mean: np.ndarray
    computed_over: int
    std: np.ndarray | None = None

    def save(self, path):
        doc = {"mean": [float(x) for x in self.mean], "computed_over": self.computed_over}
        if self.std is not None:
            doc["std"] = [float(x) for x in self.std]
        _atomic_write_text(path, json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> PreprocStats:
        with open(path) as fh:
            doc = json.load(fh)
        std = doc.get("std")
        return cls(
            mean=np.asarray(doc["mean"], dtype=np.float64),
            computed_over=int(doc["computed_over"]),
            std=None if std is None else np.asarray(std, dtype=np.float64),
        )


FrameAnnotations = dict  # video_id -> list[(start, end)]


def _atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _atomic_write_text(path, text: str):
    _atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_feature_file(path, segments):
    seg = np.ascontiguousarray(segments, dtype="<f4")
    if seg.ndim != 2:
        raise DataFormatError(f"segments must be 2-D, got shape {seg.shape}")
    m, d = seg.shape
    _atomic_write_bytes(path, _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, m, d) + seg.tobytes())


def read_feature_file(path, expected_d: int | None = None) -> np.ndarray:
    """Read a feature file into an ``(m, d)`` float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, m, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if expected_d is not None and d != expected_d:
        raise DataFormatError(f"{path}: feature dimension {d} does not match configured d={expected_d}")
    need = m * d * 4
    payload = raw[_HEADER.size:]
    if len(payload) < need:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise DataFormatError(f"{path}: {len(payload) - need} trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(m, d).astype(np.float64)


# ---------------------------------------------------------------------------
# manifests and annotations
# ---------------------------------------------------------------------------

def load_manifest(path, split: str = "train", segment_len: int = FRAMES_PER_SEGMENT) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataFormatError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            vid, label, frames, fpath = row
            if vid in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate video_id {vid!r}")
            if label not in ("0", "1"):
                raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            try:
                nf = int(frames)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: num_frames is not an integer: {frames!r}") from None
            if nf < segment_len:
                raise DataFormatError(f"{path}:{lineno}: num_frames {nf} < segment length {segment_len}")
            seen.add(vid)
            entries.append(ManifestEntry(vid, int(label), nf, fpath))
    return Manifest(entries, split=split, root=path.parent)


def write_manifest(path, manifest: Manifest):
    lines = [",".join(MANIFEST_HEADER)]
    for e in manifest.entries:
        lines.append(f"{e.video_id},{e.label},{e.num_frames},{e.feature_path}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_annotations(path) -> FrameAnnotations:
    ann: FrameAnnotations = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ANNOTATION_HEADER:
            raise DataFormatError(f"{path}:1: expected header {','.join(ANNOTATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vid, s, e = row[0], int(row[1]), int(row[2])
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}:{lineno}: malformed row {row!r}") from None
            if s < 0 or e < s:
                raise DataFormatError(f"{path}:{lineno}: bad interval ({s}, {e})")
            ann.setdefault(vid, []).append((s, e))
    return ann


def write_annotations(path, ann: FrameAnnotations, video_ids=None):
    """Write annotation rows; ``video_ids`` fixes the row order (and lets
    normal videos appear with no rows)."""
    order = list(video_ids) if video_ids is not None else list(ann)
    lines = [",".join(ANNOTATION_HEADER)]
    for vid in order:
        for s, e in ann.get(vid, []):
            lines.append(f"{vid},{s},{e}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# loading and preprocessing
# ---------------------------------------------------------------------------

def load_video_features(entry: ManifestEntry, manifest: Manifest | None = None,
                        expected_d: int | None = None) -> VideoFeatures:
    path = manifest.resolve(entry) if manifest is not None else Path(entry.feature_path)
    if not path.is_file():
        raise DataFormatError(f"feature file not found for {entry.video_id!r}: {path}")
    seg = read_feature_file(path, expected_d)
    if seg.shape[0] < 1:
        raise DataFormatError(f"{path}: video {entry.video_id!r} has no segments")
    return VideoFeatures(entry.video_id, entry.label, seg, entry.num_frames)


def load_split(manifest: Manifest, expected_d: int | None = None) -> list[VideoFeatures]:
    return [load_video_features(e, manifest, expected_d) for e in manifest.entries]


def fit_stats(train: list[VideoFeatures], with_std: bool = False) -> PreprocStats:
    if not train or sum(v.m for v in train) == 0:
        raise ValueError("fit_stats: empty training set")
    stacked = np.concatenate([v.segments for v in train], axis=0)
    mean = stacked.mean(axis=0)
    std = None
    if with_std:
        std = stacked.std(axis=0)
        std[std == 0] = 1.0
    return PreprocStats(mean=mean, computed_over=stacked.shape[0], std=std)


def normalize(v: VideoFeatures, stats: PreprocStats) -> VideoFeatures:
    """Subtract the training mean (and divide by std if the stats carry one).

    Not idempotent: applying it twice subtracts the mean twice.
    """
    if v.d != stats.mean.shape[0]:
        raise DataFormatError(
            f"normalize: video {v.video_id!r} has d={v.d}, stats have d={stats.mean.shape[0]}")
    seg = v.segments - stats.mean
    if stats.std is not None:
        seg = seg / stats.std
    return VideoFeatures(v.video_id, v.label, seg, v.num_frames)


def segment_batches(v: VideoFeatures, b: int, min_size: int = 2) -> list[Batch]:
    """Cut a video into consecutive, non-overlapping windows of ``b`` segments.

    A trailing remainder is kept when it has at least ``min_size`` rows.
    """
    if b < 2:
        raise ValueError(f"batch size must be >= 2, got {b}")
    out = []
    for start in range(0, v.m, b):
        rows = v.segments[start:start + b]
        if rows.shape[0] < min_size:
            break
        out.append(Batch(v.video_id, v.label, rows, start))
    return out


def make_epoch_order(K: int, epoch: int, seed: int) -> np.ndarray:
    """Uniform random permutation of ``range(K)``, fixed by ``(seed, epoch)``."""
    if K < 1:
        raise ValueError("make_epoch_order: K must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5B5]))
    return rng.permutation(K)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_normal: int = 40
    n_abnormal: int = 40
    segments_per_video: int | tuple[int, int] = (64, 192)
    d: int = 16
    anomaly_fraction: float = 0.3
    shift_magnitude: float = 3.0
    seed: int = 7

    def validate(self):
        if self.n_normal < 0 or self.n_abnormal < 0 or self.n_normal + self.n_abnormal == 0:
            raise ValueError("synth: video counts must be non-negative and not both zero")
        lo, hi = self.segment_range
        if lo < 1 or hi < lo:
            raise ValueError(f"synth: bad segments_per_video {self.segments_per_video}")
        if self.d < 1:
            raise ValueError("synth: d must be positive")
        if not 0.0 < self.anomaly_fraction < 1.0:
            raise ValueError(f"synth: anomaly_fraction must be in (0, 1), got {self.anomaly_fraction}")
        if self.shift_magnitude < 0:
            raise ValueError("synth: shift_magnitude must be >= 0")

    @property
    def segment_range(self) -> tuple[int, int]:
        s = self.segments_per_video
        return (s, s) if isinstance(s, int) else (int(s[0]), int(s[1]))


SHIFTED_DIMS = 4


def synth_generate(cfg: SynthConfig, out_dir, split: str = "train"):
    """Write a synthetic weakly labelled split to ``out_dir``.

    Normal segments are standard Gaussian.  In each abnormal video one
    contiguous run of ``round(anomaly_fraction * m)`` segments (at least one)
    has ``shift_magnitude`` added to its first four dimensions.  Returns the
    manifest and frame annotations (16 frames per segment); files written are
    ``<split>_manifest.csv``, ``<split>/<video_id>.feat`` and, except for the
    train split, ``<split>_annotations.csv``.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _split_key(split)]))
    lo, hi = cfg.segment_range
    entries, ann = [], {}
    labels = [0] * cfg.n_normal + [1] * cfg.n_abnormal
    for idx, label in enumerate(labels):
        vid = f"{split}_{'abn' if label else 'nrm'}_{idx:04d}"
        m = int(rng.integers(lo, hi + 1))
        seg = rng.standard_normal((m, cfg.d))
        if label:
            run = min(m, max(1, int(round(cfg.anomaly_fraction * m))))
            start = int(rng.integers(0, m - run + 1))
            seg[start:start + run, :SHIFTED_DIMS] += cfg.shift_magnitude
            ann[vid] = [(start * FRAMES_PER_SEGMENT, (start + run) * FRAMES_PER_SEGMENT - 1)]
        rel = f"{split}/{vid}.feat"
        write_feature_file(out_dir / rel, seg)
        entries.append(ManifestEntry(vid, label, m * FRAMES_PER_SEGMENT, rel))
    manifest = Manifest(entries, split=split, root=out_dir)
    write_manifest(out_dir / f"{split}_manifest.csv", manifest)
    if split != "train":
        write_annotations(out_dir / f"{split}_annotations.csv", ann, [e.video_id for e in entries])
    return manifest, ann


def _split_key(split: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(split))
