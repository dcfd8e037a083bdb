"""Scorer network: two gated FC modules and a sigmoid head.

Each FC module is paired with a normalcy suppression module (NSM): a second
FC layer on the same input whose output is softmax-normalized down the batch
(temporal) axis.  The resulting probability matrix multiplies the module's
linear output element-wise before the ReLU and dropout.  Because every
probability is positive, gating before or after the ReLU gives the same
result; ``gate_after_relu`` is kept only as an explicit switch.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, GradTape, Tensor

CHECKPOINT_MAGIC = b"CLWSCKPT"
CHECKPOINT_VERSION = 1

PARAM_ORDER = ("W1", "b1", "Wn1", "bn1", "W2", "b2", "Wn2", "bn2", "W3", "b3")


@dataclass
class ClawsParams:
    W1: np.ndarray
    b1: np.ndarray
    Wn1: np.ndarray
    bn1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wn2: np.ndarray
    bn2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray  # shape (1,)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_ORDER]

    def copy(self) -> ClawsParams:
        return ClawsParams(**{k: v.copy() for k, v in self.items()})

    @classmethod
    def zeros(cls, d: int, z1: int, z2: int) -> ClawsParams:
        shapes = param_shapes(d, z1, z2)
        return cls(**{k: np.zeros(s) for k, s in shapes.items()})

    def validate(self):
        d, z1, z2 = self.dims
        for name, shape in param_shapes(d, z1, z2).items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")


def param_shapes(d: int, z1: int, z2: int) -> dict[str, tuple[int, ...]]:
    return {
        "W1": (d, z1), "b1": (z1,), "Wn1": (d, z1), "bn1": (z1,),
        "W2": (z1, z2), "b2": (z2,), "Wn2": (z1, z2), "bn2": (z2,),
        "W3": (z2, 1), "b3": (1,),
    }


def init_params(seed: int, d: int = 2048, z1: int = 512, z2: int = 32) -> ClawsParams:
    """Fan-balanced uniform weights, zero biases, deterministic in ``seed``."""
    if min(d, z1, z2) < 1:
        raise ValueError(f"dims must be positive, got d={d}, z1={z1}, z2={z2}")
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(d, z1, z2).items():
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-limit, limit, size=shape)
        else:
            out[name] = np.zeros(shape)
    return ClawsParams(**out)


@dataclass(frozen=True)
class ModelConfig:
    use_nsm1: bool = True
    use_nsm2: bool = True
    dropout_rate: float = 0.6
    train: bool = False
    gate_after_relu: bool = False

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class ForwardTrace:
    P1: np.ndarray
    P2: np.ndarray
    R1: Tensor
    scores: Tensor
    tape: GradTape | None = None
    leaves: dict[str, Tensor] | None = None


def _gated_module(x, W, b, Wn, bn, use_nsm, gate_after_relu):
    h = ad.affine(x, W, b)
    if use_nsm:
        P = ad.column_softmax(ad.affine(x, Wn, bn))
    else:
        P = Tensor(np.ones(h.value.shape))
    if gate_after_relu:
        r = ad.hadamard(P, ad.relu(h))
    else:
        r = ad.relu(ad.hadamard(P, h))
    return P, r


def forward(features, params: ClawsParams, cfg: ModelConfig = ModelConfig(),
            rng: np.random.Generator | None = None, tape: GradTape | None = None) -> ForwardTrace:
    """Run the network on one batch of segment features.

    With a ``tape`` every parameter is registered on it under its field name
    and the trace carries the leaves, so :func:`claws.autodiff.backward` can
    return parameter gradients.
    """
    x = np.asarray(features, dtype=np.float64)
    d = params.dims[0]
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionError(f"batch shape {x.shape} does not match feature dimension {d}")
    if tape is not None:
        leaves = {name: tape.param(arr, name) for name, arr in params.items()}
    else:
        leaves = {name: Tensor(arr) for name, arr in params.items()}
    p = leaves

    P1, r1 = _gated_module(x, p["W1"], p["b1"], p["Wn1"], p["bn1"], cfg.use_nsm1, cfg.gate_after_relu)
    a1 = ad.dropout(r1, cfg.dropout_rate, cfg.train, rng)
    P2, r2 = _gated_module(a1, p["W2"], p["b2"], p["Wn2"], p["bn2"], cfg.use_nsm2, cfg.gate_after_relu)
    a2 = ad.dropout(r2, cfg.dropout_rate, cfg.train, rng)
    scores = ad.flatten(ad.sigmoid(ad.affine(a2, p["W3"], p["b3"])))
    return ForwardTrace(P1=P1.value, P2=P2.value, R1=r1, scores=scores, tape=tape,
                        leaves=leaves if tape is not None else None)


def _first_module(x, params: ClawsParams, cfg: ModelConfig) -> np.ndarray:
    _, r1 = _gated_module(x, params.W1, params.b1, params.Wn1, params.bn1, cfg.use_nsm1,
                          cfg.gate_after_relu)
    return r1.value


def _windowed(x: np.ndarray, b: int, fn, align_tail: bool) -> np.ndarray:
    """Apply ``fn`` to consecutive windows of ``b`` rows and concatenate.

    With ``align_tail`` a short final window is replaced by the last ``b``
    rows of the video and only its uncovered rows are kept, so every window
    the suppression softmax sees has the training batch length.  Videos
    shorter than ``b`` form one window.
    """
    m = x.shape[0]
    parts = []
    for s in range(0, m, b):
        e = min(s + b, m)
        if align_tail and e - s < b and m >= b:
            parts.append(fn(x[m - b:])[b - (e - s):])
        else:
            parts.append(fn(x[s:e]))
    return np.concatenate(parts, axis=0)


def intermediate_representation(segments, params: ClawsParams, b: int = 64,
                                cfg: ModelConfig = ModelConfig(), align_tail: bool = True) -> np.ndarray:
    """Eval-mode, NSM-1-gated module-1 output for a whole video, row per segment."""
    x = np.asarray(segments, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise DimensionError(f"segments shape {x.shape} does not match feature dimension {params.dims[0]}")
    return _windowed(x, b, lambda w: _first_module(w, params, cfg), align_tail)


def score_segments(segments, params: ClawsParams, b: int = 64,
                   cfg: ModelConfig = ModelConfig(), align_tail: bool = True) -> np.ndarray:
    """Eval-mode anomaly score for every segment (windowing as above)."""
    x = np.asarray(segments, dtype=np.float64)
    eval_cfg = ModelConfig(cfg.use_nsm1, cfg.use_nsm2, cfg.dropout_rate, False, cfg.gate_after_relu)
    return _windowed(x, b, lambda w: forward(w, params, eval_cfg).scores.value, align_tail)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _pack_params(p: ClawsParams) -> bytes:
    return b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in p.items())


def _unpack_params(buf: memoryview, offset: int, d: int, z1: int, z2: int):
    out = {}
    for name, shape in param_shapes(d, z1, z2).items():
        n = int(np.prod(shape))
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    return ClawsParams(**out), offset


def checkpoint_bytes(params: ClawsParams, opt_v: ClawsParams | None, iteration: int) -> bytes:
    d, z1, z2 = params.dims
    if opt_v is None:
        opt_v = ClawsParams.zeros(d, z1, z2)
    if opt_v.dims != params.dims:
        raise CheckpointError("optimizer state dims do not match params")
    head = CHECKPOINT_MAGIC + struct.pack("<IIII", CHECKPOINT_VERSION, d, z1, z2)
    return head + _pack_params(params) + _pack_params(opt_v) + struct.pack("<Q", iteration)


def save_checkpoint(path, params: ClawsParams, opt_v: ClawsParams | None = None, iteration: int = 0):
    """Write a checkpoint atomically (temp file, then rename)."""
    path = Path(path)
    data = checkpoint_bytes(params, opt_v, iteration)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ClawsParams, ClawsParams, int]:
    """Return ``(params, optimizer_v, iteration)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 24 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, d, z1, z2 = struct.unpack_from("<IIII", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    n = sum(int(np.prod(s)) for s in param_shapes(d, z1, z2).values())
    expected = 24 + 2 * 8 * n + 8
    if len(raw) != expected:
        raise CheckpointError(f"{path}: size {len(raw)} bytes, expected {expected}")
    buf = memoryview(raw)
    params, off = _unpack_params(buf, 24, d, z1, z2)
    opt_v, off = _unpack_params(buf, off, d, z1, z2)
    (iteration,) = struct.unpack_from("<Q", raw, off)
    return params, opt_v, iteration
