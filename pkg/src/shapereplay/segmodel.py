"""Segmentation model: shared frozen encoder, per-pixel linear decoders.

The encoder is a fixed filter bank (color, multi-scale smoothing, gradient
energy, local contrast, position) plus per-feature normalization statistics
fitted once on the first training set and then frozen. Decoders are linear
per-pixel classifiers over the 18 encoder features; incremental steps extend
a decoder with zero-initialized rows for new classes, which leaves its
predictions on old classes untouched until training moves the new weights.

Training uses plain SGD on softmax cross-entropy with a polynomial learning
rate schedule. All weight math is float64; features stay float32.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage

from .shapeworld import rgb_to_hsv

FEATURE_DIM = 20

# largest filter support: sigma-2.5 gaussian truncated at 3 sigma (radius 8)
# followed by a central-difference gradient (radius 1)
RECEPTIVE_RADIUS = 9


class FrozenEncoderError(RuntimeError):
    """Raised when something tries to refit a frozen encoder."""


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""

    def __init__(self, step: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (lr {lr:.3g})")
        self.step = step
        self.lr = lr
        self.loss = loss


def _raw_features(images: np.ndarray) -> np.ndarray:
    """Filter-bank features for (H, W, 3) or a batch (n, H, W, 3).

    Batched input runs each scipy filter once over the whole stack, which
    is much cheaper than per-image calls.
    """
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError("expected (H, W, 3) or (n, H, W, 3)")
    n, h, w = images.shape[:3]
    luma = np.array([0.299, 0.587, 0.114], dtype=np.float32)
    gray = images @ luma
    fine = ndimage.gaussian_filter(images, sigma=(0.0, 1.0, 1.0, 0.0), truncate=3.0)
    coarse = ndimage.gaussian_filter(images, sigma=(0.0, 2.5, 2.5, 0.0), truncate=3.0)
    gy1, gx1 = np.gradient(fine @ luma, axis=(1, 2))
    gy2, gx2 = np.gradient(coarse @ luma, axis=(1, 2))
    grad_fine = np.hypot(gy1, gx1)
    grad_coarse = np.hypot(gy2, gx2)
    mean5 = ndimage.uniform_filter(gray, size=(1, 5, 5))
    mean5_sq = ndimage.uniform_filter(gray * gray, size=(1, 5, 5))
    local_std = np.sqrt(np.clip(mean5_sq - mean5 * mean5, 0.0, None))
    ypos = np.broadcast_to(np.linspace(0.0, 1.0, h, dtype=np.float32)[None, :, None], (n, h, w))
    xpos = np.broadcast_to(np.linspace(0.0, 1.0, w, dtype=np.float32)[None, None, :], (n, h, w))
    hsv = rgb_to_hsv(images)
    hue_angle = 2.0 * np.pi * hsv[..., 0]
    # two hue harmonics: the second separates hue pairs an eighth of the
    # wheel apart, which a single harmonic leaves nearly collinear
    feats = np.stack(
        [
            images[..., 0],
            images[..., 1],
            images[..., 2],
            fine[..., 0],
            fine[..., 1],
            fine[..., 2],
            coarse[..., 0],
            coarse[..., 1],
            coarse[..., 2],
            grad_fine,
            grad_coarse,
            local_std,
            ypos,
            xpos,
            np.cos(hue_angle),
            np.sin(hue_angle),
            np.cos(2.0 * hue_angle),
            np.sin(2.0 * hue_angle),
            hsv[..., 1],
            hsv[..., 2],
        ],
        axis=-1,
    ).astype(np.float32)
    return feats[0] if single else feats


class Encoder:
    """Fixed filter bank with fitted normalization, immutable once frozen."""

    def __init__(self):
        self._mean = np.zeros(FEATURE_DIM, dtype=np.float64)
        self._std = np.ones(FEATURE_DIM, dtype=np.float64)
        self._fitted = False
        self._frozen = False

    @property
    def fitted(self) -> bool:
        return self._fitted

    @property
    def frozen(self) -> bool:
        return self._frozen

    def fit(self, images: np.ndarray, max_images: int = 64) -> "Encoder":
        """Fit per-feature mean/std on a deterministic prefix of `images`."""
        if self._frozen:
            raise FrozenEncoderError("encoder is frozen, refusing to refit")
        if len(images) == 0:
            raise ValueError("need at least one image to fit the encoder")
        take = min(len(images), max_images)
        stacked = _raw_features(np.asarray(images)[:take]).reshape(-1, FEATURE_DIM).astype(np.float64)
        self._mean = stacked.mean(axis=0)
        self._std = np.maximum(stacked.std(axis=0), 1e-6)
        self._fitted = True
        return self

    def freeze(self) -> "Encoder":
        if not self._fitted:
            raise ValueError("cannot freeze an unfitted encoder")
        self._frozen = True
        return self

    def checksum(self) -> str:
        payload = self._mean.tobytes() + self._std.tobytes()
        return hashlib.sha256(payload).hexdigest()

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel feature map (H, W, FEATURE_DIM), float32."""
        if not self._fitted:
            raise ValueError("encoder must be fitted before encoding")
        raw = _raw_features(image)
        return ((raw - self._mean.astype(np.float32)) / self._std.astype(np.float32)).astype(np.float32)

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        """Feature maps (n, H, W, FEATURE_DIM) for an image stack; identical
        to stacking per-image encode calls, just cheaper."""
        if not self._fitted:
            raise ValueError("encoder must be fitted before encoding")
        raw = _raw_features(np.asarray(images))
        return ((raw - self._mean.astype(np.float32)) / self._std.astype(np.float32)).astype(np.float32)


@dataclass
class DecoderHead:
    """Linear per-pixel classifier over an explicit ascending class-id list."""

    class_ids: tuple[int, ...]
    weights: np.ndarray  # (FEATURE_DIM, C) float64
    bias: np.ndarray  # (C,) float64

    def __post_init__(self):
        if len(self.class_ids) == 0:
            raise ValueError("head needs at least one class")
        if list(self.class_ids) != sorted(set(self.class_ids)):
            raise ValueError("class_ids must be strictly ascending")
        if self.weights.shape != (self.weights.shape[0], len(self.class_ids)):
            raise ValueError("weights must be (feature_dim, num_classes)")
        if self.bias.shape != (len(self.class_ids),):
            raise ValueError("bias must be (num_classes,)")

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[0])

    def copy(self) -> "DecoderHead":
        return DecoderHead(self.class_ids, self.weights.copy(), self.bias.copy())

    def column_of(self, class_id: int) -> int:
        idx = int(np.searchsorted(self.class_ids, class_id))
        if idx >= len(self.class_ids) or self.class_ids[idx] != class_id:
            raise KeyError(f"class {class_id} not in head")
        return idx


def init_head(class_ids: Iterable[int], feature_dim: int = FEATURE_DIM) -> DecoderHead:
    """Zero-initialized head; with zero weights every logit ties and argmax
    falls back to the lowest class id."""
    ids = tuple(sorted(set(int(c) for c in class_ids)))
    return DecoderHead(ids, np.zeros((feature_dim, len(ids))), np.zeros(len(ids)))


def expand_head(head: DecoderHead, new_class_ids: Iterable[int]) -> DecoderHead:
    """Add zero-initialized outputs for new classes, keeping old parameters
    bit-exact. New ids must not collide with existing ones."""
    new_ids = sorted(set(int(c) for c in new_class_ids))
    if not new_ids:
        raise ValueError("no new classes to add")
    overlap = set(new_ids) & set(head.class_ids)
    if overlap:
        raise ValueError(f"classes already present: {sorted(overlap)}")
    merged = sorted(set(head.class_ids) | set(new_ids))
    weights = np.zeros((head.feature_dim, len(merged)))
    bias = np.zeros(len(merged))
    for old_col, cid in enumerate(head.class_ids):
        col = merged.index(cid)
        weights[:, col] = head.weights[:, old_col]
        bias[col] = head.bias[old_col]
    return DecoderHead(tuple(merged), weights, bias)


def predict_logits(head: DecoderHead, feats: np.ndarray) -> np.ndarray:
    """Logits over head.class_ids; feats is (..., FEATURE_DIM)."""
    feats = np.asarray(feats)
    if feats.shape[-1] != head.feature_dim:
        raise ValueError(f"feature dim {feats.shape[-1]} != head dim {head.feature_dim}")
    return feats @ head.weights + head.bias


def predict_labels(head: DecoderHead, feats: np.ndarray, restrict: Iterable[int] | None = None) -> np.ndarray:
    """Argmax class ids; ties break toward the lowest id because columns are
    stored in ascending class order. `restrict` limits the argmax to a
    subset of the head's classes."""
    logits = predict_logits(head, feats)
    ids = np.asarray(head.class_ids)
    if restrict is not None:
        keep = sorted(set(int(c) for c in restrict))
        missing = set(keep) - set(head.class_ids)
        if missing:
            raise ValueError(f"restrict classes not in head: {sorted(missing)}")
        if not keep:
            raise ValueError("restrict set must be nonempty")
        cols = [head.column_of(c) for c in keep]
        logits = logits[..., cols]
        ids = np.asarray(keep)
    return ids[np.argmax(logits, axis=-1)].astype(np.int16)


def cross_entropy(logits: np.ndarray, targets: np.ndarray, class_ids) -> float:
    """Mean softmax cross-entropy; target values must appear in class_ids."""
    loss, _ = cross_entropy_grad(logits, targets, class_ids)
    return loss


def cross_entropy_grad(logits: np.ndarray, targets: np.ndarray, class_ids) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits), averaged over all labeled positions."""
    ids = np.asarray(sorted(class_ids))
    logits = np.asarray(logits)
    flat = logits.reshape(-1, logits.shape[-1])
    tflat = np.asarray(targets).reshape(-1)
    if flat.shape[0] != tflat.shape[0]:
        raise ValueError("logits and targets disagree on the number of pixels")
    if flat.shape[1] != len(ids):
        raise ValueError("logit width does not match class list")
    cols = np.searchsorted(ids, tflat)
    bad = (cols >= len(ids)) | (ids[np.clip(cols, 0, len(ids) - 1)] != tflat)
    if np.any(bad):
        raise ValueError(f"targets contain ids outside the class list: {sorted(set(tflat[bad].tolist()))}")
    shifted = flat - flat.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    probs = expd / denom
    n = flat.shape[0]
    picked = shifted[np.arange(n), cols] - np.log(denom[:, 0])
    loss = float(-picked.mean())
    grad = probs
    grad[np.arange(n), cols] -= 1.0
    grad /= n
    return loss, grad.reshape(logits.shape)


@dataclass(frozen=True)
class TrainSchedule:
    """SGD schedule with polynomial decay from initial_lr to final_lr."""

    total_steps: int
    initial_lr: float = 5e-4
    final_lr: float = 1e-4
    power: float = 0.9

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (self.initial_lr > self.final_lr >= 0):
            raise ValueError("need initial_lr > final_lr >= 0")
        if self.power <= 0:
            raise ValueError("power must be positive")


def poly_lr(step: int, schedule: TrainSchedule) -> float:
    """lr(t) = final + (initial - final) * (1 - t/T)^power for t in [0, T]."""
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside schedule range 0..{schedule.total_steps}")
    frac = 1.0 - step / schedule.total_steps
    return schedule.final_lr + (schedule.initial_lr - schedule.final_lr) * frac**schedule.power


def train_head(
    head: DecoderHead,
    batches: Iterable[tuple[np.ndarray, np.ndarray]],
    schedule: TrainSchedule,
    start_step: int = 0,
) -> tuple[DecoderHead, list[float]]:
    """Run SGD over a batch stream; returns (new head, per-step losses).

    Each batch is (features, targets) with features (..., FEATURE_DIM) and
    integer targets of matching spatial shape. start_step offsets into the
    learning-rate schedule so a run can pause, rewrite its data, and resume
    on the same schedule. The input head is not modified.

    Arithmetic runs in the dtype the features arrive in: float32 batches
    train fast, float64 batches keep full precision for gradient analysis.
    """
    losses: list[float] = []
    step = start_step
    weights = bias = None
    for feats, targets in batches:
        if step >= schedule.total_steps:
            raise ValueError("batch stream longer than the schedule")
        flat = np.asarray(feats).reshape(-1, head.feature_dim)
        if weights is None:
            weights = head.weights.astype(flat.dtype)
            bias = head.bias.astype(flat.dtype)
        lr = poly_lr(step, schedule)
        logits = flat @ weights + bias
        loss, grad = cross_entropy_grad(logits, targets, head.class_ids)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, lr, loss)
        weights -= lr * (flat.T @ grad)
        bias -= lr * grad.sum(axis=0)
        losses.append(loss)
        step += 1
    if weights is None:
        return head.copy(), losses
    return DecoderHead(head.class_ids, weights.astype(np.float64), bias.astype(np.float64)), losses


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SEGH"
_VERSION = 1


def head_to_bytes(head: DecoderHead) -> bytes:
    """Serialize a head: magic, version, class ids, shape, float32 params,
    all little-endian."""
    parts = [
        _MAGIC,
        struct.pack("<HH", _VERSION, len(head.class_ids)),
        struct.pack(f"<{len(head.class_ids)}H", *head.class_ids),
        struct.pack("<II", head.feature_dim, len(head.class_ids)),
        head.weights.astype("<f4").tobytes(),
        head.bias.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def head_from_bytes(blob: bytes) -> DecoderHead:
    if blob[:4] != _MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    version, n_classes = struct.unpack_from("<HH", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 8
    ids = struct.unpack_from(f"<{n_classes}H", blob, off)
    off += 2 * n_classes
    feat_dim, n_cols = struct.unpack_from("<II", blob, off)
    off += 8
    if n_cols != n_classes:
        raise ValueError("checkpoint class count mismatch")
    w_bytes = 4 * feat_dim * n_cols
    expected = off + w_bytes + 4 * n_cols
    if len(blob) != expected:
        raise ValueError(f"checkpoint length {len(blob)} != expected {expected}")
    weights = np.frombuffer(blob, dtype="<f4", count=feat_dim * n_cols, offset=off).reshape(feat_dim, n_cols)
    off += w_bytes
    bias = np.frombuffer(blob, dtype="<f4", count=n_cols, offset=off)
    return DecoderHead(tuple(int(i) for i in ids), weights.astype(np.float64), bias.astype(np.float64))


def save_head(path: str, head: DecoderHead) -> None:
    with open(path, "wb") as f:
        f.write(head_to_bytes(head))


def load_head(path: str) -> DecoderHead:
    with open(path, "rb") as f:
        return head_from_bytes(f.read())


def head_checkpoint_bytes(head: DecoderHead) -> int:
    """Size of the serialized head, the unit for storage-budget comparisons."""
    return len(head_to_bytes(head))
