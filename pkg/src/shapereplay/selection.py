"""Replay candidate selection.

Two complementary filters decide which downloaded images are worth
replaying:

* an adversarial one, a tiny linear discriminator over global image
  statistics that scores each image as in-domain (z_p) versus web-junk
  (z_rp) and keeps strict z_p > z_rp winners, with a core-set rule
  (z_p > alpha * z_rp) marking the unambiguous keepers that later rounds
  of discriminator training may treat as positives;
* a semantic one, per-class size thresholds read off the empirical CDF of
  labeled-pixel fractions in that class's own training data, keeping images
  whose pseudo-labeled class occupies at least a typical amount of area.

Discriminator scores are rectified (ReLU) linear outputs. Training
optimizes softmax cross-entropy on the pre-rectifier logits, because the
rectified surface has no gradient on whichever side is pinned at zero;
every keep/drop decision uses the rectified scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .seeds import rng_for
from .shapeworld import rgb_to_hsv

DISC_FEATURE_DIM = 64

# feature layout, kept explicit so tests can address invariant blocks:
# [0:24)  per-channel 8-bin intensity histograms
# [24:36) 12-bin hue histogram
# [36:42) 6-bin saturation histogram
# [42:48) per-channel mean and std
# [48:52) value mean/std, saturation mean/std
# [52:55) gray intensity percentiles 10/50/90
# [55:60) edge density: global plus four quadrants
# [60:64) edge-energy centroid (row, col) and spread (row, col)
HIST_SLICE = slice(0, 42)
PERMUTATION_INVARIANT_SLICE = slice(0, 55)


def disc_features(image: np.ndarray) -> np.ndarray:
    """Global statistics vector (DISC_FEATURE_DIM,) float64; all entries are
    O(1) by construction so no fitted normalization is needed. The function
    is pure: the extractor cannot drift between incremental steps."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w = image.shape[:2]
    n = h * w
    out = np.empty(DISC_FEATURE_DIM)
    pos = 0
    for ch in range(3):
        hist, _ = np.histogram(image[..., ch], bins=8, range=(0.0, 1.0))
        out[pos : pos + 8] = hist / n
        pos += 8
    hsv = rgb_to_hsv(image)
    hue_hist, _ = np.histogram(hsv[..., 0], bins=12, range=(0.0, 1.0))
    out[pos : pos + 12] = hue_hist / n
    pos += 12
    sat_hist, _ = np.histogram(hsv[..., 1], bins=6, range=(0.0, 1.0))
    out[pos : pos + 6] = sat_hist / n
    pos += 6
    for ch in range(3):
        out[pos] = image[..., ch].mean()
        out[pos + 1] = image[..., ch].std()
        pos += 2
    out[pos] = hsv[..., 2].mean()
    out[pos + 1] = hsv[..., 2].std()
    out[pos + 2] = hsv[..., 1].mean()
    out[pos + 3] = hsv[..., 1].std()
    pos += 4
    gray = image @ np.array([0.299, 0.587, 0.114])
    out[pos : pos + 3] = np.percentile(gray, [10, 50, 90])
    pos += 3
    gy, gx = np.gradient(ndimage.gaussian_filter(gray, sigma=1.0, truncate=3.0))
    edge = np.hypot(gy, gx)
    out[pos] = edge.mean()
    hh, hw = h // 2, w // 2
    out[pos + 1] = edge[:hh, :hw].mean()
    out[pos + 2] = edge[:hh, hw:].mean()
    out[pos + 3] = edge[hh:, :hw].mean()
    out[pos + 4] = edge[hh:, hw:].mean()
    pos += 5
    total = edge.sum() + 1e-12
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    cy = float((edge * ys).sum() / total) / h
    cx = float((edge * xs).sum() / total) / w
    sy = float(np.sqrt((edge * (ys / h - cy) ** 2).sum() / total))
    sx = float(np.sqrt((edge * (xs / w - cx) ** 2).sum() / total))
    out[pos : pos + 4] = [cy, cx, sy, sx]
    pos += 4
    assert pos == DISC_FEATURE_DIM
    return out


def disc_features_batch(images) -> np.ndarray:
    return np.stack([disc_features(img) for img in images])


@dataclass
class Discriminator:
    """Linear two-output scorer; score vector is ReLU(W^T f + b)."""

    weights: np.ndarray  # (DISC_FEATURE_DIM, 2) float64
    bias: np.ndarray  # (2,) float64

    def __post_init__(self):
        if self.weights.shape != (self.weights.shape[0], 2):
            raise ValueError("weights must be (feature_dim, 2)")
        if self.bias.shape != (2,):
            raise ValueError("bias must be (2,)")

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[0])

    def copy(self) -> "Discriminator":
        return Discriminator(self.weights.copy(), self.bias.copy())


def init_discriminator(feature_dim: int = DISC_FEATURE_DIM) -> Discriminator:
    """Zero weights: every image scores (0, 0), nothing passes the strict
    z_p > z_rp test."""
    return Discriminator(np.zeros((feature_dim, 2)), np.zeros(2))


def _as_features(disc: Discriminator, images_or_feats) -> np.ndarray:
    arr = np.asarray(images_or_feats)
    if arr.ndim == 4:
        return disc_features_batch(arr)
    if arr.ndim == 2 and arr.shape[1] == disc.feature_dim:
        return arr.astype(np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        return disc_features(arr)[None, :]
    raise ValueError(f"expected images or ({'n'}, {disc.feature_dim}) features, got shape {arr.shape}")


def disc_logits(disc: Discriminator, images_or_feats) -> np.ndarray:
    feats = _as_features(disc, images_or_feats)
    return feats @ disc.weights + disc.bias


def disc_score(disc: Discriminator, image: np.ndarray) -> tuple[float, float]:
    """Rectified (z_p, z_rp) for one image; both components nonnegative."""
    z = disc_score_batch(disc, np.asarray(image)[None])
    return float(z[0, 0]), float(z[0, 1])


def disc_score_batch(disc: Discriminator, images_or_feats) -> np.ndarray:
    """Rectified scores, shape (n, 2)."""
    return np.maximum(disc_logits(disc, images_or_feats), 0.0)


def adversarial_mask(disc: Discriminator, images_or_feats=None, scores: np.ndarray | None = None) -> np.ndarray:
    """Keep decision per image: strictly z_p > z_rp; ties drop."""
    if scores is None:
        scores = disc_score_batch(disc, images_or_feats)
    scores = np.asarray(scores)
    if np.any(scores < 0):
        raise ValueError("scores must be rectified (nonnegative)")
    return scores[:, 0] > scores[:, 1]


def adversarial_filter(disc: Discriminator, images: np.ndarray, scores: np.ndarray | None = None) -> np.ndarray:
    """Order-preserving subset of images passing the adversarial test."""
    return np.asarray(images)[adversarial_mask(disc, images, scores)]


@dataclass(frozen=True)
class CoreSetRule:
    """Membership rule z_p > alpha * z_rp with alpha > 1."""

    alpha: float = 100.0

    def __post_init__(self):
        if self.alpha <= 1.0:
            raise ValueError("alpha must exceed 1 for the core set to be a subset")


def core_mask(disc: Discriminator, images_or_feats=None, rule: CoreSetRule = CoreSetRule(), scores: np.ndarray | None = None) -> np.ndarray:
    """Core-set membership: z_p > alpha * z_rp. With rectified scores and
    alpha > 1 this is always a subset of the adversarial keep set."""
    if scores is None:
        scores = disc_score_batch(disc, images_or_feats)
    scores = np.asarray(scores)
    if np.any(scores < 0):
        raise ValueError("scores must be rectified (nonnegative)")
    return scores[:, 0] > rule.alpha * scores[:, 1]


@dataclass(frozen=True)
class DiscTrainSchedule:
    """Minibatch SGD settings for discriminator fitting.

    Training stops early once held-out accuracy beats accuracy_ceiling:
    the filter only needs to be reasonably good, and an overconfident one
    strangles the candidate stream.
    """

    epochs: int = 10
    lr: float = 1e-3
    decay: float = 0.8
    decay_every: int = 2
    batch_size: int = 32
    holdout: float = 0.2
    accuracy_ceiling: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size and decay_every must be >= 1")
        if not (0.0 < self.holdout < 1.0):
            raise ValueError("holdout must be in (0, 1)")
        if not (0.0 < self.accuracy_ceiling <= 1.0):
            raise ValueError("accuracy_ceiling must be in (0, 1]")
        if self.lr <= 0 or not (0.0 < self.decay <= 1.0):
            raise ValueError("lr must be positive and decay in (0, 1]")


@dataclass
class DiscTrainResult:
    discriminator: Discriminator
    val_accuracy: float
    epochs_run: int
    loss_trace: list[float] = field(default_factory=list)


def disc_loss_and_grad(weights: np.ndarray, bias: np.ndarray, feats: np.ndarray, labels: np.ndarray):
    """Softmax cross-entropy on raw logits; labels are 0 (positive, z_p)
    or 1 (web-side, z_rp). Returns (loss, dW, db)."""
    logits = feats @ weights + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    n = feats.shape[0]
    idx = np.arange(n)
    loss = float(-np.log(np.maximum(probs[idx, labels], 1e-300)).mean())
    grad = probs.copy()
    grad[idx, labels] -= 1.0
    grad /= n
    return loss, feats.T @ grad, grad.sum(axis=0)


def _holdout_split(n: int, holdout: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = max(1, int(round(holdout * n)))
    if n_val >= n:
        raise ValueError("not enough samples for a holdout split")
    return perm[n_val:], perm[:n_val]


def _accuracy(disc: Discriminator, feats: np.ndarray, labels: np.ndarray) -> float:
    scores = disc_score_batch(disc, feats)
    # predicted in-domain only on a strict win, matching the filter rule
    pred = np.where(scores[:, 0] > scores[:, 1], 0, 1)
    return float((pred == labels).mean())


def train_discriminator(
    disc: Discriminator,
    positives,
    negatives,
    schedule: DiscTrainSchedule = DiscTrainSchedule(),
) -> DiscTrainResult:
    """Fit on positives (real/core images) vs negatives (web candidates).

    Both sides may be images (n, H, W, 3) or precomputed feature rows
    (n, DISC_FEATURE_DIM). A seeded 20 percent holdout from each side is
    scored after every epoch; training stops once that accuracy clears the
    schedule ceiling. The input discriminator is not modified.
    """
    pos = _as_features(disc, positives)
    neg = _as_features(disc, negatives)
    if len(pos) < 2 or len(neg) < 2:
        raise ValueError("need at least two samples on each side")
    rng = rng_for(schedule.seed, "disc-split")
    p_tr, p_val = _holdout_split(len(pos), schedule.holdout, rng)
    n_tr, n_val = _holdout_split(len(neg), schedule.holdout, rng)
    feats_tr = np.concatenate([pos[p_tr], neg[n_tr]])
    labels_tr = np.concatenate([np.zeros(len(p_tr), dtype=int), np.ones(len(n_tr), dtype=int)])
    feats_val = np.concatenate([pos[p_val], neg[n_val]])
    labels_val = np.concatenate([np.zeros(len(p_val), dtype=int), np.ones(len(n_val), dtype=int)])

    out = disc.copy()
    trace: list[float] = []
    val_acc = _accuracy(out, feats_val, labels_val)
    epochs_run = 0
    for epoch in range(schedule.epochs):
        lr = schedule.lr * schedule.decay ** (epoch // schedule.decay_every)
        order = rng.permutation(len(feats_tr))
        for lo in range(0, len(order), schedule.batch_size):
            sel = order[lo : lo + schedule.batch_size]
            loss, dw, db = disc_loss_and_grad(out.weights, out.bias, feats_tr[sel], labels_tr[sel])
            out.weights -= lr * dw
            out.bias -= lr * db
            trace.append(loss)
        epochs_run = epoch + 1
        val_acc = _accuracy(out, feats_val, labels_val)
        if val_acc > schedule.accuracy_ceiling:
            break
    return DiscTrainResult(discriminator=out, val_accuracy=val_acc, epochs_run=epochs_run, loss_trace=trace)


# ---------------------------------------------------------------------------
# semantic content selection


@dataclass(frozen=True)
class EmpiricalCDF:
    """Right-continuous empirical CDF of per-image labeled-area fractions."""

    class_id: int
    values: np.ndarray  # sorted ascending, each in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) == 0:
            raise ValueError("need at least one observation")
        if np.any(np.diff(v) < 0):
            raise ValueError("values must be sorted ascending")
        if v[0] < 0.0 or v[-1] > 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    def evaluate(self, x) -> np.ndarray | float:
        """F(x) = fraction of observations <= x."""
        res = np.searchsorted(self.values, np.asarray(x, dtype=np.float64), side="right") / len(self.values)
        return float(res) if np.isscalar(x) or np.asarray(x).ndim == 0 else res

    def quantile(self, q: float) -> float:
        """Smallest observed value v with F(v) >= q."""
        if not (0.0 < q <= 1.0):
            raise ValueError("q must be in (0, 1]")
        n = len(self.values)
        idx = int(np.ceil(q * n)) - 1
        return float(self.values[max(idx, 0)])


def class_size_fractions(labels: np.ndarray, class_id: int) -> np.ndarray:
    """Per-image fraction of pixels carrying class_id, for images that
    contain it at all."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError("labels must be (n, H, W)")
    per_img = (labels == class_id).mean(axis=(1, 2))
    fracs = per_img[per_img > 0]
    return np.asarray(fracs, dtype=np.float64)


def class_size_cdf(labels: np.ndarray, class_id: int) -> EmpiricalCDF:
    """CDF over images that contain class_id; absent class is an error."""
    fracs = class_size_fractions(labels, class_id)
    if len(fracs) == 0:
        raise ValueError(f"class {class_id} absent from the dataset")
    return EmpiricalCDF(class_id=class_id, values=np.sort(fracs))


@dataclass(frozen=True)
class SizeThreshold:
    class_id: int
    t_size: float

    def __post_init__(self):
        if not (0.0 <= self.t_size <= 1.0):
            raise ValueError("threshold must be a fraction in [0, 1]")


def size_threshold(cdf: EmpiricalCDF) -> SizeThreshold:
    """Median-size rule: the lower empirical median of the class's observed
    area fractions. For n observations this is sorted[ceil(n/2) - 1]."""
    return SizeThreshold(class_id=cdf.class_id, t_size=cdf.quantile(0.5))


def fixed_threshold(class_id: int, fraction: float = 0.25) -> SizeThreshold:
    """Class-agnostic fallback rule: one fixed area fraction for everyone."""
    return SizeThreshold(class_id=class_id, t_size=fraction)


def semantic_mask(pseudo_labels: np.ndarray, threshold: SizeThreshold) -> np.ndarray:
    """Keep decision per image: pseudo-labeled fraction of the threshold's
    class must reach t_size. Order preserving, no modification."""
    labels = np.asarray(pseudo_labels)
    if labels.ndim != 3:
        raise ValueError("pseudo_labels must be (n, H, W)")
    fracs = (labels == threshold.class_id).mean(axis=(1, 2))
    return fracs >= threshold.t_size


def semantic_filter(images: np.ndarray, pseudo_labels: np.ndarray, threshold: SizeThreshold) -> tuple[np.ndarray, np.ndarray]:
    """Filter (images, pseudo_labels) jointly by the size rule."""
    images = np.asarray(images)
    if len(images) != len(pseudo_labels):
        raise ValueError("images and pseudo_labels must align")
    keep = semantic_mask(pseudo_labels, threshold)
    return images[keep], np.asarray(pseudo_labels)[keep]
