"""Replay set construction from a simulated web source.

For each past class the pipeline queries a fixed image pool, removes
near-duplicates by pairwise PSNR, filters the survivors with the
adversarial discriminator and per-class size thresholds, pseudo-labels
them with that class's helper decoder, and keeps the first N_r. Replay
sets are rebuilt from the pools at every step, so storage stays bounded
by the pool definitions rather than by the number of steps.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .pixelio import export_dataset, write_pgm
from .segmodel import DecoderHead, Encoder, predict_labels
from .selection import (
    Discriminator,
    SizeThreshold,
    disc_features_batch,
    disc_score_batch,
    semantic_mask,
)
from .shapeworld import BACKGROUND

DEFAULT_PSNR_THRESHOLD_DB = 35.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; identical inputs
    give math.inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def dedup(images: np.ndarray, threshold_db: float = DEFAULT_PSNR_THRESHOLD_DB) -> tuple[np.ndarray, np.ndarray]:
    """Greedy order-preserving near-duplicate removal.

    Scans the pool in order and drops an image iff its PSNR against some
    already-kept image exceeds threshold_db. Returns (kept images, kept
    indices into the input). The first image always survives.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError("images must be (n, H, W, 3)")
    n = images.shape[0]
    if n == 0:
        return images, np.empty(0, dtype=int)
    flat = images.reshape(n, -1).astype(np.float32)
    d = flat.shape[1]
    # pairwise MSE via the gram matrix; clamp tiny negatives from rounding
    norms = np.einsum("ij,ij->i", flat, flat, dtype=np.float64)
    gram = (flat @ flat.T).astype(np.float64)
    mse = np.maximum((norms[:, None] + norms[None, :] - 2.0 * gram) / d, 0.0)
    # psnr > threshold  <=>  mse < 10^(-threshold/10), with mse == 0 matching
    # the +inf sentinel convention
    mse_cut = 10.0 ** (-threshold_db / 10.0)
    kept: list[int] = [0]
    for i in range(1, n):
        if mse[i, kept].min() >= mse_cut:
            kept.append(i)
    idx = np.asarray(kept, dtype=int)
    return images[idx], idx


def pseudo_label(helper: DecoderHead, encoder: Encoder, image: np.ndarray, classes: Iterable[int] | None = None) -> np.ndarray:
    """Label every pixel by the helper's argmax over its classes plus
    background. If `classes` is given, the helper head must cover exactly
    that group plus background; a mismatched helper is rejected rather than
    silently producing labels from the wrong step."""
    if classes is not None:
        expected = set(int(c) for c in classes) | {BACKGROUND}
        if set(helper.class_ids) != expected:
            raise ValueError(f"helper covers {sorted(helper.class_ids)}, expected {sorted(expected)}")
    elif BACKGROUND not in helper.class_ids:
        raise ValueError("helper head must include the background class")
    return predict_labels(helper, encoder.encode(image))


def pseudo_label_batch(helper: DecoderHead, encoder: Encoder, images: np.ndarray, classes: Iterable[int] | None = None) -> np.ndarray:
    if classes is not None:
        expected = set(int(c) for c in classes) | {BACKGROUND}
        if set(helper.class_ids) != expected:
            raise ValueError(f"helper covers {sorted(helper.class_ids)}, expected {sorted(expected)}")
    images = np.asarray(images)
    return predict_labels(helper, encoder.encode_batch(images)).reshape(images.shape[:3])


@dataclass
class ReplaySample:
    """One replay image with its provenance trail."""

    image: np.ndarray
    pseudo_labels: np.ndarray
    query_class: int
    pool_index: int
    passed_dedup: bool = True
    passed_adversarial: bool = True
    passed_semantic: bool = True
    # set when a later step rewrites the labels, so audits can diff
    original_pseudo_labels: np.ndarray | None = None


@dataclass
class ReplaySet:
    """Replay samples for one class group or a union of groups."""

    classes: frozenset[int]
    samples: list[ReplaySample] = field(default_factory=list)
    target_per_class: int = 0
    shortfalls: list[dict] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in sorted(self.classes)}
        for s in self.samples:
            counts[s.query_class] = counts.get(s.query_class, 0) + 1
        return counts

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.stack([s.pseudo_labels for s in self.samples])

    @staticmethod
    def union(parts: Iterable["ReplaySet"]) -> "ReplaySet":
        parts = list(parts)
        classes: set[int] = set()
        merged = ReplaySet(classes=frozenset())
        for p in parts:
            if classes & set(p.classes):
                raise ValueError("replay fragments must cover disjoint classes")
            classes |= set(p.classes)
            merged.samples.extend(p.samples)
            merged.shortfalls.extend(p.shortfalls)
            merged.audit.extend(p.audit)
            merged.target_per_class = max(merged.target_per_class, p.target_per_class)
        merged.classes = frozenset(classes)
        return merged


@dataclass
class ReplayCache:
    """Per-run memo for the expensive, step-invariant pieces of pool work.

    A class's raw pool, its post-dedup survivors, their discriminator
    features and their helper pseudo-labels never change once the class's
    home step has passed, so later steps reuse them instead of recomputing.
    """

    pools: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)  # class -> (kept imgs, kept idx)
    features: dict[int, np.ndarray] = field(default_factory=dict)
    labels: dict[int, np.ndarray] = field(default_factory=dict)

    def dedup_pool(self, class_id: int, source: Callable[[int], np.ndarray], threshold_db: float):
        if class_id not in self.pools:
            self.pools[class_id] = dedup(np.asarray(source(class_id)), threshold_db)
        return self.pools[class_id]

    def pool_features(self, class_id: int, images: np.ndarray) -> np.ndarray:
        if class_id not in self.features:
            self.features[class_id] = disc_features_batch(images)
        return self.features[class_id]

    def pool_labels(self, class_id: int, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if class_id not in self.labels:
            self.labels[class_id] = compute()
        return self.labels[class_id]


@dataclass
class ReplayFilters:
    """Filter configuration for build_replay_set. discriminator=None turns
    the adversarial stage off, thresholds=None the semantic stage."""

    psnr_threshold_db: float = DEFAULT_PSNR_THRESHOLD_DB
    discriminator: Discriminator | None = None
    thresholds: Mapping[int, SizeThreshold] | None = None


def build_replay_set(
    classes: Iterable[int],
    n_per_class: int,
    source: Callable[[int], np.ndarray],
    filters: ReplayFilters,
    helper: DecoderHead,
    encoder: Encoder,
    cache: ReplayCache | None = None,
    min_keep: int = 5,
) -> ReplaySet:
    """Assemble the replay fragment for one class group.

    source(class_id) returns that class's raw candidate pool. Stages run
    dedup, adversarial, semantic in order; each stage only removes
    candidates. Survivors are pseudo-labeled by the group's helper decoder
    and the first n_per_class per class are kept in pool order. A class
    ending below min_keep survivors is recorded as a shortfall (the pools
    were too dirty), never silently padded.
    """
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise ValueError("need at least one class")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    cache = cache if cache is not None else ReplayCache()
    out = ReplaySet(classes=frozenset(classes), target_per_class=n_per_class)
    for c in classes:
        imgs, pool_idx = cache.dedup_pool(c, source, filters.psnr_threshold_db)
        m = len(imgs)
        if filters.discriminator is not None:
            feats = cache.pool_features(c, imgs)
            scores = disc_score_batch(filters.discriminator, feats)
            adv = scores[:, 0] > scores[:, 1]
        else:
            scores = None
            adv = np.ones(m, dtype=bool)
        labels = cache.pool_labels(c, lambda: pseudo_label_batch(helper, encoder, imgs, classes))
        if filters.thresholds is not None:
            if c not in filters.thresholds:
                raise KeyError(f"no size threshold for class {c}")
            threshold = filters.thresholds[c]
            fractions = (labels == c).reshape(m, -1).mean(axis=1)
            sem = semantic_mask(labels, threshold)
        else:
            threshold = None
            fractions = None
            sem = np.ones(m, dtype=bool)
        final = adv & sem
        kept_positions = np.flatnonzero(final)[:n_per_class]
        kept_set = set(int(j) for j in kept_positions)
        for j in range(m):
            rec = {
                "class": c,
                "pool_index": int(pool_idx[j]),
                "adversarial": bool(adv[j]),
                "semantic": bool(sem[j]),
                "kept": int(j) in kept_set,
            }
            if scores is not None:
                rec["z_p"] = float(scores[j, 0])
                rec["z_rp"] = float(scores[j, 1])
            if threshold is not None:
                rec["class_fraction"] = float(fractions[j])
                rec["t_size"] = float(threshold.t_size)
            out.audit.append(rec)
        for j in kept_positions:
            out.samples.append(
                ReplaySample(
                    image=imgs[j],
                    pseudo_labels=labels[j].copy(),
                    query_class=c,
                    pool_index=int(pool_idx[j]),
                )
            )
        if len(kept_positions) < min_keep:
            out.shortfalls.append({"class": c, "kept": int(len(kept_positions)), "target": n_per_class, "floor": min_keep})
    return out


def export_replay_manifest(replay: ReplaySet, directory: str) -> str:
    """Write the replay set as PPM/PGM pairs plus a manifest.csv.

    The manifest records each sample's query class, its index into the raw
    web pool and the filter flags. Samples whose labels were rewritten
    mid-step also get their pre-rewrite label map (sample_XXXXX_pre.pgm)
    so the rewrite can be diffed offline. Returns the manifest path.
    """
    if not replay.samples:
        raise ValueError("replay set is empty")
    images = np.stack([s.image for s in replay.samples])
    labels = np.stack([s.pseudo_labels for s in replay.samples])
    pre_names = [
        "" if s.original_pseudo_labels is None else f"sample_{i:05d}_pre.pgm"
        for i, s in enumerate(replay.samples)
    ]
    manifest = export_dataset(
        directory,
        images,
        labels,
        extra_columns={
            "class": [s.query_class for s in replay.samples],
            "pool_index": [s.pool_index for s in replay.samples],
            "passed_dedup": [int(s.passed_dedup) for s in replay.samples],
            "passed_adversarial": [int(s.passed_adversarial) for s in replay.samples],
            "passed_semantic": [int(s.passed_semantic) for s in replay.samples],
            "pre_rewrite": pre_names,
        },
    )
    for name, s in zip(pre_names, replay.samples):
        if name:
            write_pgm(os.path.join(directory, name), s.original_pseudo_labels)
    return manifest
