"""Label self-inpainting for incremental steps.

Two rewrites keep old knowledge alive in new training data:

* background inpainting runs on step-k training labels, where everything
  except the new classes is annotated as background. Pixels not labeled
  with a new class are re-labeled by the previous model's prediction over
  the classes it knows (background included), so old objects in new scenes
  stop being trained as background.

* knowledge inpainting runs on replay pseudo-labels mid-step, once the
  current model has partly learned the new classes. Per pixel, with y the
  replay label and y_max the current model's argmax over all known classes:
  keep y if it is an old class; else take y_max if y_max is a new class;
  else fall back to background. Old-class pixels are never modified, which
  is the constraint that keeps the rewrite from eroding past knowledge.
  The unconstrained variant drops the background fallback and trusts y_max
  outright on non-old pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .segmodel import DecoderHead, Encoder, predict_labels
from .shapeworld import BACKGROUND


@dataclass
class InpaintContext:
    """Models and class bookkeeping for one incremental step k.

    prev_head covers the previously known classes plus background and
    drives background inpainting; cur_head additionally covers the new
    classes and drives knowledge inpainting.
    """

    encoder: Encoder
    old_classes: frozenset[int]
    new_classes: frozenset[int]
    prev_head: DecoderHead | None = None
    cur_head: DecoderHead | None = None

    def __post_init__(self):
        self.old_classes = frozenset(int(c) for c in self.old_classes)
        self.new_classes = frozenset(int(c) for c in self.new_classes)
        if BACKGROUND in self.old_classes or BACKGROUND in self.new_classes:
            raise ValueError("background is implicit, not part of a class group")
        if self.old_classes & self.new_classes:
            raise ValueError("old and new classes must be disjoint")
        if not self.new_classes:
            raise ValueError("need at least one new class")
        if self.prev_head is not None:
            want = self.old_classes | {BACKGROUND}
            if set(self.prev_head.class_ids) != want:
                raise ValueError(f"prev_head covers {sorted(self.prev_head.class_ids)}, expected {sorted(want)}")
        if self.cur_head is not None:
            want = self.old_classes | self.new_classes | {BACKGROUND}
            if set(self.cur_head.class_ids) != want:
                raise ValueError(f"cur_head covers {sorted(self.cur_head.class_ids)}, expected {sorted(want)}")


def _check_values(labels: np.ndarray, allowed: set[int], what: str) -> None:
    present = set(np.unique(labels).tolist())
    extra = present - allowed
    if extra:
        raise ValueError(f"{what} contains unexpected class ids {sorted(extra)}")


def background_inpaint(labels: np.ndarray, image: np.ndarray, ctx: InpaintContext) -> np.ndarray:
    """Rewrite a step-k training label map as described above.

    labels may only contain new classes and background. Returns a new
    array; new-class pixels pass through untouched. Requires ctx.prev_head,
    so it is undefined at step 0 (there is no previous model).
    """
    if ctx.prev_head is None:
        raise ValueError("background inpainting needs the previous model")
    labels = np.asarray(labels)
    _check_values(labels, ctx.new_classes | {BACKGROUND}, "training labels")
    feats = ctx.encoder.encode(image)
    old_pred = predict_labels(ctx.prev_head, feats)
    new_ids = np.asarray(sorted(ctx.new_classes), dtype=labels.dtype)
    is_new = np.isin(labels, new_ids)
    return np.where(is_new, labels, old_pred.astype(labels.dtype)).astype(np.int16)


def knowledge_inpaint(
    pseudo_labels: np.ndarray,
    image: np.ndarray,
    ctx: InpaintContext,
    constrained: bool = True,
    strict: bool = True,
) -> np.ndarray:
    """Rewrite replay pseudo-labels with the partly trained current model.

    With strict=True the input may only contain old classes and background,
    which is what fresh replay labels look like; strict=False also accepts
    new-class values so the rewrite can be re-applied to its own output
    (it is idempotent for a fixed current model).
    """
    if ctx.cur_head is None:
        raise ValueError("knowledge inpainting needs the current model")
    labels = np.asarray(pseudo_labels)
    if strict:
        _check_values(labels, ctx.old_classes | {BACKGROUND}, "replay pseudo-labels")
    else:
        _check_values(labels, ctx.old_classes | ctx.new_classes | {BACKGROUND}, "replay pseudo-labels")
    feats = ctx.encoder.encode(image)
    y_max = predict_labels(ctx.cur_head, feats).astype(labels.dtype)
    old_ids = np.asarray(sorted(ctx.old_classes), dtype=labels.dtype)
    new_ids = np.asarray(sorted(ctx.new_classes), dtype=labels.dtype)
    is_old = np.isin(labels, old_ids)
    max_is_new = np.isin(y_max, new_ids)
    if constrained:
        fallback = np.where(max_is_new, y_max, np.asarray(BACKGROUND, dtype=labels.dtype))
    else:
        fallback = y_max
    return np.where(is_old, labels, fallback).astype(np.int16)
