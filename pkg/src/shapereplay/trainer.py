"""Incremental training orchestration.

Runs the full pipeline: step 0 trains the encoder statistics and the first
decoder, every later step trains a helper decoder for its new classes,
rebuilds the replay set for all past classes from fixed web pools,
rewrites labels (background inpainting on new data up front, knowledge
inpainting on replay data at 60 percent of the step budget), trains the
expanded decoder on interleaved new/replay batches, and finally refreshes
the adversarial discriminator, which the next step's filtering will use.

Baselines share the same machinery: plain fine-tuning is the pipeline with
the replay apparatus disabled, joint training is a single step over every
class, and store-and-replay swaps web replay for a byte-budgeted cache of
real samples.

Every random choice draws from a purpose-keyed seed, so disabling one
component never shifts another component's stream; that is what makes
"fine-tuning equals the pipeline with everything off" an exact identity.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .config import ExperimentConfig
from .eval_report import MetricsReport, confusion_matrix, mean_iou, per_class_iou
from .inpaint import InpaintContext, background_inpaint, knowledge_inpaint
from .replay_source import ReplayCache, ReplayFilters, ReplaySet, build_replay_set
from .seeds import rng_for, seed_for
from .segmodel import (
    DecoderHead,
    Encoder,
    TrainSchedule,
    expand_head,
    head_checkpoint_bytes,
    init_head,
    predict_labels,
    train_head,
)
from .selection import (
    CoreSetRule,
    DiscTrainSchedule,
    Discriminator,
    SizeThreshold,
    class_size_cdf,
    core_mask,
    disc_features_batch,
    fixed_threshold,
    init_discriminator,
    size_threshold,
    train_discriminator,
)
from .shapeworld import (
    BACKGROUND,
    ProtocolSpec,
    TaskDataset,
    WorldSpec,
    generate_eval_dataset,
    generate_task_dataset,
    web_query_images,
)


@dataclass(frozen=True)
class InterleaveSpec:
    """Per-batch composition: r_new fresh images, r_old replay images."""

    r_new: int = 4
    r_old: int = 4

    def __post_init__(self):
        if self.r_new < 1:
            raise ValueError("every batch needs at least one current-task image")
        if self.r_old < 0:
            raise ValueError("r_old must be nonnegative")


def interleave_batches(n_current: int, n_replay: int, spec: InterleaveSpec, n_batches: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (new_indices, old_indices) pairs, uniform with replacement.

    Every yielded batch has exactly spec.r_new new and spec.r_old replay
    indices; sampling replay uniformly over the union keeps per-class
    replay exposure proportional to per-class replay counts.
    """
    if n_current < 1:
        raise ValueError("current dataset is empty")
    if spec.r_old > 0 and n_replay < 1:
        raise ValueError("replay requested but the replay set is empty")
    if n_batches < 0:
        raise ValueError("n_batches must be nonnegative")
    rng = rng_for(seed, "interleave")
    for _ in range(n_batches):
        new_idx = rng.integers(0, n_current, size=spec.r_new)
        old_idx = rng.integers(0, n_replay, size=spec.r_old) if spec.r_old > 0 else np.empty(0, dtype=np.int64)
        yield new_idx, old_idx


@dataclass
class PipelineState:
    """Everything a run accumulates across steps."""

    config: ExperimentConfig  # effective (method-resolved) config
    world: WorldSpec
    protocol: ProtocolSpec
    encoder: Encoder
    head: DecoderHead | None = None
    helpers: dict[int, DecoderHead] = field(default_factory=dict)
    thresholds: dict[int, SizeThreshold] = field(default_factory=dict)
    discriminator: Discriminator | None = None
    replay: ReplaySet | None = None
    cache: ReplayCache = field(default_factory=ReplayCache)
    stored: list[tuple[np.ndarray, np.ndarray, int]] = field(default_factory=list)  # s&r: (image, labels, class)
    audit: list[dict] = field(default_factory=list)
    batch_log: list[dict] = field(default_factory=list)
    batch_violations: int = 0
    per_step_eval: list[dict] = field(default_factory=list)
    step: int = -1
    test_data: TaskDataset | None = None
    test_feats: np.ndarray | None = None


def _note(state: PipelineState, step: int, stage: str, **info) -> None:
    state.audit.append({"step": step, "stage": stage, **info})


def _encode_flat(encoder: Encoder, images: np.ndarray) -> np.ndarray:
    """Per-image flattened features (n, H*W, FEATURE_DIM) float32."""
    feats = encoder.encode_batch(images)
    return feats.reshape(len(images), -1, feats.shape[-1])


def _pool_source(state: PipelineState):
    cfg = state.config

    def source(class_id: int) -> np.ndarray:
        return web_query_images(state.world, class_id, cfg.pool_per_class, cfg.web_profile, seed_for(cfg.seed, "web", class_id))

    return source


def _tensor_batches(state, feats_new, targets_new, feats_old, targets_old, spec: InterleaveSpec, n_batches: int, seed: int):
    """Map index batches to (features, targets) arrays, logging composition."""
    feat_dim = feats_new.shape[-1]
    for new_idx, old_idx in interleave_batches(len(feats_new), len(feats_old) if feats_old is not None else 0, spec, n_batches, seed):
        parts_f = [feats_new[new_idx].reshape(-1, feat_dim)]
        parts_t = [targets_new[new_idx].reshape(-1)]
        if len(old_idx):
            parts_f.append(feats_old[old_idx].reshape(-1, feat_dim))
            parts_t.append(targets_old[old_idx].reshape(-1))
        state.batch_log.append(
            {
                "step": state.step,
                "new": int(len(new_idx)),
                "old": int(len(old_idx)),
                "expected_new": spec.r_new,
                "expected_old": spec.r_old,
            }
        )
        if len(new_idx) != spec.r_new or len(old_idx) != spec.r_old:
            state.batch_violations += 1
        yield np.concatenate(parts_f), np.concatenate(parts_t)


def _decoder_schedule(cfg: ExperimentConfig, total_steps: int) -> TrainSchedule:
    return TrainSchedule(total_steps=total_steps, initial_lr=cfg.lr_initial, final_lr=cfg.lr_final, power=cfg.lr_power)


def _helper_schedule(cfg: ExperimentConfig, total_steps: int) -> TrainSchedule:
    return TrainSchedule(total_steps=total_steps, initial_lr=cfg.helper_lr_initial, final_lr=cfg.helper_lr_final, power=cfg.lr_power)


def _fit_thresholds(state: PipelineState, dataset: TaskDataset, classes) -> None:
    for c in sorted(classes):
        state.thresholds[c] = size_threshold(class_size_cdf(dataset.labels, c))
    _note(state, dataset.step, "fit_size_thresholds", classes=sorted(classes), thresholds={int(c): state.thresholds[c].t_size for c in sorted(classes)})


def _train_helper(state: PipelineState, dataset: TaskDataset, k: int) -> None:
    cfg = state.config
    classes = state.protocol.classes_at(k)
    helper = init_head(set(classes) | {BACKGROUND})
    feats = _encode_flat(state.encoder, dataset.images)
    targets = dataset.labels.reshape(len(dataset), -1)
    budget = len(classes) * cfg.steps_per_class
    schedule = _helper_schedule(cfg, budget)
    batch = cfg.batch_new + cfg.batch_old
    rng = rng_for(cfg.seed, "helper", k)
    def batches():
        for _ in range(budget):
            idx = rng.integers(0, len(feats), size=batch)
            yield feats[idx].reshape(-1, feats.shape[-1]), targets[idx].reshape(-1)
    helper, losses = train_head(helper, batches(), schedule)
    state.helpers[k] = helper
    _note(state, k, "train_helper", classes=sorted(classes), steps=budget, final_loss=losses[-1] if losses else None)


def _subsample(rows: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(rows) <= cap:
        return rows
    sel = rng.choice(len(rows), size=cap, replace=False)
    return rows[np.sort(sel)]


def _train_disc(state: PipelineState, k: int, task_images: np.ndarray) -> None:
    """(Re)fit the discriminator at the end of step k.

    Positives are this step's real images plus, from step 1 on, the core
    set of unambiguous replay keepers. Negatives are the non-core web pools
    of previously seen classes; the current step's own pools stay out of
    the negative side, because a discriminator taught "newest classes mean
    web junk" would starve exactly those pools at the next step. Step 0 has
    no older pools, so its own pools serve as negatives there.
    """
    cfg = state.config
    source = _pool_source(state)
    rule = CoreSetRule(alpha=cfg.disc_alpha)
    pos_parts = [disc_features_batch(task_images)]
    neg_parts = []
    core_size = 0
    neg_classes = state.protocol.classes_through(k if k == 0 else k - 1)
    for c in sorted(neg_classes):
        imgs, _ = state.cache.dedup_pool(c, source, cfg.psnr_threshold_db)
        feats = state.cache.pool_features(c, imgs)
        if k > 0 and state.discriminator is not None:
            in_core = core_mask(state.discriminator, feats, rule)
            pos_parts.append(feats[in_core])
            neg_parts.append(feats[~in_core])
            core_size += int(in_core.sum())
        else:
            neg_parts.append(feats)
    rng = rng_for(cfg.seed, "disc-subsample", k)
    pos_all = np.concatenate(pos_parts)
    neg_all = np.concatenate(neg_parts)
    # balanced sides: with a lopsided mix the objective is happy calling
    # everything junk, which silently starves the replay stream
    per_side = min(len(pos_all), len(neg_all), cfg.disc_max_side)
    # the step's own images always make the positive side in full: they are
    # the only positives showing the newest classes, and losing them to a
    # uniform draw teaches the discriminator that those classes mark web
    # junk, starving their pools at the next step
    task_feats = pos_parts[0]
    if len(task_feats) >= per_side:
        positives = _subsample(task_feats, per_side, rng)
    else:
        core_all = np.concatenate(pos_parts[1:]) if len(pos_parts) > 1 else task_feats[:0]
        fill = _subsample(core_all, per_side - len(task_feats), rng)
        positives = np.concatenate([task_feats, fill])
    negatives = _subsample(neg_all, per_side, rng)
    base = state.discriminator if state.discriminator is not None else init_discriminator()
    schedule = DiscTrainSchedule(
        epochs=cfg.disc_epochs,
        lr=cfg.disc_lr,
        decay=cfg.disc_decay,
        decay_every=cfg.disc_decay_every,
        batch_size=cfg.disc_batch,
        holdout=cfg.disc_holdout,
        accuracy_ceiling=cfg.disc_ceiling,
        seed=seed_for(cfg.seed, "disc", k),
    )
    result = train_discriminator(base, positives, negatives, schedule)
    state.discriminator = result.discriminator
    _note(
        state,
        k,
        "train_discriminator",
        n_pos=int(len(positives)),
        n_neg=int(len(negatives)),
        core_size=core_size,
        val_accuracy=result.val_accuracy,
        epochs_run=result.epochs_run,
    )


def _evaluate_step(state: PipelineState, k: int) -> None:
    cfg = state.config
    known = sorted(state.protocol.classes_through(k))
    preds = _predict_flat(state.head, state.test_feats)
    cm = confusion_matrix(state.test_data.labels, preds, cfg.num_classes + 1)
    ids = known + [BACKGROUND] if cfg.include_background else known
    value, _ = mean_iou(cm, ids)
    ious = per_class_iou(cm)
    detail = {int(c): float(ious[c]) for c in known}
    state.per_step_eval.append({"step": k, "miou_known": value, "n_known": len(known), "class_iou": detail})
    _note(state, k, "evaluate_step", miou_known=value)


def _predict_flat(head: DecoderHead, flat_feats: np.ndarray) -> np.ndarray:
    """Predictions for (n, H*W, F) cached features, returned as (n, H*W)."""
    n, hw, feat_dim = flat_feats.shape
    return predict_labels(head, flat_feats.reshape(-1, feat_dim)).reshape(n, hw)


def _store_samples(state: PipelineState, dataset: TaskDataset, k: int) -> None:
    """Store-and-replay bookkeeping: keep the first m real samples showing
    each of this step's classes, m set by the byte budget."""
    cfg = state.config
    classes = state.protocol.classes_at(k)
    if cfg.sr_budget == "auto":
        helper_bytes = head_checkpoint_bytes(init_head(set(classes) | {BACKGROUND}))
        sample_bytes = (state.world.height * state.world.width * 3 + 15) + (state.world.height * state.world.width + 13)
        quota = helper_bytes // sample_bytes
    else:
        quota = int(cfg.sr_budget)
    stored_now = 0
    for c in sorted(classes):
        taken = 0
        for i in range(len(dataset)):
            if taken >= quota:
                break
            if np.any(dataset.labels[i] == c):
                state.stored.append((dataset.images[i], dataset.labels[i], c))
                taken += 1
                stored_now += 1
    _note(state, k, "store_samples", quota_per_class=int(quota), stored=stored_now)


def _run_step0(state: PipelineState) -> None:
    cfg = state.config
    state.step = 0
    classes = state.protocol.classes_at(0)
    dataset = generate_task_dataset(state.world, state.protocol, 0, state.protocol.samples_per_step[0], seed_for(cfg.seed, "task", 0))
    state.encoder.fit(dataset.images)

    feats = _encode_flat(state.encoder, dataset.images)
    targets = dataset.labels.reshape(len(dataset), -1)
    budget = len(classes) * cfg.steps_per_class
    spec = InterleaveSpec(cfg.batch_new + cfg.batch_old, 0)
    stream = _tensor_batches(state, feats, targets, None, None, spec, budget, seed_for(cfg.seed, "batches", 0))
    head = init_head(set(classes) | {BACKGROUND})
    head, losses = train_head(head, stream, _decoder_schedule(cfg, budget))
    state.head = head
    _note(state, 0, "train_main", steps=budget, classes=sorted(classes), final_loss=losses[-1] if losses else None)

    if cfg.replay:
        _train_helper(state, dataset, 0)
        _fit_thresholds(state, dataset, classes)
        if cfg.adversarial:
            _train_disc(state, 0, dataset.images)
    if cfg.method == "s&r":
        _store_samples(state, dataset, 0)
    state.encoder.freeze()
    state.test_feats = _encode_flat(state.encoder, state.test_data.images)
    _evaluate_step(state, 0)


def _run_step(state: PipelineState, k: int) -> None:
    cfg = state.config
    state.step = k
    new_classes = state.protocol.classes_at(k)
    old_classes = state.protocol.classes_through(k - 1)
    dataset = generate_task_dataset(state.world, state.protocol, k, state.protocol.samples_per_step[k], seed_for(cfg.seed, "task", k))

    labels = dataset.labels
    if cfg.background_inpaint:
        ctx = InpaintContext(
            encoder=state.encoder,
            old_classes=frozenset(old_classes),
            new_classes=frozenset(new_classes),
            prev_head=state.head,
        )
        rewritten = np.stack([background_inpaint(labels[i], dataset.images[i], ctx) for i in range(len(dataset))])
        changed = int(np.sum(rewritten != labels))
        labels = rewritten
        _note(state, k, "background_inpaint", images=len(dataset), pixels_rewritten=changed)

    if cfg.replay:
        _train_helper(state, dataset, k)
        _fit_thresholds(state, dataset, new_classes)
        fragments = []
        source = _pool_source(state)
        for i in range(k):
            group = state.protocol.classes_at(i)
            if cfg.semantic == "cth":
                thresholds = {c: state.thresholds[c] for c in group}
            elif cfg.semantic == "fth":
                thresholds = {c: fixed_threshold(c, cfg.fth_fraction) for c in group}
            else:
                thresholds = None
            filters = ReplayFilters(
                psnr_threshold_db=cfg.psnr_threshold_db,
                discriminator=state.discriminator if cfg.adversarial else None,
                thresholds=thresholds,
            )
            fragments.append(
                build_replay_set(
                    group,
                    cfg.replay_per_class,
                    source,
                    filters,
                    state.helpers[i],
                    state.encoder,
                    cache=state.cache,
                    min_keep=cfg.shortfall_floor,
                )
            )
        state.replay = ReplaySet.union(fragments)
        _note(
            state,
            k,
            "build_replay",
            classes=sorted(state.replay.classes),
            kept=state.replay.class_counts(),
            shortfalls=list(state.replay.shortfalls),
        )

    # assemble tensors for this step's training
    feats_new = _encode_flat(state.encoder, dataset.images)
    targets_new = labels.reshape(len(dataset), -1)
    feats_old = targets_old = None
    replay_labels = None
    spec = InterleaveSpec(cfg.batch_new + cfg.batch_old, 0)
    if cfg.replay and state.replay is not None and len(state.replay) > 0:
        replay_images = state.replay.images()
        replay_labels = state.replay.labels()  # copy; knowledge inpainting rewrites it in place
        feats_old = _encode_flat(state.encoder, replay_images)
        targets_old = replay_labels.reshape(len(replay_labels), -1)
        spec = InterleaveSpec(cfg.batch_new, cfg.batch_old)
    elif cfg.method == "s&r" and state.stored:
        replay_images = np.stack([s[0] for s in state.stored])
        replay_labels = np.stack([s[1] for s in state.stored])
        feats_old = _encode_flat(state.encoder, replay_images)
        targets_old = replay_labels.reshape(len(replay_labels), -1)
        spec = InterleaveSpec(cfg.batch_new, cfg.batch_old)
    _note(
        state,
        k,
        "assemble_trainset",
        n_new=len(dataset),
        n_old=int(len(feats_old)) if feats_old is not None else 0,
        r_new=spec.r_new,
        r_old=spec.r_old,
    )

    budget = len(new_classes) * cfg.steps_per_class
    schedule = _decoder_schedule(cfg, budget)
    head = expand_head(state.head, new_classes)
    stream = _tensor_batches(state, feats_new, targets_new, feats_old, targets_old, spec, budget, seed_for(cfg.seed, "batches", k))

    do_ki = cfg.knowledge_inpaint != "off" and cfg.replay and state.replay is not None and len(state.replay) > 0
    if do_ki:
        pause_at = int(np.floor(cfg.ki_fraction * budget))
        head, losses_a = train_head(head, itertools.islice(stream, pause_at), schedule)
        _note(state, k, "train_main", steps=pause_at, phase="before_knowledge_inpaint", final_loss=losses_a[-1] if losses_a else None)
        ctx = InpaintContext(
            encoder=state.encoder,
            old_classes=frozenset(old_classes),
            new_classes=frozenset(new_classes),
            cur_head=head,
        )
        changed = 0
        for idx, sample in enumerate(state.replay.samples):
            sample.original_pseudo_labels = sample.pseudo_labels.copy()
            updated = knowledge_inpaint(
                sample.pseudo_labels,
                sample.image,
                ctx,
                constrained=cfg.knowledge_inpaint != "unconstrained",
                strict=True,
            )
            changed += int(np.sum(updated != sample.pseudo_labels))
            sample.pseudo_labels = updated
            replay_labels[idx] = updated  # the training stream reads this array
        _note(state, k, "knowledge_inpaint", constrained=cfg.knowledge_inpaint != "unconstrained", pixels_rewritten=changed)
        head, losses_b = train_head(head, stream, schedule, start_step=pause_at)
        _note(state, k, "train_main_continue", steps=budget - pause_at, final_loss=losses_b[-1] if losses_b else None)
    else:
        head, losses = train_head(head, stream, schedule)
        _note(state, k, "train_main", steps=budget, final_loss=losses[-1] if losses else None)
    state.head = head

    if cfg.replay and cfg.adversarial:
        _train_disc(state, k, dataset.images)
    if cfg.method == "s&r":
        _store_samples(state, dataset, k)
    _evaluate_step(state, k)


def run_pipeline(cfg: ExperimentConfig) -> tuple[MetricsReport, PipelineState]:
    """Run one experiment end to end; returns the report and final state."""
    start = time.perf_counter()
    original = cfg.build_protocol()
    eff = cfg.effective()
    protocol = original.collapse() if cfg.method == "joint" else original
    world = cfg.build_world()
    state = PipelineState(config=eff, world=world, protocol=protocol, encoder=Encoder())

    state.test_data = generate_eval_dataset(world, protocol, cfg.test_samples, seed_for(cfg.seed, "test"))
    _run_step0(state)
    for k in range(1, protocol.num_steps + 1):
        _run_step(state, k)

    preds = _predict_flat(state.head, state.test_feats)
    cm = confusion_matrix(state.test_data.labels, preds, cfg.num_classes + 1)
    report = _build_report(cfg, original, cm, state, time.perf_counter() - start)
    return report, state


def _build_report(cfg: ExperimentConfig, protocol: ProtocolSpec, cm: np.ndarray, state: PipelineState, runtime: float) -> MetricsReport:
    initial = sorted(protocol.classes_at(0))
    incremental = sorted(set(protocol.all_classes) - set(initial))
    all_ids = sorted(protocol.all_classes) + ([BACKGROUND] if cfg.include_background else [])
    groups = {}
    excluded: set[int] = set()
    g_init, ex = mean_iou(cm, initial)
    excluded.update(ex)
    groups["initial"] = g_init
    if incremental:
        g_inc, ex = mean_iou(cm, incremental)
        excluded.update(ex)
        groups["incremental"] = g_inc
    else:
        groups["incremental"] = float("nan")
    g_all, ex = mean_iou(cm, all_ids)
    excluded.update(ex)
    groups["all"] = g_all
    ious = per_class_iou(cm)
    class_iou = {int(c): float(ious[c]) for c in range(cfg.num_classes + 1)}
    return MetricsReport(
        method=cfg.method,
        protocol=cfg.protocol_name,
        mode=cfg.mode,
        seed=cfg.seed,
        group_miou=groups,
        class_iou=class_iou,
        excluded_classes=tuple(sorted(excluded)),
        per_step=list(state.per_step_eval),
        include_background=cfg.include_background,
        config_fingerprint=cfg.fingerprint(),
        runtime_seconds=runtime,
    )


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    report, _ = run_pipeline(cfg)
    return report


def write_audit_log(path: str, state: PipelineState) -> None:
    """Audit trail as JSON lines: one record per pipeline stage."""
    with open(path, "w") as f:
        for rec in state.audit:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def write_filter_audit(path: str, state: PipelineState) -> None:
    """Per-pool-image filter decisions (scores, flags, fractions) as JSON
    lines, from the last replay build. No-op fields are simply absent."""
    replay = state.replay
    with open(path, "w") as f:
        for rec in (replay.audit if replay is not None else []):
            f.write(json.dumps(rec, sort_keys=True) + "\n")
