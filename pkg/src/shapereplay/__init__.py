"""Class-incremental semantic segmentation with simulated web replay,
evaluated on a deterministic synthetic shape world."""

from .config import ExperimentConfig, load_config, save_config
from .eval_report import (
    MetricsReport,
    confusion_matrix,
    emit_report,
    fill_deltas,
    forgetting_delta,
    mean_iou,
    per_class_iou,
)
from .inpaint import InpaintContext, background_inpaint, knowledge_inpaint
from .replay_source import ReplayFilters, ReplaySet, build_replay_set, dedup, pseudo_label, psnr
from .seeds import rng_for, seed_for
from .segmodel import (
    DecoderHead,
    Encoder,
    TrainSchedule,
    cross_entropy,
    expand_head,
    init_head,
    load_head,
    poly_lr,
    predict_labels,
    predict_logits,
    save_head,
    train_head,
)
from .selection import (
    CoreSetRule,
    Discriminator,
    EmpiricalCDF,
    SizeThreshold,
    adversarial_filter,
    class_size_cdf,
    core_mask,
    disc_score,
    semantic_filter,
    size_threshold,
    train_discriminator,
)
from .shapeworld import (
    BACKGROUND,
    ProtocolSpec,
    SceneSpec,
    TaskDataset,
    WebNoiseProfile,
    WorldSpec,
    default_world,
    generate_eval_dataset,
    generate_task_dataset,
    protocol_from_sizes,
    render_scene,
    web_query,
)
from .trainer import InterleaveSpec, PipelineState, interleave_batches, run_experiment, run_pipeline

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
