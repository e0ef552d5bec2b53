"""Weakly-supervised bag/patch classification with exact local receptive fields.

The package couples a small convolutional backbone whose features depend on
exactly one RF x RF input window with two classification branches sharing a
single linear head: per-patch logits and bag logits pooled over instances.
Dense per-pixel logit heatmaps make the decision process inspectable, and a
deterministic synthetic corpus with ground-truth masks makes localization
measurable end to end.
"""

from .autodiff import (
    GradCheckReport,
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    conv2d_valid,
    gradient_check,
    linear,
    mean_stack,
    record,
    relu,
    softmax,
    softmax_cross_entropy,
    spatial_gap,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import (
    MetricsReport,
    accuracy,
    evaluate_model,
    iou_at_threshold,
    kfold_splits,
    pointing_game,
    run_ablation,
)
from .heatmap import (
    LogitHeatmap,
    TilePlan,
    cam,
    export_heatmap,
    gradcam,
    logit_heatmap,
    plan_tiles,
    tiled_heatmap,
)
from .model import (
    Bag,
    ModelConfig,
    ToyBagNet,
    backbone_forward,
    expected_probe_window,
    mil_forward,
    receptive_field,
    rf_exactness_probe,
    sil_forward,
)
from .synthdata import (
    CorpusError,
    SynthConfig,
    SynthSample,
    export_corpus,
    generate_corpus,
    generate_sample,
    import_corpus,
    split_into_bag,
)
from .trainer import (
    AblationMode,
    AdamState,
    TrainConfig,
    adam_step,
    joint_loss,
    learning_rate,
    train,
)

__version__ = "0.1.0"
