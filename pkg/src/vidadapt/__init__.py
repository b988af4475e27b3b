from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    EvaluationError,
    FlowError,
    NumericalError,
    ShapeError,
    VidAdaptError,
)
from .options import RunConfig, RunOptions, merge_options
from .synthdata import (
    ClipSpec,
    DomainShift,
    VideoClip,
    SOURCE_SHIFT,
    TARGET_SHIFT,
    apply_domain_shift,
    generate_clip,
    generate_dataset,
    load_dataset,
    write_dataset,
)
from .flowwarp import (
    FlowDirection,
    FlowField,
    ValidityMask,
    backward_warp,
    estimate_flow,
    occlusion_mask,
    warp_labels,
)
from .segnet import SegModel, SegModelConfig, forward_pair, init_params, load_checkpoint, save_checkpoint
from .discriminators import Discriminator, DiscConfig, build_discriminators, disc_forward
from .losses import LossBundle, assemble_objective, loss_itcr, loss_sa, loss_ssl, loss_sta, loss_wd
from .trainer import MODE_TERMS, TrainConfig, Trainer, poly_lr, run_training
from .evalkit import ConfusionMatrix, EvalResult, evaluate_clips, miou

__all__ = [
    # Errors
    "VidAdaptError",
    "ConfigError",
    "DatasetError",
    "ShapeError",
    "FlowError",
    "CheckpointError",
    "NumericalError",
    "EvaluationError",
    # Configuration
    "RunConfig",
    "RunOptions",
    "merge_options",
    # Data
    "ClipSpec",
    "DomainShift",
    "VideoClip",
    "SOURCE_SHIFT",
    "TARGET_SHIFT",
    "generate_clip",
    "apply_domain_shift",
    "generate_dataset",
    "write_dataset",
    "load_dataset",
    # Flow
    "FlowDirection",
    "FlowField",
    "ValidityMask",
    "backward_warp",
    "warp_labels",
    "estimate_flow",
    "occlusion_mask",
    # Networks
    "SegModel",
    "SegModelConfig",
    "init_params",
    "forward_pair",
    "save_checkpoint",
    "load_checkpoint",
    "Discriminator",
    "DiscConfig",
    "build_discriminators",
    "disc_forward",
    # Training
    "LossBundle",
    "loss_ssl",
    "loss_sa",
    "loss_sta",
    "loss_wd",
    "loss_itcr",
    "assemble_objective",
    "MODE_TERMS",
    "TrainConfig",
    "Trainer",
    "poly_lr",
    "run_training",
    # Evaluation
    "ConfusionMatrix",
    "EvalResult",
    "miou",
    "evaluate_clips",
]
