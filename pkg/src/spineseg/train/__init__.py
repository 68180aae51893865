from .folds import FoldPlan, make_folds
from .cps import (
    CutMixSpec,
    Stage1Trainer,
    cps_loss,
    cutmix_pair,
    generate_pseudo_labels,
    sample_cutmix,
    supervised_loss,
    train_step_2d,
)
from .cache import Stage1Artifacts, compute_stage1_artifacts, load_stage1_cache, save_stage1_cache
from .stage2 import Stage2Trainer

__all__ = [
    "FoldPlan",
    "make_folds",
    "CutMixSpec",
    "Stage1Trainer",
    "cps_loss",
    "cutmix_pair",
    "generate_pseudo_labels",
    "sample_cutmix",
    "supervised_loss",
    "train_step_2d",
    "Stage1Artifacts",
    "compute_stage1_artifacts",
    "load_stage1_cache",
    "save_stage1_cache",
    "Stage2Trainer",
]
