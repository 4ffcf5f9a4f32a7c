"""Scanner harmonization for 3D MR volumes: adversarial anatomy/scanner
disentanglement with a full evaluation and downstream-analysis stack."""

from .volume import Volume, WindowPlan, WindowSet, load_volume, merge_windows, normalize, save_volume, split_windows
from .phantom import PhantomSpec, ScannerEffect, apply_scanner_effect, generate_phantom, make_dataset
from .nets import ModelBundle, ScaleConfig
from .objective import LossReport, LossWeights, total_loss
from .engine import TrainConfig, elastic_augment, harmonize_scanner_free, harmonize_to_reference, train, train_step
from .metrics import (
    IntensityDistribution,
    ad_ksample,
    bootstrap_paired_ci,
    fid,
    hellinger,
    intensity_distribution,
    jsd,
    lpips,
    pairwise_report,
    ssim_pair,
    wasserstein1,
)
from .analysis import fit_age_lm_cv, fit_lmm, fit_logistic_auc, icc, pca_reduce, train_toy_classifier

__version__ = "0.1.0"

__all__ = [
    "Volume", "WindowPlan", "WindowSet", "normalize", "split_windows", "merge_windows",
    "load_volume", "save_volume",
    "PhantomSpec", "ScannerEffect", "generate_phantom", "apply_scanner_effect", "make_dataset",
    "ModelBundle", "ScaleConfig",
    "LossWeights", "LossReport", "total_loss",
    "TrainConfig", "train", "train_step", "harmonize_scanner_free", "harmonize_to_reference", "elastic_augment",
    "IntensityDistribution", "intensity_distribution", "jsd", "hellinger", "wasserstein1",
    "ssim_pair", "lpips", "fid", "ad_ksample", "bootstrap_paired_ci", "pairwise_report",
    "fit_age_lm_cv", "fit_lmm", "icc", "pca_reduce", "fit_logistic_auc", "train_toy_classifier",
    "__version__",
]
