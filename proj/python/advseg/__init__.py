"""Adversarial attacks on a toy segmentation network, with uncertainty-based detection."""

from ._advseg import (
    ConfigError,
    Detector,
    FormatError,
    NumericError,
    PathError,
    SegModel,
    ShapeError,
    ada_star,
    aggregate_features,
    apsr,
    auroc,
    dag,
    default_iterations,
    entropy_heatmap,
    fgsm,
    fit_crossa,
    fit_ellipse,
    fit_entropy,
    fit_ocsvm,
    generate_dataset,
    ifgsm,
    least_likely_target,
    pgd,
    probability_margin_heatmap,
    run_stage,
    tpr_at_fpr,
    variation_ratio_heatmap,
)

STAGES = ("generate", "train", "attack", "detect", "report")


def run_pipeline(config, out, force=False):
    """Runs every stage in order into `out`."""
    for stage in STAGES:
        run_stage(stage, config, out, force)
    return out


__all__ = [name for name in dir() if not name.startswith("_")]
