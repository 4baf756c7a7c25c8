"""Scaling, probability-integral and discretizing transforms."""

from .binning import (
    KINDS,
    BinningError,
    BinningSpec,
    bin_index,
    fit_bins,
    fit_linear_bins,
    fit_quantile_bins,
    lloyd_max,
    quantile_levels,
    reconstruct,
)
from .pipeline import (
    GlobalRelativeBinning,
    HybridBinning,
    LocalAbsoluteBinning,
    MeanScaling,
    PipelineError,
    PitTransform,
    RepresentationPipeline,
    ReprSpec,
    build_pipeline,
    fit_grb,
    fit_hybrid,
    fit_lab,
    fit_representation,
    log_abs_jacobian,
    parse_repr,
)
from .scaling import (
    AffineScale,
    EmpiricalCDF,
    apply_affine,
    fit_empirical_cdf,
    fit_mean_scale,
    fit_min_max_scale,
    fit_standard_scale,
    invert_affine,
    nearest_rank,
    pit,
    pit_inverse,
)
