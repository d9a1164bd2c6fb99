"""dissect3d: network dissection for 3D fracture-classification CNNs.

Given per-sample activation tensors from a classifier's final convolutional
layer plus a labeled manifest, this package fits per-unit top-quantile
thresholds, ranks units by their correlation with fractured samples, scores
unit relevance for single inferences, and renders the visual explanations
(slice overlays, collages, inference reports) served to the explorer UI.
"""

from .dissection import (
    ActivationVolume,
    CorrelationRanking,
    Metrics,
    RelevanceRanking,
    UnitThresholds,
    binarize,
    compute_metrics,
    correlation_scores,
    enabled_units,
    fit_thresholds,
    relevance_scores,
)
from .manifest import DatasetIndex, SampleEntry, load_manifest, save_manifest
from .quantiles import QuantileSketch
from .tensor_io import (
    Volume,
    load_nifti,
    load_tensor,
    read_nifti,
    read_tensor,
    save_nifti,
    save_tensor,
    write_nifti,
    write_tensor,
)
from .volume_prep import (
    CentroidSet,
    PatchVolume,
    SpineSpline,
    build_spline,
    extract_patch,
    filter_vertebrae,
    normalize_hu,
)

__version__ = "0.1.0"
