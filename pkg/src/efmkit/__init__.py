"""Feature-map lifting for interpretable linear models on low-dimensional data.

The package maps inputs through exact polynomial or truncated Gaussian
feature expansions, then trains incremental linear classifiers, anchor-based
spectral clusterings, and Shapley explanations in the lifted space, with a
micro-averaged evaluation harness for pixel-wise binary segmentation.
"""

from .clustering import (
    AnchorSet,
    ClusterAssignment,
    SparseBipartiteAffinity,
    build_bipartite_affinity,
    cluster_pixels,
    kmeans,
    map_clusters_to_classes,
    median_filter,
    select_anchors,
    spectral_embed,
)
from .data import (
    PixelDataset,
    RunConfig,
    load_image,
    load_mask,
    load_run_config,
    load_table,
    patch_stream,
    save_image,
    save_mask,
    save_table,
    synth_generate,
)
from .ensemble import (
    Ensemble,
    HyperGrid,
    ensemble_from_json,
    ensemble_to_json,
    select_member,
    train_ensemble,
    vote,
    vote_batch,
)
from .errors import (
    AmbiguousMaskError,
    CapacityError,
    DegenerateSubsetWarning,
    EfmKitError,
    FormatError,
    IsolatedPointError,
    LabelError,
    NoDataError,
    ParameterError,
    ShapeError,
)
from .explain import (
    Background,
    ShapleyExplanation,
    average_contributions,
    efficiency,
    shapley_empirical_conditional,
    shapley_linear_marginal,
)
from .feature_map import (
    FeatureMapSpec,
    approximation_error,
    enumerate_multi_indices,
    expand,
    expansion_dim,
    feature_names_for,
    gaussian_aefm,
    kernel_eval,
    monomial_names,
    polynomial_efm,
    transform_batch,
)
from .linear_model import (
    LabeledBatch,
    LinearModel,
    Standardizer,
    TrainConfig,
    decision,
    decision_batch,
    feature_space_form,
    fit_standardizer,
    model_from_json,
    model_to_json,
    new_model,
    partial_fit,
    predict,
    predict_batch,
    train_streaming,
)
# the metrics() function itself stays in efmkit.metrics so the submodule name
# remains importable as an attribute
from .metrics import ConfusionCounts, MetricReport, TTestResult, accumulate, ttest2

__version__ = "0.1.0"
