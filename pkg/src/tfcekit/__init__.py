"""tfcekit: exact threshold-free cluster enhancement and max-statistic
nonparametric inference on masked voxel grids.

The score at each voxel is evaluated exactly — the threshold integral is
decomposed along a union-find merge forest instead of being approximated on
a fixed threshold ladder — and the same forest yields cluster extent and
mass statistics in the same pass.
"""

__version__ = "0.1.0"

from .enhance import (
    DiscretizationScheme,
    EnhancedMap,
    EnhanceParams,
    GeneralizedStatistic,
    discretized_tfce,
    exact_tfce,
    generalized_statistic,
)
from .forest import (
    ClusterRecord,
    ClusterTable,
    MergeForest,
    build_forest,
    clusters_at_threshold,
    phi_set,
)
from .inference import (
    ComparisonReport,
    InferenceResult,
    NullDistribution,
    PValueMap,
    RandomizationPlan,
    SubjectData,
    compare_pvalue_maps,
    one_sample_t,
    run_inference,
    two_sample_t,
)
from .nifti import NiftiFormatError, NiftiVolume, read_nifti, write_nifti
from .oracle import OracleConfig, enumerate_sign_flips, floodfill_clusters, riemann_tfce
from .volume import (
    Connectivity,
    GridShape,
    Mask,
    RankOrder,
    StatisticMap,
    build_mask,
    neighbors,
    rank_order,
)

__all__ = [
    "__version__",
    "GridShape",
    "Connectivity",
    "Mask",
    "StatisticMap",
    "RankOrder",
    "build_mask",
    "neighbors",
    "rank_order",
    "MergeForest",
    "ClusterRecord",
    "ClusterTable",
    "build_forest",
    "phi_set",
    "clusters_at_threshold",
    "EnhanceParams",
    "DiscretizationScheme",
    "GeneralizedStatistic",
    "EnhancedMap",
    "exact_tfce",
    "discretized_tfce",
    "generalized_statistic",
    "SubjectData",
    "RandomizationPlan",
    "NullDistribution",
    "PValueMap",
    "InferenceResult",
    "ComparisonReport",
    "one_sample_t",
    "two_sample_t",
    "run_inference",
    "compare_pvalue_maps",
    "OracleConfig",
    "floodfill_clusters",
    "riemann_tfce",
    "enumerate_sign_flips",
    "NiftiVolume",
    "NiftiFormatError",
    "read_nifti",
    "write_nifti",
]
