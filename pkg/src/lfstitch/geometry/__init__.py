"""Two-view geometry: fundamental and essential matrices, rotation, scale."""

from .essential import (
    EssentialMatrix,
    PairGeometry,
    RotationEstimate,
    apply_orientation_correction,
    decompose_essential,
    essential_from_fundamental,
    estimate_relative_rotation,
    orientation_homography,
    rotation_angle_deg,
)
from .fundamental import (
    FundamentalMatrix,
    RefinementInfo,
    eight_point,
    ransac_fundamental,
    refine_fundamental_gold_standard,
    sampson_distance,
)
from .scale import (
    DepthClustering,
    SimilarityTransform,
    cluster_depths,
    cluster_values,
    estimate_scale_between,
    estimate_scale_within,
    estimate_similarity,
    fit_gmm_1d,
    silhouette_score,
)
