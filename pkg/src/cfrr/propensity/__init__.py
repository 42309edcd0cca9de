from .gbdt import BoostedTrees, GbdtConfig, Tree, build_tree, fit_gbdt
from .model import (
    BASE_FEATURES,
    PairFeaturizer,
    PropensityConfig,
    PropensityModel,
    clip_weight,
    cross_validate,
    exposure_auc,
    featurize,
    fit_propensity,
    joint_reestimate,
    predict_theta,
    sample_unexposed,
    user_counts,
)
