"""Effect estimators, meta-analysis and missing-data tools."""
from .effects import (
    EffectEstimate,
    InsufficientData,
    InteractionTest,
    PositivityError,
    aipw,
    conditional_or,
    crude,
    estimate,
    estimate_from_interval,
    g_computation,
    heterogeneity_interaction,
    ipw_marginal,
    ipw_participation,
    pooled_analysis,
    replication_analysis,
)
from .logistic import FitResult, RankDeficientError, fit_logistic
from .meta import MetaResult, meta_fixed_random
from .missing import (
    PER_COHORT,
    POOLED_WITH_INDICATOR,
    ImputationError,
    RubinResult,
    complete_case,
    multiple_impute,
    rubin_pool,
)

__all__ = [
    "EffectEstimate", "InsufficientData", "InteractionTest", "PositivityError", "aipw", "conditional_or",
    "crude", "estimate", "estimate_from_interval", "g_computation", "heterogeneity_interaction",
    "ipw_marginal", "ipw_participation", "pooled_analysis", "replication_analysis", "FitResult",
    "RankDeficientError", "fit_logistic", "MetaResult", "meta_fixed_random", "PER_COHORT",
    "POOLED_WITH_INDICATOR", "ImputationError", "RubinResult", "complete_case", "multiple_impute",
    "rubin_pool",
]
