from .api import ESTIMATORS, ActivationPatching, AttributionPatching, IntegratedGradients, RelevancePatching
from .estimators import AttributionResult, activation_patch, atp, expectation_over, integrated_gradients, relp
from .pairs import METRIC_VARIANTS, LogitDiff, Metric, PairError, ProbDiff, PromptPair, resolve_metric

__all__ = [
    "ESTIMATORS",
    "ActivationPatching",
    "AttributionPatching",
    "IntegratedGradients",
    "RelevancePatching",
    "AttributionResult",
    "activation_patch",
    "atp",
    "expectation_over",
    "integrated_gradients",
    "relp",
    "METRIC_VARIANTS",
    "LogitDiff",
    "Metric",
    "PairError",
    "ProbDiff",
    "PromptPair",
    "resolve_metric",
]
