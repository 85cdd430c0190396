"""Revealed-preference rationalizability tests under measurement error.

Deterministic Afriat/GARP checks, maximum-entropy moment integration
over latent measurement error with hit-and-run MCMC, a chi-square
moment test, synthetic-panel replication, and counterfactual support
sets by test inversion.
"""

from .panel import (
    EffectivePricePanel,
    LatentDraw,
    Model,
    ModelSpec,
    Observation,
    Panel,
    PanelFormatError,
    SupportViolation,
    effective_prices,
    load_panel,
    save_panel,
    true_quantities,
)
from .deterministic import (
    AfriatResult,
    BrowningResult,
    GarpResult,
    SlacknessReport,
    afriat_feasible,
    browning_grid_test,
    check_garp,
    slackness_bound,
)
from .moments import (
    AverageVarian,
    BudgetNeutrality,
    BudgetShare,
    Component,
    ConsumptionChange,
    DiscountSupport,
    ExpectedTrueConsumption,
    InequalityWithSlack,
    Instrument,
    LogPriceCentering,
    MartingaleIncrements,
    MeanDiscount,
    MomentNameError,
    MomentSpec,
    PriceMisperception,
    QuantileVarian,
    TremblingHand,
    evaluate_g_C,
    evaluate_g_I,
    evaluate_g_M,
    evaluate_g_R,
    inequality_slacks,
    parse_moment_tokens,
)
from .sampler import ChainConfig, MomentIntegrator, initial_point, \
    rejection_sampler
from .elvis import (
    TestResult,
    confidence_set,
    generalized_inverse,
    minimize_ts,
    objective,
    sample_moment_and_variance,
)
from .montecarlo import (
    BrowningTest,
    DgpSpec,
    ElvisTest,
    ReplicationResult,
    generate,
    generate_with_truth,
    replicate,
)
from .counterfactual import (
    CounterfactualQuery,
    SupportSet,
    extended_test,
    extended_ts,
    support_set,
)

__version__ = "0.1.0"

__all__ = [
    "AfriatResult", "AverageVarian", "BrowningResult", "BrowningTest",
    "BudgetNeutrality", "BudgetShare", "ChainConfig", "Component",
    "ConsumptionChange", "CounterfactualQuery", "DgpSpec", "DiscountSupport",
    "EffectivePricePanel", "ElvisTest", "ExpectedTrueConsumption",
    "GarpResult", "InequalityWithSlack", "Instrument", "LatentDraw", "LogPriceCentering",
    "MartingaleIncrements", "MeanDiscount", "Model", "ModelSpec",
    "MomentIntegrator", "MomentNameError", "MomentSpec", "Observation",
    "Panel", "PanelFormatError", "PriceMisperception", "QuantileVarian",
    "ReplicationResult", "SlacknessReport", "SupportSet", "SupportViolation",
    "TestResult", "TremblingHand", "afriat_feasible", "browning_grid_test",
    "check_garp", "confidence_set", "effective_prices", "evaluate_g_C",
    "evaluate_g_I", "evaluate_g_M", "evaluate_g_R", "extended_test",
    "extended_ts", "generalized_inverse", "generate", "generate_with_truth",
    "inequality_slacks", "initial_point", "load_panel", "minimize_ts",
    "objective", "parse_moment_tokens", "rejection_sampler", "replicate",
    "sample_moment_and_variance", "save_panel", "slackness_bound",
    "support_set", "true_quantities",
]
