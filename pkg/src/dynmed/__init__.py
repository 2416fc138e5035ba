"""Dynamic mediation analysis for mediated Markov decision processes.

Simulation, exact and Monte Carlo ground truth, nuisance estimation, and
direct-method / marginalized-importance-sampling / multiply-robust estimators
of the four-way average treatment effect decomposition (IDE, IME, DDE, DME)
over infinite horizons.
"""

from .mmdp import (
    EFFECT_NAMES,
    HistoryKind,
    MmdpSpec,
    Policy,
    PseudoRewardKind,
    Regime,
    REGIME_ORDER,
    Trajectory,
    TransitionTuple,
    TupleBatch,
    constant_policy,
    deterministic_policy,
    logistic_policy,
    pool_tuples,
    sample_interventional_trajectory,
    sample_trajectory,
    simulate_dataset,
)
from .environments import ENV_IDS, EnvironmentBundle, build_environment
from .oracle import (
    ExactOracle,
    OracleValues,
    exact_alternative_effects,
    exact_tabular_oracle,
    mc_oracle,
)
from .nuisance import (
    NuisanceConfig,
    NuisanceSet,
    fit_behavior,
    fit_mediator,
    fit_nuisances,
    fit_q_eta,
    fit_ratio,
    fit_reward,
    mediator_ratio,
    oracle_nuisances,
)
from .estimators import (
    BaselineKind,
    EFFECT_PAIRS,
    EffectEstimate,
    InfluenceRecord,
    baseline_effects,
    dm_effects,
    mis_effects,
    mr_effects,
    mr_effects_alternative,
    mr_influence,
    wald_ci,
)
from .scenarios import (
    CorruptionScenario,
    corrupt_nuisances,
    crossfit_policy_value,
    estimate_optimal_policy,
)
from .harness import (
    ESTIMATOR_IDS,
    EmitFormat,
    ExperimentConfig,
    MetricsRow,
    emit,
    load_rows,
    reference_effects,
    run_experiment,
)

__all__ = [
    "BaselineKind",
    "CorruptionScenario",
    "EFFECT_NAMES",
    "EFFECT_PAIRS",
    "ENV_IDS",
    "ESTIMATOR_IDS",
    "EffectEstimate",
    "EmitFormat",
    "EnvironmentBundle",
    "ExactOracle",
    "ExperimentConfig",
    "HistoryKind",
    "InfluenceRecord",
    "MetricsRow",
    "MmdpSpec",
    "NuisanceConfig",
    "NuisanceSet",
    "OracleValues",
    "Policy",
    "PseudoRewardKind",
    "Regime",
    "REGIME_ORDER",
    "Trajectory",
    "TransitionTuple",
    "TupleBatch",
    "baseline_effects",
    "build_environment",
    "constant_policy",
    "corrupt_nuisances",
    "crossfit_policy_value",
    "deterministic_policy",
    "dm_effects",
    "emit",
    "estimate_optimal_policy",
    "exact_alternative_effects",
    "exact_tabular_oracle",
    "fit_behavior",
    "fit_mediator",
    "fit_nuisances",
    "fit_q_eta",
    "fit_ratio",
    "fit_reward",
    "load_rows",
    "logistic_policy",
    "mc_oracle",
    "mediator_ratio",
    "mis_effects",
    "mr_effects",
    "mr_effects_alternative",
    "mr_influence",
    "oracle_nuisances",
    "pool_tuples",
    "reference_effects",
    "run_experiment",
    "sample_interventional_trajectory",
    "sample_trajectory",
    "simulate_dataset",
    "wald_ci",
]

__version__ = "0.1.0"
