"""Misspecification scenarios and the single-stage optimal-policy estimator.

Robustness experiments start from exact (tabular) nuisances and selectively
perturb everything *outside* one protected model set:

- M1 protects (omega for the target chain, behavior policy, reward model),
- M2 protects (all three stationary ratios, behavior policy, mediator law),
- M3 protects (the five Q/eta pairs, reward model, mediator law).

``OnlyM1`` etc. corrupt the complement of the protected set, ``AllWrong``
corrupts everything, ``AllCorrect`` nothing.  Perturbation magnitudes follow
the misspecification recipe: fixed +/-shifts for ratios, additive Gaussian
noise for reward/Q tables, multiplicative-then-clipped noise for probability
tables.
"""

from __future__ import annotations

import enum

import numpy as np

from .estimators import EffectEstimate, mr_effects
from .mmdp import HistoryKind, Policy, Regime, REGIME_ORDER, TupleBatch, pool_tuples
from .nuisance import (
    NuisanceConfig,
    NuisanceSet,
    TabularBehaviorModel,
    TabularMediatorModel,
    TabularQModel,
    TabularRatioModel,
    TabularRewardModel,
    default_pair_features,
    expected_q_over_mediator,
    fit_behavior,
    fit_mediator,
    fit_nuisances,
    fit_q_eta,
    fit_reward,
)


class CorruptionScenario(str, enum.Enum):
    ALL_CORRECT = "all-correct"
    ONLY_M1 = "m1"
    ONLY_M2 = "m2"
    ONLY_M3 = "m3"
    ALL_WRONG = "all-wrong"


_COMPONENTS = ("omega_target", "omega_control", "omega_mixed",
               "behavior", "mediator", "reward", "q")

_PROTECTED = {
    CorruptionScenario.ALL_CORRECT: set(_COMPONENTS),
    CorruptionScenario.ONLY_M1: {"omega_target", "behavior", "reward"},
    CorruptionScenario.ONLY_M2: {"omega_target", "omega_control",
                                 "omega_mixed", "behavior", "mediator"},
    CorruptionScenario.ONLY_M3: {"q", "reward", "mediator"},
    CorruptionScenario.ALL_WRONG: set(),
}

# ratio corruption: additive shift applied at state 1, negated at state 0
_RATIO_SHIFT = {"omega_target": 0.25, "omega_control": -0.3,
                "omega_mixed": -0.3}
_TABLE_NOISE_SD = 0.5
_PROB_CLIP = (0.01, 0.99)


def _shift_ratio(model: TabularRatioModel, shift: float) -> TabularRatioModel:
    states = model.tab.states
    if states.shape[1] != 1:
        raise ValueError("ratio corruption is defined for scalar binary states")
    signs = np.where(states[:, 0] > 0.5, 1.0, -1.0)
    return TabularRatioModel(model.tab, model.values + shift * signs)


def _noise_table(table: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return table + _TABLE_NOISE_SD * rng.standard_normal(table.shape)


def _scale_prob_table(table: np.ndarray, rng: np.random.Generator,
                      axis: int) -> np.ndarray:
    """Multiply the 'positive' slice by U(.5,1.5), clip, renormalize pairs."""
    if table.shape[axis] != 2:
        raise ValueError("probability corruption expects binary tables")
    p1 = np.take(table, 1, axis=axis)
    u = rng.uniform(0.5, 1.5, size=p1.shape)
    p1 = np.clip(p1 * u, *_PROB_CLIP)
    out = np.stack([1.0 - p1, p1], axis=axis)
    return out


def corrupt_nuisances(nuisances: NuisanceSet, scenario: CorruptionScenario,
                      seed: int = 0) -> NuisanceSet:
    """Return a copy with every unprotected component perturbed.

    Only table-backed (exact) nuisance sets are supported; the perturbations
    are defined directly on the tables.
    """
    scenario = CorruptionScenario(scenario)
    for attr, cls in (("behavior", TabularBehaviorModel),
                      ("mediator", TabularMediatorModel),
                      ("reward", TabularRewardModel)):
        if not isinstance(getattr(nuisances, attr), cls):
            raise ValueError("corruption requires exact tabular nuisances")
    protected = _PROTECTED[scenario]
    # one stream per component so a component's perturbation depends only on
    # the seed, not on which other components the scenario happens to corrupt
    streams = {name: np.random.default_rng(np.random.SeedSequence([seed, i]))
               for i, name in enumerate(_COMPONENTS)}
    provenance = dict(nuisances.provenance)

    ratio_keys = {"omega_target": HistoryKind.TARGET,
                  "omega_control": HistoryKind.CONTROL,
                  "omega_mixed": HistoryKind.MIXED}
    ratio = dict(nuisances.ratio)
    for name, kind in ratio_keys.items():
        if name not in protected:
            ratio[kind] = _shift_ratio(ratio[kind], _RATIO_SHIFT[name])
            provenance[name] = f"corrupted:shift{_RATIO_SHIFT[name]:+g}"
        else:
            provenance[name] = "oracle"

    behavior = nuisances.behavior
    if "behavior" not in protected:
        behavior = TabularBehaviorModel(
            behavior.tab,
            _scale_prob_table(behavior.table, streams["behavior"], axis=1))
        provenance["behavior"] = "corrupted:scale"

    mediator = nuisances.mediator
    if "mediator" not in protected:
        mediator = TabularMediatorModel(
            mediator.tab,
            _scale_prob_table(mediator.table, streams["mediator"], axis=2))
        provenance["mediator"] = "corrupted:scale"

    reward = nuisances.reward
    if "reward" not in protected:
        reward = TabularRewardModel(
            reward.tab, _noise_table(reward.table, streams["reward"]))
        provenance["reward"] = f"corrupted:noise{_TABLE_NOISE_SD:g}"

    q = dict(nuisances.q)
    if "q" not in protected:
        # the (Q, eta) pair of each regime is perturbed jointly
        rng_q = streams["q"]
        for reg in REGIME_ORDER:
            old = q[reg]
            q[reg] = TabularQModel(old.tab, _noise_table(old.table, rng_q),
                                   old.eta + _TABLE_NOISE_SD
                                   * rng_q.standard_normal())
        provenance["q"] = f"corrupted:noise{_TABLE_NOISE_SD:g}"

    return NuisanceSet(
        pi_e=nuisances.pi_e, pi_0=nuisances.pi_0, behavior=behavior,
        mediator=mediator, reward=reward, ratio=ratio, q=q,
        provenance=provenance, swapped=None,
        mc_draws=nuisances.mc_draws, seed=nuisances.seed,
    )


# ---------------------------------------------------------------------------
# single-stage optimal policy
# ---------------------------------------------------------------------------

def estimate_optimal_policy(data: TupleBatch, spec,
                            config: NuisanceConfig | None = None) -> Policy:
    """Greedy policy from a Q-function fitted on the behavior data.

    The Q fit reuses the sieve Bellman machinery with the next step taken
    under the (fitted) behavior policy itself; the returned policy picks
    argmax_a E_{m|s,a} Q(s, a, m), ties toward the smaller action index.
    """
    if config is None:
        config = NuisanceConfig()
    K = spec.n_actions
    behavior = fit_behavior(data, config.prob_clip)
    behavior_policy = Policy("behavior_fit", lambda s: behavior.probs(s), K)
    mediator = fit_mediator(data, spec.mediator_kind, spec.tabular,
                            config.prob_clip)
    reward = fit_reward(data, spec.state_kind, K, spec.tabular)
    phi = default_pair_features(spec, data, config)
    ridge = config.ridge_q
    if ridge == "auto":
        ridge = 1e-8 if spec.is_finite else "cv"
    qmodel = fit_q_eta(data, Regime.PI_E, mediator, reward, behavior_policy,
                       behavior_policy, phi, K, ridge, config.ridge_grid,
                       config.cv_folds, config.mc_draws, config.rng(71))
    mc_draws = config.mc_draws
    rng_tag = config.seed

    def greedy_probs(s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(s)
        rng = np.random.default_rng(np.random.SeedSequence([rng_tag, 72]))
        vals = np.column_stack([
            expected_q_over_mediator(qmodel, s, a, a, mediator, mc_draws, rng)
            for a in range(K)
        ])
        out = np.zeros((s.shape[0], K))
        out[np.arange(s.shape[0]), np.argmax(vals, axis=1)] = 1.0
        return out

    return Policy("greedy_fit", greedy_probs, K)


def crossfit_policy_value(trajectories, spec, pi_0: Policy,
                          config: NuisanceConfig | None = None,
                          folds: int = 2) -> EffectEstimate:
    """Evaluate the estimated optimal policy with cross-fitting.

    The trajectories are split into ``folds`` groups; each group's policy
    estimate is evaluated by the multiply robust estimator on the remaining
    trajectories, and the fold results are averaged (variances pooled).
    """
    if len(trajectories) < folds:
        raise ValueError("need at least as many trajectories as folds")
    if config is None:
        config = NuisanceConfig()
    idx = np.array_split(np.arange(len(trajectories)), folds)
    fold_results = []
    for k in range(folds):
        fit_trajs = [trajectories[i] for i in idx[k]]
        eval_trajs = [trajectories[i] for i in range(len(trajectories))
                      if i not in set(idx[k].tolist())]
        policy = estimate_optimal_policy(pool_tuples(fit_trajs), spec, config)
        eval_data = pool_tuples(eval_trajs)
        ns = fit_nuisances(eval_data, spec, policy, pi_0, config)
        fold_results.append(mr_effects(eval_data, ns))
    names = ("ide", "ime", "dde", "dme", "ate")
    eff = {n: float(np.mean([r.effect(n) for r in fold_results])) for n in names}
    ses = {n: float(np.sqrt(np.mean([r.ses[n] ** 2 for r in fold_results])
                            / folds)) for n in names}
    etas = {key: float(np.mean([r.etas[key] for r in fold_results]))
            for key in fold_results[0].etas}
    return EffectEstimate(
        estimator="crossfit_mr", ide=eff["ide"], ime=eff["ime"],
        dde=eff["dde"], dme=eff["dme"], ate=eff["ate"], etas=etas, ses=ses,
        n_tuples=sum(r.n_tuples for r in fold_results),
    )
