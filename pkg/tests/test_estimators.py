"""Effect estimators: identities, error contracts, and sampling behavior."""

import numpy as np
import pytest

from dynmed.environments import build_environment
from dynmed.estimators import (
    EFFECT_PAIRS,
    BaselineKind,
    EffectEstimate,
    baseline_effects,
    dm_effects,
    mis_effects,
    mr_effects,
    mr_effects_alternative,
    mr_influence,
    wald_ci,
)
from dynmed.mmdp import (
    HistoryKind,
    Regime,
    constant_policy,
    pool_tuples,
    simulate_dataset,
)
from dynmed.nuisance import oracle_nuisances
from dynmed.oracle import ExactOracle, exact_alternative_effects


def test_effect_pairs_cover_decomposition():
    assert list(EFFECT_PAIRS) == ["ide", "ime", "dde", "dme", "ate"]
    assert EFFECT_PAIRS["ate"] == (Regime.PI_E, Regime.PI_0)


def test_dm_reproduces_oracle_exactly(toy_nuisances, toy_oracle):
    est = dm_effects(toy_nuisances)
    assert est.estimator == "dm"
    for name, want in toy_oracle.effects.items():
        assert est.effect(name) == pytest.approx(want, abs=1e-12)
    assert est.ses is None


@pytest.mark.parametrize("maker", [
    lambda d, ns: dm_effects(ns),
    lambda d, ns: mis_effects(d, ns, ge_variant=1),
    lambda d, ns: mis_effects(d, ns, ge_variant=2),
    lambda d, ns: mr_effects(d, ns),
])
def test_telescoping_identity(toy_data, toy_nuisances, maker):
    est = maker(toy_data, toy_nuisances)
    total = sum(est.effect(k) for k in ("ide", "ime", "dde", "dme"))
    assert total == pytest.approx(est.effect("ate"), abs=1e-12)


def test_mis_estimates_near_truth(toy, toy_oracle):
    """MIS with exact weights is consistent; check at a generous 4 SEs using
    the spread over seeds."""
    ests = {1: [], 2: []}
    for seed in range(30):
        data = pool_tuples(simulate_dataset(toy.spec, toy.behavior, 100, 50,
                                            seed=seed))
        ns = oracle_nuisances(toy.spec, toy.target, toy.control, toy.behavior,
                              with_alternative=False)
        for v in (1, 2):
            ests[v].append(mis_effects(data, ns, ge_variant=v).effects())
    for v in (1, 2):
        for name, want in toy_oracle.effects.items():
            vals = np.array([e[name] for e in ests[v]])
            se = vals.std(ddof=1) / np.sqrt(len(vals))
            assert abs(vals.mean() - want) <= 4 * se, (v, name)


def test_mr_unbiased_with_exact_nuisances(toy, toy_oracle, toy_nuisances):
    ests = []
    for seed in range(40):
        data = pool_tuples(simulate_dataset(toy.spec, toy.behavior, 100, 50,
                                            seed=seed))
        ests.append(mr_effects(data, toy_nuisances).effects())
    for name, want in toy_oracle.effects.items():
        vals = np.array([e[name] for e in ests])
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - want) <= 3.5 * se, name


def test_mr_reports_influence_based_ses(toy_data, toy_nuisances):
    est = mr_effects(toy_data, toy_nuisances)
    assert set(est.ses) == {"ide", "ime", "dde", "dme", "ate"}
    assert all(v > 0 for v in est.ses.values())
    assert est.n_tuples == len(toy_data)
    # SEs shrink like 1/sqrt(n): quadruple the data, halve the SE (roughly)
    toy = build_environment("toy")
    big = pool_tuples(simulate_dataset(toy.spec, toy.behavior, 400, 50, seed=7))
    est_big = mr_effects(big, toy_nuisances)
    for k in est.ses:
        assert est_big.ses[k] < 0.8 * est.ses[k]


def test_mr_influence_record_consistency(toy_data, toy_nuisances):
    rec = mr_influence(toy_data, toy_nuisances)
    etas = rec.eta_estimates()
    est = mr_effects(toy_data, toy_nuisances)
    for reg in Regime:
        assert est.etas[reg.value] == pytest.approx(etas[reg], abs=1e-12)
    psi = rec.effect_influence("ate")
    assert psi.shape == (len(toy_data),)
    assert est.effect("ate") == pytest.approx(
        etas[Regime.PI_E] - etas[Regime.PI_0], abs=1e-12)


def test_permutation_invariance(toy_data, toy_nuisances):
    rng = np.random.default_rng(3)
    perm = rng.permutation(len(toy_data))
    shuffled = toy_data[perm]
    for maker in (lambda d: mis_effects(d, toy_nuisances),
                  lambda d: mr_effects(d, toy_nuisances)):
        a, b = maker(toy_data), maker(shuffled)
        for k in ("ide", "ime", "dde", "dme", "ate"):
            assert a.effect(k) == pytest.approx(b.effect(k), abs=1e-12)


def test_estimators_deterministic(toy_data, toy_nuisances):
    a = mr_effects(toy_data, toy_nuisances)
    b = mr_effects(toy_data, toy_nuisances)
    assert a.effects() == b.effects()
    assert a.ses == b.ses


def test_zero_effects_with_shared_degenerate_policy(toy):
    """pi_e = pi_0 = always-0 collapses every regime onto one process."""
    always0 = constant_policy("a0", [1.0, 0.0])
    ns = oracle_nuisances(toy.spec, always0, always0, toy.behavior)
    data = pool_tuples(simulate_dataset(toy.spec, toy.behavior, 100, 50, seed=11))
    for est in (dm_effects(ns), mis_effects(data, ns), mr_effects(data, ns)):
        for k in ("ide", "ime", "dde", "dme", "ate"):
            assert abs(est.effect(k)) < 1e-10, (est.estimator, k)


def test_wald_ci_arithmetic():
    est = EffectEstimate(
        estimator="mr", ide=-0.085, ime=0.0, dde=0.0, dme=0.0, ate=0.0,
        etas={}, ses={"ide": 0.034, "ime": 1.0, "dde": 1.0, "dme": 1.0,
                      "ate": 1.0})
    lo, hi = wald_ci(est, 0.95)["ide"]
    assert lo == pytest.approx(-0.085 - 1.959963984540054 * 0.034, abs=1e-9)
    assert hi == pytest.approx(-0.085 + 1.959963984540054 * 0.034, abs=1e-9)
    with pytest.raises(ValueError):
        wald_ci(dm_effects_without_ses(), 0.95)
    with pytest.raises(ValueError):
        wald_ci(est, 1.5)


def dm_effects_without_ses():
    return EffectEstimate(estimator="dm", ide=0, ime=0, dde=0, dme=0, ate=0,
                          etas={})


def test_mr_alternative_matches_swapped_oracle(toy, toy_data, toy_nuisances):
    alt = mr_effects_alternative(toy_data, toy_nuisances)
    primary = mr_effects(toy_data, toy_nuisances)
    # both decompositions estimate the same total effect
    assert alt.effect("ate") == pytest.approx(primary.effect("ate"), abs=1e-10)
    total = sum(alt.effect(k) for k in ("ide", "ime", "dde", "dme"))
    assert total == pytest.approx(alt.effect("ate"), abs=1e-12)
    # sanity against the exact alternative decomposition
    want = exact_alternative_effects(toy.spec, toy.target, toy.control)
    for k, se in alt.ses.items():
        assert alt.effect(k) == pytest.approx(want[k], abs=4 * se)


def test_mr_alternative_requires_swapped_bundle(toy, toy_data):
    ns = oracle_nuisances(toy.spec, toy.target, toy.control, toy.behavior,
                          with_alternative=False)
    with pytest.raises(ValueError):
        mr_effects_alternative(toy_data, ns)


def test_baselines_valid_without_state_pathway(toy_iid):
    """Single-stage baselines are consistent when the state chain is
    exogenous (i.i.d.), where the dynamic terms they ignore vanish."""
    env = toy_iid
    oc = ExactOracle(env.spec, env.target, env.control, env.behavior)
    ns = oracle_nuisances(env.spec, env.target, env.control, env.behavior,
                          with_alternative=False)
    for kind in BaselineKind:
        vals = []
        for seed in range(30):
            data = pool_tuples(simulate_dataset(env.spec, env.behavior,
                                                100, 50, seed=seed))
            vals.append(baseline_effects(data, ns, kind))
        arr = np.array(vals)
        for j, name in enumerate(("ide", "ime")):
            se = arr[:, j].std(ddof=1) / np.sqrt(len(arr))
            assert abs(arr[:, j].mean() - oc.effects[name]) <= 3.5 * se, \
                (kind, name)


def test_baselines_biased_with_state_pathway(toy, toy_oracle, toy_nuisances):
    """On the full toy chain the same baselines miss by many SEs."""
    for kind in BaselineKind:
        vals = []
        for seed in range(30):
            data = pool_tuples(simulate_dataset(toy.spec, toy.behavior,
                                                100, 50, seed=seed))
            vals.append(baseline_effects(data, toy_nuisances, kind))
        arr = np.array(vals)
        ide_se = arr[:, 0].std(ddof=1) / np.sqrt(len(arr))
        assert abs(arr[:, 0].mean() - toy_oracle.effects["ide"]) > 3 * ide_se, kind


def test_effect_estimate_serialization(toy_data, toy_nuisances):
    est = mr_effects(toy_data, toy_nuisances)
    import json

    parsed = json.loads(est.to_json())
    assert parsed["estimator"] == "mr"
    assert parsed["effects"]["ate"] == pytest.approx(est.effect("ate"))
    assert set(parsed["ses"]) == {"ide", "ime", "dde", "dme", "ate"}


def test_missing_nuisances_raise(toy_data, toy_nuisances):
    import dataclasses

    no_ratio = dataclasses.replace(
        toy_nuisances,
        ratio={k: v for k, v in toy_nuisances.ratio.items()
               if k is not HistoryKind.MIXED})
    with pytest.raises(ValueError):
        mis_effects(toy_data, no_ratio)
    no_q = dataclasses.replace(
        toy_nuisances,
        q={k: v for k, v in toy_nuisances.q.items() if k is not Regime.G_E})
    with pytest.raises(ValueError):
        mr_effects(toy_data, no_q)
