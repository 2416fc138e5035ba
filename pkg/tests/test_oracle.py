"""Ground-truth machinery: exact linear-algebra oracle and MC cross-checks."""

import numpy as np
import pytest

from dynmed.environments import build_environment
from dynmed.mmdp import HistoryKind, Regime, constant_policy
from dynmed.oracle import (
    ExactOracle,
    OracleValues,
    exact_alternative_effects,
    mc_oracle,
)

# exact toy values, frozen from the linear solve (stable to the last digit
# across BLAS builds at 1e-9)
TOY_EFFECTS = {
    "ide": -1.2766859610837646,
    "ime": -1.2224647640530120,
    "dde": -2.9822464386139770,
    "dme": -0.0846848984724780,
    "ate": -5.5660820622232320,
}
TOY_ETAS = {
    Regime.PI_E: 2.3970106515602376,
    Regime.G_E: 3.6736966126440027,
    Regime.PI_E0: 4.8961613766970140,
    Regime.G_0: 7.8784078153109900,
    Regime.PI_0: 7.9630927137834690,
}


def test_toy_exact_effects_and_etas(toy_oracle):
    for name, want in TOY_EFFECTS.items():
        assert toy_oracle.effects[name] == pytest.approx(want, abs=1e-9)
    for reg, want in TOY_ETAS.items():
        assert toy_oracle.etas[reg] == pytest.approx(want, abs=1e-9)


def test_effects_telescope_exactly(toy_oracle):
    e = toy_oracle.effects
    assert e["ide"] + e["ime"] + e["dde"] + e["dme"] == pytest.approx(
        e["ate"], abs=1e-12)
    etas = toy_oracle.etas
    assert e["ate"] == pytest.approx(
        etas[Regime.PI_E] - etas[Regime.PI_0], abs=1e-12)


def test_bellman_residuals_tiny(toy_oracle):
    for reg in Regime:
        assert toy_oracle.bellman_residual(reg) < 1e-10, reg


def test_q_tables_centered_under_stationary_law(toy_oracle):
    """The Poisson-equation solution is pinned by a stationary-mean-zero
    normalization over the (state, action, mediator) occupancy."""
    for reg in Regime:
        q = toy_oracle.q_tables[reg]
        kind = reg.history
        occ = np.einsum("s,sam->sam", toy_oracle.mu[kind],
                        toy_oracle.step_law[kind])
        assert abs((q * occ).sum()) < 1e-10, reg


def test_stationary_distributions(toy_oracle):
    for kind in HistoryKind:
        mu = toy_oracle.mu[kind]
        chain = toy_oracle.state_chain[kind]
        assert np.all(mu > 0)
        assert mu.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(mu @ chain, mu, atol=1e-12)
        # omega is the stationary ratio against the behavior chain
        assert np.allclose(toy_oracle.omega[kind], mu / toy_oracle.mu_b)


def test_rho_tables_normalize(toy_oracle, toy):
    """E[rho(S,A,M) | S, A] = 1 under the true mediator law."""
    tab = toy.spec.tabular
    for rho in (toy_oracle.rho, toy_oracle.rho2):
        cond = (tab.mediator_mass * rho).sum(axis=2)
        assert np.allclose(cond, 1.0, atol=1e-12)


def _truncated_q(oracle, toy, regime, horizon=4000):
    """Independent Poisson-equation check: partial sums of centered rewards."""
    tab = toy.spec.tabular
    pol = {Regime.PI_E: toy.target, Regime.PI_0: toy.control}[regime]
    pi = pol.probs(tab.states)  # (n_s, K)
    step = pi[:, :, None] * tab.mediator_mass  # joint (a, m) law given s
    rbar = (step * tab.reward_mean).sum(axis=(1, 2))
    chain = np.einsum("sam,samt->st", step, tab.transition)
    eta = oracle.etas[regime]
    v = np.zeros(tab.n_states)
    for _ in range(horizon):
        v = rbar - eta + chain @ v
    return tab.reward_mean - eta + tab.transition @ v


@pytest.mark.parametrize("regime", [Regime.PI_E, Regime.PI_0])
def test_q_matches_truncated_series(toy_oracle, toy, regime):
    series = _truncated_q(toy_oracle, toy, regime)
    assert np.allclose(series, toy_oracle.q_tables[regime], atol=1e-7)


def test_mc_oracle_agrees_with_exact(toy, toy_oracle):
    vals = mc_oracle(toy.spec, toy.target, toy.control, 400, 400, seed=1)
    assert vals.method == "mc"
    for name, exact in toy_oracle.effects.items():
        se = vals.effect_ses[name]
        # 4 SEs plus a small allowance for the O(1/T) initialization bias
        assert vals.effects[name] == pytest.approx(exact, abs=4 * se + 0.02)


def test_degenerate_policies_zero_effects(toy):
    always0 = constant_policy("a0", [1.0, 0.0])
    oc = ExactOracle(toy.spec, always0, always0, toy.behavior)
    for name, value in oc.effects.items():
        assert abs(value) < 1e-12, name


def test_alternative_decomposition_exact(toy, toy_oracle):
    alt = exact_alternative_effects(toy.spec, toy.target, toy.control)
    assert alt["ate"] == pytest.approx(toy_oracle.effects["ate"], abs=1e-12)
    assert alt["ide"] + alt["ime"] + alt["dde"] + alt["dme"] == pytest.approx(
        alt["ate"], abs=1e-12)
    # frozen values for the mediator-shift-first ordering
    want = {"ide": -1.2596, "ime": -2.2447, "dde": -1.9013, "dme": -0.1605}
    for name, v in want.items():
        assert alt[name] == pytest.approx(v, abs=2e-4)
    # the two orderings genuinely differ component-wise
    assert abs(alt["ime"] - toy_oracle.effects["ime"]) > 0.5


def test_toy_iid_removes_state_pathways(toy_iid):
    env = toy_iid
    oc = ExactOracle(env.spec, env.target, env.control, env.behavior)
    assert abs(oc.effects["dde"]) < 1e-12
    assert abs(oc.effects["dme"]) < 1e-12
    for kind in HistoryKind:
        assert np.allclose(oc.omega[kind], 1.0, atol=1e-12)
    assert oc.effects["ide"] == pytest.approx(-1.1354, abs=2e-4)
    assert oc.effects["ime"] == pytest.approx(-1.1669, abs=2e-4)


def test_oracle_values_json_round_trip(toy_oracle):
    vals = OracleValues(
        env="toy", method="exact",
        etas={r.value: toy_oracle.etas[r] for r in Regime},
        effects=dict(toy_oracle.effects))
    back = OracleValues.from_json(vals.to_json())
    assert back.effects == vals.effects
    assert back.etas == vals.etas
