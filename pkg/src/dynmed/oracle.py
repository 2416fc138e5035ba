"""Ground-truth effect computation.

Two independent routes:

- ``ExactOracle``: for enumerable (binary) environments, solves each regime's
  stationary distribution and average-reward Poisson equation in closed form
  on the (state, action, mediator) chain.  Exposes every quantity the
  estimators treat as a nuisance (density ratios, relative value functions,
  mediator ratios), so estimator tests can run with exact inputs.
- ``mc_oracle``: pure simulation.  Rolls out each regime's history process and
  draws the regime's one-step evaluation rewards from the generative kernels
  (never from conditional-mean shortcuts), so it shares no code path with the
  exact solver beyond the simulator itself.

Effects: IDE = eta^{pi_e} - eta^{G_e}, IME = eta^{G_e} - eta^{pi_e,0},
DDE = eta^{pi_e,0} - eta^{G_0}, DME = eta^{G_0} - eta^{pi_0}, and ATE is their
sum (telescoping to eta^{pi_e} - eta^{pi_0}).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import json

import numpy as np

from .mmdp import (
    HistoryKind,
    MmdpSpec,
    Policy,
    Regime,
    REGIME_ORDER,
    TrajectoryStreams,
    actions_from_uniform,
    simulate_interventional,
)


@dataclass
class OracleValues:
    """Ground-truth summary: per-regime average rewards and the effect split."""

    env: str
    method: str                      # "exact" or "mc"
    etas: dict[str, float]
    effects: dict[str, float]
    effect_ses: dict[str, float] | None = None
    eta_ses: dict[str, float] | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "OracleValues":
        return OracleValues(**json.loads(text))


def effects_from_etas(etas: dict[Regime, float]) -> dict[str, float]:
    ide = etas[Regime.PI_E] - etas[Regime.G_E]
    ime = etas[Regime.G_E] - etas[Regime.PI_E0]
    dde = etas[Regime.PI_E0] - etas[Regime.G_0]
    dme = etas[Regime.G_0] - etas[Regime.PI_0]
    return {"ide": ide, "ime": ime, "dde": dde, "dme": dme,
            "ate": ide + ime + dde + dme}


# ---------------------------------------------------------------------------
# exact route (finite spaces)
# ---------------------------------------------------------------------------

def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Stationary row vector of a transition matrix, by direct linear solve."""
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    mu = np.linalg.solve(A, b)
    if mu.min() < -1e-12:
        raise ValueError("chain produced a negative stationary mass")
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


class ExactOracle:
    """Closed-form regime solver for environments with tabular dynamics.

    All tables are indexed by [state, action, mediator] row order matching
    ``spec.tabular``.  ``pi_b`` is only needed for the density-ratio tables.
    """

    def __init__(self, spec: MmdpSpec, pi_e: Policy, pi_0: Policy,
                 pi_b: Policy | None = None):
        if spec.tabular is None:
            raise ValueError("exact oracle needs tabular dynamics; use mc_oracle")
        self.spec = spec
        self.tab = tab = spec.tabular
        self.pi_e, self.pi_0, self.pi_b = pi_e, pi_0, pi_b
        n_s, n_m = tab.n_states, tab.n_mediators
        K = spec.n_actions

        self.pe = pi_e.probs(tab.states)           # (n_s, K)
        self.p0 = pi_0.probs(tab.states)
        pm = tab.mediator_mass                     # (n_s, K, n_m)
        rbar = tab.reward_mean
        trans = tab.transition

        # mediator mixtures under each policy, decoupled from the step action
        self.mix_e = np.einsum("sa,sam->sm", self.pe, pm)
        self.mix_0 = np.einsum("sa,sam->sm", self.p0, pm)

        # per-step (a, m) laws given the state, for each history process
        self.step_law = {
            HistoryKind.TARGET: np.einsum("sa,sam->sam", self.pe, pm),
            HistoryKind.MIXED: np.einsum("sa,sm->sam", self.p0, self.mix_e),
            HistoryKind.CONTROL: np.einsum("sa,sam->sam", self.p0, pm),
        }

        # marginal state chains and their stationary laws
        self.state_chain = {
            kind: np.einsum("sam,samt->st", law, trans)
            for kind, law in self.step_law.items()
        }
        self.mu = {kind: stationary_distribution(P)
                   for kind, P in self.state_chain.items()}

        # evaluated-step pseudo-reward tables on (s, a, m)
        r_control_state = np.einsum("sa,sam,sam->s", self.p0, pm, rbar)
        self.pseudo = {
            Regime.PI_E: rbar,
            Regime.G_E: np.einsum("sb,sbm->sm", self.p0, rbar)[:, None, :]
            * np.ones((1, K, 1)),
            Regime.PI_E0: np.broadcast_to(
                r_control_state[:, None, None], rbar.shape).copy(),
            Regime.G_0: np.broadcast_to(
                r_control_state[:, None, None], rbar.shape).copy(),
            Regime.PI_0: rbar,
        }

        # average rewards: stationary state law x evaluated-step law
        self.etas: dict[Regime, float] = {}
        for reg in REGIME_ORDER:
            mu = self.mu[reg.history]
            law = self._eval_law(reg)
            self.etas[reg] = float(np.einsum("s,sam,sam->", mu, law, self.pseudo[reg]))

        self.effects = effects_from_etas(self.etas)

        # relative value functions: Poisson solve on the (s, a, m) chain
        self.q_tables: dict[Regime, np.ndarray] = {}
        for reg in REGIME_ORDER:
            self.q_tables[reg] = self._solve_q(reg)

        # density-ratio tables (need the behavior policy)
        if pi_b is not None:
            pb = pi_b.probs(tab.states)
            law_b = np.einsum("sa,sam->sam", pb, pm)
            P_b = np.einsum("sam,samt->st", law_b, trans)
            self.mu_b = stationary_distribution(P_b)
            self.omega = {kind: self.mu[kind] / self.mu_b
                          for kind in HistoryKind}
        else:
            self.mu_b = None
            self.omega = None

        # mediator ratios rho (target mixture) and rho2 (control mixture)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.rho = self.mix_e[:, None, :] / pm
            self.rho2 = self.mix_0[:, None, :] / pm

    # -- internals ---------------------------------------------------------

    def _eval_law(self, regime: Regime) -> np.ndarray:
        """Joint (a, m) law of the evaluated step given the state."""
        tab = self.tab
        if regime is Regime.PI_E:
            return np.einsum("sa,sam->sam", self.pe, tab.mediator_mass)
        if regime is Regime.G_E:
            # action from pi_0, mediator from the pi_e mixture, independent
            return np.einsum("sa,sm->sam", self.p0, self.mix_e)
        # PI_E0 / G_0 / PI_0: coupled standard draw under pi_0
        return np.einsum("sa,sam->sam", self.p0, tab.mediator_mass)

    def _triplet_chain(self, kind: HistoryKind) -> np.ndarray:
        """Transition matrix of (s, a, m) -> (s', a', m') under a history law."""
        tab = self.tab
        law = self.step_law[kind]                     # (s', a', m')
        P = np.einsum("samt,tbn->samtbn", tab.transition, law)
        size = tab.n_states * self.spec.n_actions * tab.n_mediators
        return P.reshape(size, size)

    def _triplet_stationary(self, kind: HistoryKind) -> np.ndarray:
        mu_sam = np.einsum("s,sam->sam", self.mu[kind], self.step_law[kind])
        return mu_sam.reshape(-1)

    def _solve_q(self, regime: Regime) -> np.ndarray:
        """Relative value function: (I - P + 1 mu') Q = pseudo - eta."""
        kind = regime.history
        P = self._triplet_chain(kind)
        mu = self._triplet_stationary(kind)
        r = self.pseudo[regime].reshape(-1)
        eta = float(mu @ r)
        n = P.shape[0]
        A = np.eye(n) - P + np.outer(np.ones(n), mu)
        q = np.linalg.solve(A, r - eta)
        return q.reshape(self.pseudo[regime].shape)

    # -- public surface ------------------------------------------------------

    def q_eta(self, regime: Regime) -> tuple[np.ndarray, float]:
        """Q table and the average reward entering its Poisson equation.

        The eta here is the *history* process's stationary average of the
        pseudo-reward, which for G_E differs from eta^{G_e} only in the
        evaluated-step coupling; both coincide for every regime (checked in
        tests), so the regime eta is returned.
        """
        return self.q_tables[regime], self.etas[regime]

    def bellman_residual(self, regime: Regime) -> float:
        """Max |Q + eta - pseudo - P E[Q']| over all (s, a, m)."""
        kind = regime.history
        P = self._triplet_chain(kind)
        q = self.q_tables[regime].reshape(-1)
        r = self.pseudo[regime].reshape(-1)
        lhs = q + self.etas[regime]
        rhs = r + P @ q
        return float(np.max(np.abs(lhs - rhs)))

    def values(self) -> OracleValues:
        return OracleValues(
            env=self.spec.name,
            method="exact",
            etas={reg.value: self.etas[reg] for reg in REGIME_ORDER},
            effects=dict(self.effects),
            meta={"bellman_residual": max(self.bellman_residual(r)
                                          for r in REGIME_ORDER)},
        )


def exact_tabular_oracle(spec: MmdpSpec, pi_e: Policy, pi_0: Policy,
                         pi_b: Policy | None = None) -> ExactOracle:
    return ExactOracle(spec, pi_e, pi_0, pi_b)


def exact_alternative_effects(spec: MmdpSpec, pi_e: Policy, pi_0: Policy) -> dict[str, float]:
    """Alternative decomposition (mediator shift first), by role swap.

    Swapping pi_e and pi_0 maps the primary regime chain onto the alternative
    one in reverse order, so each alternative effect is the negated swapped
    primary effect: IDE2 = -IDE(pi_0, pi_e) etc.  ATE is unchanged.
    """
    sw = ExactOracle(spec, pi_0, pi_e).effects
    return {
        "ide": -sw["ide"], "ime": -sw["ime"], "dde": -sw["dde"],
        "dme": -sw["dme"], "ate": -sw["ate"],
    }


# ---------------------------------------------------------------------------
# Monte Carlo route
# ---------------------------------------------------------------------------

def _family_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


def _side_eval_target(spec: MmdpSpec, trajs, pi_0: Policy, seed: int):
    """Per-trajectory mean evaluation rewards for G_E and PI_E0 along pi_e chains.

    Side-stream consumption order per trajectory (fixed): action uniforms and
    reward noise for the G_E draw, then action uniforms, mediator noise and
    reward noise for the PI_E0 draw.
    """
    ge, pie0 = np.empty(len(trajs)), np.empty(len(trajs))
    for i, tr in enumerate(trajs):
        side = TrajectoryStreams(seed, tr.traj_id).gen("side")
        T = len(tr)
        s = tr.states
        u_ge = side.random(T)
        z_ge = spec.outcome_noise.draw(side, T)
        u_p0 = side.random(T)
        z_m = spec.mediator_noise.draw(side, T)
        z_out = spec.outcome_noise.draw(side, T)
        a_ge = actions_from_uniform(pi_0.probs(s), u_ge)
        _, r_ge = spec.outcome_from_noise(s, a_ge, tr.mediators, z_ge)
        a_p0 = actions_from_uniform(pi_0.probs(s), u_p0)
        m_p0 = spec.mediator_from_noise(s, a_p0, z_m)
        _, r_p0 = spec.outcome_from_noise(s, a_p0, m_p0, z_out)
        ge[i] = r_ge.mean()
        pie0[i] = r_p0.mean()
    return ge, pie0


def _side_eval_mixed(spec: MmdpSpec, trajs, pi_0: Policy, seed: int):
    """Evaluated-step rewards for G_0: fresh coupled (a, m, r) draw per step."""
    out = np.empty(len(trajs))
    for i, tr in enumerate(trajs):
        side = TrajectoryStreams(seed, tr.traj_id).gen("side")
        T = len(tr)
        s = tr.states
        u = side.random(T)
        z_m = spec.mediator_noise.draw(side, T)
        z_out = spec.outcome_noise.draw(side, T)
        a = actions_from_uniform(pi_0.probs(s), u)
        m = spec.mediator_from_noise(s, a, z_m)
        _, r = spec.outcome_from_noise(s, a, m, z_out)
        out[i] = r.mean()
    return out


def mc_oracle(spec: MmdpSpec, pi_e: Policy, pi_0: Policy, n_traj: int,
              horizon: int, seed: int) -> OracleValues:
    """Simulation ground truth with per-effect Monte Carlo standard errors.

    The pi_e chain serves PI_E (its own rewards), G_E and PI_E0 (side draws);
    the mixed chain serves G_0; the pi_0 chain serves PI_0.  Effects are
    averaged per trajectory first, pairing chains by index, so the reported
    SEs account for the shared-chain correlation.
    """
    seeds = {k: _family_seed(seed, i)
             for i, k in enumerate(("target", "mixed", "control"))}
    trajs_e = simulate_interventional(spec, Regime.PI_E, pi_e, pi_0,
                                      n_traj, horizon, seeds["target"])
    trajs_g = simulate_interventional(spec, Regime.G_0, pi_e, pi_0,
                                      n_traj, horizon, seeds["mixed"])
    trajs_0 = simulate_interventional(spec, Regime.PI_0, pi_e, pi_0,
                                      n_traj, horizon, seeds["control"])

    per_traj = {
        Regime.PI_E: np.array([tr.rewards.mean() for tr in trajs_e]),
        Regime.PI_0: np.array([tr.rewards.mean() for tr in trajs_0]),
    }
    per_traj[Regime.G_E], per_traj[Regime.PI_E0] = _side_eval_target(
        spec, trajs_e, pi_0, seeds["target"])
    per_traj[Regime.G_0] = _side_eval_mixed(spec, trajs_g, pi_0, seeds["mixed"])

    etas = {reg: float(v.mean()) for reg, v in per_traj.items()}
    eta_ses = {reg: float(v.std(ddof=1) / np.sqrt(n_traj))
               for reg, v in per_traj.items()}

    pairs = {
        "ide": (Regime.PI_E, Regime.G_E),
        "ime": (Regime.G_E, Regime.PI_E0),
        "dde": (Regime.PI_E0, Regime.G_0),
        "dme": (Regime.G_0, Regime.PI_0),
        "ate": (Regime.PI_E, Regime.PI_0),
    }
    effects, effect_ses = {}, {}
    for name, (hi, lo) in pairs.items():
        diff = per_traj[hi] - per_traj[lo]
        effects[name] = float(diff.mean())
        effect_ses[name] = float(diff.std(ddof=1) / np.sqrt(n_traj))

    return OracleValues(
        env=spec.name,
        method="mc",
        etas={reg.value: etas[reg] for reg in REGIME_ORDER},
        effects=effects,
        effect_ses=effect_ses,
        eta_ses={reg.value: eta_ses[reg] for reg in REGIME_ORDER},
        meta={"n_traj": n_traj, "horizon": horizon, "seed": seed},
    )
