"""Effect estimators over pooled tuples: DM, MIS, MR, and baselines.

Five long-run average rewards (one per interventional regime) identify the
four effect components and their total; each estimator family below produces
the five etas its own way and takes consecutive differences:

- DM plugs in the fitted eta of each regime's Bellman system.
- MIS reweights observed rewards by stationary-ratio x action-ratio (x
  mediator-ratio where the regime calls for it).
- MR augments the DM etas with mean-zero temporal-difference terms built
  from every nuisance at once, yielding multiply-robust estimates with
  per-tuple influence records for Wald inference.
- The baselines treat tuples as i.i.d. single-stage observations and only
  produce the two immediate effects.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .mmdp import EFFECT_NAMES, HistoryKind, Policy, Regime, REGIME_ORDER, TupleBatch
from .nuisance import (
    NuisanceSet,
    expected_next_q,
    expected_q_over_mediator,
    expected_reward_over_mediator,
    mediator_ratio,
)

# each effect is a difference of two regime average rewards
EFFECT_PAIRS = {
    "ide": (Regime.PI_E, Regime.G_E),
    "ime": (Regime.G_E, Regime.PI_E0),
    "dde": (Regime.PI_E0, Regime.G_0),
    "dme": (Regime.G_0, Regime.PI_0),
    "ate": (Regime.PI_E, Regime.PI_0),
}


@dataclass
class EffectEstimate:
    """Point estimates of the four effects and their total.

    ``ses`` is populated only by the MR estimators (influence-function
    standard errors); other families carry None.
    """

    estimator: str
    ide: float
    ime: float
    dde: float
    dme: float
    ate: float
    etas: dict
    ses: dict | None = None
    eta_ses: dict | None = None
    n_tuples: int = 0

    def effect(self, name: str) -> float:
        return float(getattr(self, name))

    def effects(self) -> dict:
        return {name: self.effect(name) for name in EFFECT_NAMES}

    def to_json(self) -> str:
        payload = {
            "estimator": self.estimator,
            "effects": self.effects(),
            "ses": self.ses,
            "etas": self.etas,
            "eta_ses": self.eta_ses,
            "n_tuples": self.n_tuples,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _from_etas(tag: str, etas: dict, n_tuples: int, ses: dict | None = None,
               eta_ses: dict | None = None) -> EffectEstimate:
    eff = {name: etas[a] - etas[b] for name, (a, b) in EFFECT_PAIRS.items()}
    return EffectEstimate(
        estimator=tag, ide=eff["ide"], ime=eff["ime"], dde=eff["dde"],
        dme=eff["dme"], ate=eff["ate"],
        etas={reg.value: float(etas[reg]) for reg in REGIME_ORDER},
        ses=ses, eta_ses=eta_ses, n_tuples=n_tuples,
    )


def _check_nuisances(ns: NuisanceSet, need_ratio: bool = True,
                     need_q: bool = True) -> None:
    if need_ratio:
        missing = [k.name for k in HistoryKind if k not in ns.ratio]
        if missing:
            raise ValueError(f"missing stationary ratios: {missing}")
    if need_q:
        missing = [r.value for r in REGIME_ORDER if r not in ns.q]
        if missing:
            raise ValueError(f"missing Q/eta fits for regimes: {missing}")


# ---------------------------------------------------------------------------
# direct method
# ---------------------------------------------------------------------------

def dm_effects(nuisances: NuisanceSet) -> EffectEstimate:
    """Plug-in estimator: consecutive differences of the fitted etas."""
    _check_nuisances(nuisances, need_ratio=False)
    etas = {reg: nuisances.q[reg].eta for reg in REGIME_ORDER}
    return _from_etas("dm", etas, 0)


# ---------------------------------------------------------------------------
# marginal importance sampling
# ---------------------------------------------------------------------------

def _weights(data: TupleBatch, ns: NuisanceSet):
    b = ns.behavior.prob_of(data.s, data.a)
    if np.any(b <= 0):
        raise ValueError("behavior probabilities must be positive (clip first)")
    w_e = ns.pi_e.prob_of(data.s, data.a) / b
    w_0 = ns.pi_0.prob_of(data.s, data.a) / b
    return w_e, w_0


def mis_effects(data: TupleBatch, nuisances: NuisanceSet,
                ge_variant: int = 1) -> EffectEstimate:
    """Stationary-ratio importance sampling estimator.

    ge_variant picks the mixed-regime estimator: 1 reweights the observed
    reward by the mediator ratio, 2 replaces the reward with the fitted
    control-action reward at the observed mediator.
    """
    if ge_variant not in (1, 2):
        raise ValueError("ge_variant must be 1 or 2")
    _check_nuisances(nuisances, need_q=False)
    ns = nuisances
    w_e, w_0 = _weights(data, ns)
    om_e = ns.ratio[HistoryKind.TARGET].value(data.s)
    om_g = ns.ratio[HistoryKind.MIXED].value(data.s)
    om_0 = ns.ratio[HistoryKind.CONTROL].value(data.s)
    R = data.r
    n = len(data)

    if ge_variant == 1:
        rho = mediator_ratio(ns.mediator, ns.pi_e, data.s, data.a, data.m)
        eta_ge = float(np.mean(om_e * w_0 * rho * R))
    else:
        p0 = ns.pi_0.probs(data.s)
        r_mix = np.zeros(n)
        for a in range(p0.shape[1]):
            r_mix += p0[:, a] * ns.reward.mean(data.s, np.full(n, a), data.m)
        eta_ge = float(np.mean(om_e * w_e * r_mix))

    etas = {
        Regime.PI_E: float(np.mean(om_e * w_e * R)),
        Regime.G_E: eta_ge,
        Regime.PI_E0: float(np.mean(om_e * w_0 * R)),
        Regime.G_0: float(np.mean(om_g * w_0 * R)),
        Regime.PI_0: float(np.mean(om_0 * w_0 * R)),
    }
    return _from_etas(f"mis{ge_variant}", etas, n)


# ---------------------------------------------------------------------------
# multiply robust
# ---------------------------------------------------------------------------

@dataclass
class InfluenceRecord:
    """DM etas plus per-tuple augmentation arrays, one per regime."""

    etas: dict
    aug: dict
    n_tuples: int

    def eta_estimates(self) -> dict:
        return {reg: float(self.etas[reg] + self.aug[reg].mean())
                for reg in self.etas}

    def effect_influence(self, name: str) -> np.ndarray:
        """Per-tuple influence contributions for one effect."""
        a, b = EFFECT_PAIRS[name]
        return (self.etas[a] + self.aug[a]) - (self.etas[b] + self.aug[b])


def mr_influence(data: TupleBatch, nuisances: NuisanceSet) -> InfluenceRecord:
    """Evaluate the five augmentation terms on every tuple.

    Each term is the regime's temporal-difference error under its own
    history law, importance-weighted back to the behavior data; all share
    the fitted mediator law for the inner expectations.
    """
    _check_nuisances(nuisances)
    ns = nuisances
    rng = ns.rng(31)
    S, A, M, R, Sn = data.s, data.a, data.m, data.r, data.s_next
    n = len(data)
    w_e, w_0 = _weights(data, ns)
    rho = mediator_ratio(ns.mediator, ns.pi_e, S, A, M)
    om_e = ns.ratio[HistoryKind.TARGET].value(S)
    om_g = ns.ratio[HistoryKind.MIXED].value(S)
    om_0 = ns.ratio[HistoryKind.CONTROL].value(S)
    p0 = ns.pi_0.probs(S)
    K = p0.shape[1]
    D = ns.mc_draws

    etas = {reg: ns.q[reg].eta for reg in REGIME_ORDER}
    next_q = {reg: expected_next_q(ns.q[reg], Sn, reg, ns.pi_e, ns.pi_0,
                                   ns.mediator, D, rng)
              for reg in REGIME_ORDER}
    cur_q = {reg: expected_q_over_mediator(ns.q[reg], S, A, A, ns.mediator,
                                           D, rng)
             for reg in (Regime.PI_E, Regime.G_E, Regime.PI_E0, Regime.PI_0)}

    r_obs = ns.reward.mean(S, A, M)
    r_cond = expected_reward_over_mediator(ns.reward, S, A, A, ns.mediator,
                                           D, rng)
    r_mix = np.zeros(n)       # sum_a pi_0(a|S) r(S, a, M)
    r_pi0 = np.zeros(n)       # sum_a pi_0(a|S) E_{m|S,a} r(S, a, m)
    for a in range(K):
        r_mix += p0[:, a] * ns.reward.mean(S, np.full(n, a), M)
        r_pi0 += p0[:, a] * expected_reward_over_mediator(
            ns.reward, S, a, a, ns.mediator, D, rng)

    q_g0 = ns.q[Regime.G_0]
    g0_obs = q_g0.value(S, A, M)
    # sum_a pi_0(a|S) [Q(S,a,M) - E_{m|S,A} Q(S,a,m)]
    g0_shift = np.zeros(n)
    for a in range(K):
        g0_shift += p0[:, a] * (
            q_g0.value(S, np.full(n, a), M)
            - expected_q_over_mediator(q_g0, S, a, A, ns.mediator, D, rng))

    aug = {
        Regime.PI_E: om_e * w_e * (
            R + next_q[Regime.PI_E] - cur_q[Regime.PI_E] - etas[Regime.PI_E]),
        Regime.G_E: om_e * (
            w_0 * rho * (R - r_obs)
            + w_e * (r_mix + next_q[Regime.G_E] - cur_q[Regime.G_E]
                     - etas[Regime.G_E])),
        Regime.PI_E0: om_e * (
            w_0 * (R - r_cond)
            + w_e * (r_pi0 + next_q[Regime.PI_E0] - cur_q[Regime.PI_E0]
                     - etas[Regime.PI_E0])),
        Regime.G_0: om_g * (
            w_0 * ((R - r_cond)
                   + rho * (r_pi0 + next_q[Regime.G_0] - g0_obs
                            - etas[Regime.G_0]))
            + w_e * g0_shift),
        Regime.PI_0: om_0 * w_0 * (
            R + next_q[Regime.PI_0] - cur_q[Regime.PI_0] - etas[Regime.PI_0]),
    }
    return InfluenceRecord(etas=etas, aug=aug, n_tuples=n)


def _mr_from_influence(tag: str, rec: InfluenceRecord) -> EffectEstimate:
    n = rec.n_tuples
    etas = rec.eta_estimates()
    ses, eta_ses = {}, {}
    for reg in REGIME_ORDER:
        eta_ses[reg.value] = float(rec.aug[reg].std(ddof=1) / np.sqrt(n))
    eff = {}
    for name in EFFECT_NAMES:
        psi = rec.effect_influence(name)
        eff[name] = float(psi.mean())
        ses[name] = float(psi.std(ddof=1) / np.sqrt(n))
    return EffectEstimate(
        estimator=tag, ide=eff["ide"], ime=eff["ime"], dde=eff["dde"],
        dme=eff["dme"], ate=eff["ate"],
        etas={reg.value: etas[reg] for reg in REGIME_ORDER},
        ses=ses, eta_ses=eta_ses, n_tuples=n,
    )


def mr_effects(data: TupleBatch, nuisances: NuisanceSet) -> EffectEstimate:
    """Multiply robust estimator with influence-function standard errors."""
    return _mr_from_influence("mr", mr_influence(data, nuisances))


def mr_effects_alternative(data: TupleBatch,
                           nuisances: NuisanceSet) -> EffectEstimate:
    """MR estimator of the alternative decomposition (mediator shift first).

    Exchanging the roles of the target and control policies maps the
    alternative regime chain onto the primary one in reverse order, so each
    alternative effect is the negated same-name effect computed from the
    role-swapped nuisances; the total effect is identical by construction.
    """
    if nuisances.swapped is None:
        raise ValueError("alternative decomposition needs swapped nuisances")
    rec = mr_influence(data, nuisances.swapped)
    sw = _mr_from_influence("mr_alt", rec)
    # swapped-chain etas, relabeled to the alternative regimes they estimate
    relabel = {
        Regime.PI_0.value: "pi_e", Regime.G_0.value: "g~_e",
        Regime.PI_E0.value: "pi_0e", Regime.G_E.value: "g~_0",
        Regime.PI_E.value: "pi_0",
    }
    return EffectEstimate(
        estimator="mr_alt", ide=-sw.ide, ime=-sw.ime, dde=-sw.dde,
        dme=-sw.dme, ate=-sw.ate,
        etas={relabel[k]: v for k, v in sw.etas.items()},
        ses=sw.ses, eta_ses={relabel[k]: v for k, v in sw.eta_ses.items()},
        n_tuples=sw.n_tuples,
    )


def wald_ci(estimate: EffectEstimate, level: float = 0.95) -> dict:
    """Normal-quantile confidence intervals from influence-function SEs."""
    if estimate.ses is None:
        raise ValueError(f"{estimate.estimator} carries no standard errors")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = stats.norm.ppf(0.5 + level / 2)
    return {name: (estimate.effect(name) - z * estimate.ses[name],
                   estimate.effect(name) + z * estimate.ses[name])
            for name in EFFECT_NAMES}


# ---------------------------------------------------------------------------
# single-stage baselines
# ---------------------------------------------------------------------------

class BaselineKind(str, enum.Enum):
    DM = "base-dm"
    IPW = "base-ipw"
    MR = "base-mr"


def baseline_effects(data: TupleBatch, nuisances: NuisanceSet,
                     kind: BaselineKind) -> tuple:
    """Single-stage immediate-effect estimators treating tuples as i.i.d.

    Returns (ide, ime) only: without modeling the state transition these
    families cannot target the delayed components.
    """
    kind = BaselineKind(kind)
    if kind is BaselineKind.DM:
        return _baseline_dm(data, nuisances)
    if kind is BaselineKind.IPW:
        return _baseline_ipw(data, nuisances)
    return _baseline_mr(data, nuisances)


def _baseline_dm(data: TupleBatch, ns: NuisanceSet) -> tuple:
    rng = ns.rng(47)
    S = data.s
    n = len(data)
    pe, p0 = ns.pi_e.probs(S), ns.pi_0.probs(S)
    K = pe.shape[1]
    D = ns.mc_draws
    # cond_r[a_eval][a_cond] = E_{m|S,a_cond} r(S, a_eval, m)
    cond_r = np.empty((K, K, n))
    for a_eval in range(K):
        for a_cond in range(K):
            cond_r[a_eval, a_cond] = expected_reward_over_mediator(
                ns.reward, S, a_eval, a_cond, ns.mediator, D, rng)
    ide = np.zeros(n)
    ime = np.zeros(n)
    for a in range(K):
        mixed_under_a = sum(p0[:, a2] * cond_r[a2, a] for a2 in range(K))
        ide += pe[:, a] * (cond_r[a, a] - mixed_under_a)
        target_mix = sum(pe[:, a1] * cond_r[a, a1] for a1 in range(K))
        ime += p0[:, a] * (target_mix - cond_r[a, a])
    return float(ide.mean()), float(ime.mean())


def _baseline_ipw(data: TupleBatch, ns: NuisanceSet) -> tuple:
    w_e, w_0 = _weights(data, ns)
    rho = mediator_ratio(ns.mediator, ns.pi_e, data.s, data.a, data.m)
    ide = float(np.mean((w_e - w_0 * rho) * data.r))
    ime = float(np.mean(w_0 * (rho - 1.0) * data.r))
    return ide, ime


def _baseline_mr(data: TupleBatch, ns: NuisanceSet) -> tuple:
    rng = ns.rng(53)
    S, A, M, R = data.s, data.a, data.m, data.r
    n = len(data)
    w_e, w_0 = _weights(data, ns)
    rho = mediator_ratio(ns.mediator, ns.pi_e, S, A, M)
    pe, p0 = ns.pi_e.probs(S), ns.pi_0.probs(S)
    K = pe.shape[1]
    D = ns.mc_draws

    cond_r = np.empty((K, K, n))  # [a_eval, a_cond]
    for a_eval in range(K):
        for a_cond in range(K):
            cond_r[a_eval, a_cond] = expected_reward_over_mediator(
                ns.reward, S, a_eval, a_cond, ns.mediator, D, rng)
    r_self = cond_r[A, A, np.arange(n)]          # E_{m|S,A} r(S,A,m)
    r_under_pe = sum(pe[:, a] * cond_r[a, a] for a in range(K))
    r_under_p0 = sum(p0[:, a] * cond_r[a, a] for a in range(K))
    eta_pe = float(np.mean(w_e * (R - r_self) + r_under_pe))
    eta_p0 = float(np.mean(w_0 * (R - r_self) + r_under_p0))

    r_obs = ns.reward.mean(S, A, M)
    r_mix_obs = np.zeros(n)                      # sum_a pi_0(a|S) r(S,a,M)
    r_mix_cond = np.zeros(n)                     # E_{m|S,A} of the same
    for a in range(K):
        r_mix_obs += p0[:, a] * ns.reward.mean(S, np.full(n, a), M)
        r_mix_cond += p0[:, a] * cond_r[a, A, np.arange(n)]
    # fully integrated plug-in: mediators under pi_e, reward action under pi_0
    r_cross = np.zeros(n)
    for a in range(K):
        r_cross += pe[:, a] * sum(p0[:, a2] * cond_r[a2, a] for a2 in range(K))
    eta_ge = float(np.mean(w_0 * rho * (R - r_obs)
                           + w_e * (r_mix_obs - r_mix_cond) + r_cross))
    return eta_pe - eta_ge, eta_ge - eta_p0
