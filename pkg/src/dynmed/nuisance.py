"""Nuisance functions: conditional models, density ratios, and Q/eta fits.

Everything an effect estimator consumes beyond the raw tuples lives here, in
one of three provenances:

- fitted from behavior data (``fit_nuisances``),
- exact, read off a finite environment's closed-form solution
  (``oracle_nuisances``),
- exact-then-corrupted (the scenarios module perturbs oracle sets).

The fitted route follows the estimating equations the theory prescribes:
density ratios omega solve a linear moment system over a feature dictionary
(one-hot for enumerable states, random Fourier features otherwise), and each
regime's (Q, eta) pair solves an empirical Bellman equation over a sieve basis
with the average reward as the last, unpenalized coordinate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import SplineTransformer

from .mmdp import (
    HistoryKind,
    MmdpSpec,
    Policy,
    Regime,
    REGIME_ORDER,
    SpaceKind,
    TabularDynamics,
    TupleBatch,
    enumerate_binary,
)
from .oracle import ExactOracle


@dataclass
class NuisanceConfig:
    """Knobs for the fitted-nuisance pipeline (defaults follow the method)."""

    d_omega: int = 64                 # random Fourier features for omega
    rff_bandwidth: float | None = None  # None -> median heuristic
    sieve_dim: int | None = None      # None -> 3 * ceil((NT)^(1/4))
    ridge_q: float | str = "auto"     # "auto": 1e-8 finite, CV grid continuous
    ridge_grid: tuple = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
    cv_folds: int = 5
    ridge_omega: float | None = None  # None: 1e-8 finite, 1e-6 continuous
    mc_draws: int = 100               # draws for continuous mediator expectations
    prob_clip: tuple = (0.01, 0.99)
    ratio_floor: float = 1e-3
    seed: int = 0

    def rng(self, tag: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, tag]))


# ---------------------------------------------------------------------------
# conditional models
# ---------------------------------------------------------------------------

class BehaviorModel:
    """Action-probability model Pr(A = a | S), clipped away from 0/1."""

    def __init__(self, predict: Callable[[np.ndarray], np.ndarray],
                 clip: tuple = (0.01, 0.99)):
        self._predict = predict
        self.clip = clip

    def probs(self, s: np.ndarray) -> np.ndarray:
        p1 = np.clip(self._predict(np.atleast_2d(s)), *self.clip)
        return np.column_stack([1.0 - p1, p1])

    def prob_of(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        p = self.probs(s)
        return p[np.arange(p.shape[0]), np.asarray(a, dtype=int)]


def behavior_from_policy(policy: Policy) -> BehaviorModel:
    return BehaviorModel(lambda s: policy.probs(s)[:, 1], clip=(0.0, 1.0))


def fit_behavior(data: TupleBatch, clip: tuple = (0.01, 0.99)) -> BehaviorModel:
    """Logistic regression of the action on the raw state."""
    if len(data) == 0 or len(np.unique(data.a)) < 2:
        raise ValueError("behavior fit needs at least two distinct actions")
    lr = LogisticRegression(penalty=None, max_iter=1000)
    lr.fit(data.s, data.a)
    return BehaviorModel(lambda s: lr.predict_proba(s)[:, 1], clip)


class MediatorModel:
    """Interface: density evaluation plus either enumeration or sampling."""

    is_finite: bool = False

    def density(self, s, a, m) -> np.ndarray:  # (n,)
        raise NotImplementedError

    # finite only
    @property
    def support(self) -> np.ndarray:  # (n_m, dm)
        raise NotImplementedError

    def mass(self, s, a) -> np.ndarray:  # (n, n_m)
        raise NotImplementedError

    # continuous only
    def sample(self, s, a, n_draws, rng) -> np.ndarray:  # (n, n_draws, dm)
        raise NotImplementedError


class BinaryMediatorModel(MediatorModel):
    """Product of per-dimension Bernoulli heads with given p1 predictors."""

    is_finite = True

    def __init__(self, heads: Sequence[Callable[[np.ndarray, np.ndarray], np.ndarray]],
                 clip: tuple = (0.01, 0.99)):
        self.heads = list(heads)
        self.clip = clip
        self._support = enumerate_binary(len(self.heads))

    @property
    def support(self) -> np.ndarray:
        return self._support

    def _p1(self, s, a) -> np.ndarray:  # (n, dm)
        s = np.atleast_2d(s)
        a = np.asarray(a, dtype=float)
        return np.column_stack([np.clip(h(s, a), *self.clip) for h in self.heads])

    def density(self, s, a, m) -> np.ndarray:
        p1 = self._p1(s, a)
        m = np.atleast_2d(m)
        return np.prod(np.where(m > 0.5, p1, 1.0 - p1), axis=1)

    def mass(self, s, a) -> np.ndarray:
        p1 = self._p1(s, a)
        sup = self._support  # (n_m, dm)
        return np.prod(np.where(sup[None, :, :] > 0.5, p1[:, None, :],
                                1.0 - p1[:, None, :]), axis=2)


class TabularMediatorModel(MediatorModel):
    """Mass-table mediator model over enumerated binary states (corruptible)."""

    is_finite = True

    def __init__(self, tab: TabularDynamics, mass_table: np.ndarray | None = None):
        self.tab = tab
        self.table = tab.mediator_mass.copy() if mass_table is None else mass_table

    @property
    def support(self) -> np.ndarray:
        return self.tab.mediators

    def density(self, s, a, m) -> np.ndarray:
        si = self.tab.state_index(s)
        mi = self.tab.mediator_index(m)
        return self.table[si, np.asarray(a, dtype=int), mi]

    def mass(self, s, a) -> np.ndarray:
        si = self.tab.state_index(s)
        return self.table[si, np.asarray(a, dtype=int), :]


class GaussianMediatorModel(MediatorModel):
    """Independent Gaussian heads with basis-regression means."""

    def __init__(self, basis: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 coefs: np.ndarray, sds: np.ndarray):
        self.basis = basis
        self.coefs = coefs  # (p, dm)
        self.sds = sds      # (dm,)

    def _means(self, s, a) -> np.ndarray:
        return self.basis(np.atleast_2d(s), np.asarray(a, dtype=float)) @ self.coefs

    def density(self, s, a, m) -> np.ndarray:
        resid = (np.atleast_2d(m) - self._means(s, a)) / self.sds
        norm = np.prod(self.sds) * (2 * np.pi) ** (len(self.sds) / 2)
        return np.exp(-0.5 * (resid ** 2).sum(axis=1)) / norm

    def sample(self, s, a, n_draws, rng) -> np.ndarray:
        mu = self._means(s, a)  # (n, dm)
        z = rng.standard_normal((mu.shape[0], n_draws, mu.shape[1]))
        return mu[:, None, :] + z * self.sds[None, None, :]


class KernelMediatorModel(MediatorModel):
    """Exact mediator law of a continuous environment (oracle provenance)."""

    def __init__(self, spec: MmdpSpec):
        self.spec = spec

    def density(self, s, a, m) -> np.ndarray:
        return self.spec.mediator_density(s, a, m)

    def sample(self, s, a, n_draws, rng) -> np.ndarray:
        s = np.atleast_2d(s)
        out = np.empty((s.shape[0], n_draws, self.spec.mediator_dim))
        for d in range(n_draws):
            out[:, d, :] = self.spec.sample_mediator(s, a, rng)
        return out


def fit_mediator(data: TupleBatch, kind: SpaceKind,
                 tab: TabularDynamics | None = None,
                 clip: tuple = (0.01, 0.99)) -> MediatorModel:
    """Per-dimension heads: logistic for binary mediators, Gaussian otherwise."""
    dm = data.m.shape[1]
    if kind is SpaceKind.BINARY:
        X = np.column_stack([data.s, data.a.astype(float)])
        heads = []
        for j in range(dm):
            lr = LogisticRegression(penalty=None, max_iter=1000)
            lr.fit(X, (data.m[:, j] > 0.5).astype(int))
            heads.append(_logistic_head(lr))
        return BinaryMediatorModel(heads, clip)
    X = _mediator_basis(data.s, data.a.astype(float))
    coefs = np.linalg.lstsq(X, data.m, rcond=None)[0]
    resid = data.m - X @ coefs
    sds = resid.std(axis=0, ddof=X.shape[1])
    return GaussianMediatorModel(_mediator_basis, coefs, sds)


def _logistic_head(lr: LogisticRegression):
    def head(s, a):
        return lr.predict_proba(np.column_stack([s, a]))[:, 1]
    return head


def _mediator_basis(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """[1, s, sqrt|s|, a, a*s, a*sqrt|s|], state terms per dimension."""
    s = np.atleast_2d(s)
    a = np.asarray(a, dtype=float)
    root = np.sqrt(np.abs(s))
    return np.column_stack([
        np.ones(s.shape[0]), s, root, a,
        a[:, None] * s, a[:, None] * root,
    ])


class RewardModel:
    def mean(self, s, a, m) -> np.ndarray:
        raise NotImplementedError


class TabularRewardModel(RewardModel):
    def __init__(self, tab: TabularDynamics, table: np.ndarray | None = None):
        self.tab = tab
        self.table = tab.reward_mean.copy() if table is None else table

    def mean(self, s, a, m) -> np.ndarray:
        si = self.tab.state_index(s)
        mi = self.tab.mediator_index(m)
        return self.table[si, np.asarray(a, dtype=int), mi]


class LinearRewardModel(RewardModel):
    def __init__(self, basis: Callable, coef: np.ndarray):
        self.basis = basis
        self.coef = coef

    def mean(self, s, a, m) -> np.ndarray:
        return self.basis(np.atleast_2d(s), np.asarray(a, dtype=float),
                          np.atleast_2d(m)) @ self.coef


class KernelRewardModel(RewardModel):
    """Exact conditional mean reward of the generative spec."""

    def __init__(self, spec: MmdpSpec):
        self.spec = spec

    def mean(self, s, a, m) -> np.ndarray:
        return self.spec.reward_mean(s, a, m)


def _reward_basis(s: np.ndarray, a: np.ndarray, m: np.ndarray) -> np.ndarray:
    """[1, s, sqrt|s|, a-1/2, (a-1/2)sqrt(sum|m|), m], state/mediator per dim."""
    s, m = np.atleast_2d(s), np.atleast_2d(m)
    a = np.asarray(a, dtype=float)
    ac = a - 0.5
    msum = np.sqrt(np.abs(m).sum(axis=1))
    return np.column_stack([
        np.ones(s.shape[0]), s, np.sqrt(np.abs(s)), ac, ac * msum, m,
    ])


def _onehot_sam_basis(tab: TabularDynamics, K: int):
    n_s, n_m = tab.n_states, tab.n_mediators

    def basis(s, a, m):
        si = tab.state_index(s)
        mi = tab.mediator_index(m)
        idx = (si * K + np.asarray(a, dtype=int)) * n_m + mi
        out = np.zeros((si.shape[0], n_s * K * n_m))
        out[np.arange(si.shape[0]), idx] = 1.0
        return out

    return basis


def fit_reward(data: TupleBatch, kind: SpaceKind, n_actions: int,
               tab: TabularDynamics | None = None) -> RewardModel:
    """Least-squares conditional mean of R given (S, A, M)."""
    if kind is SpaceKind.BINARY and tab is not None:
        basis = _onehot_sam_basis(tab, n_actions)
    else:
        basis = _reward_basis
    X = basis(data.s, data.a, data.m)
    # tiny ridge keeps unvisited one-hot cells from breaking the solve
    XtX = X.T @ X + 1e-10 * np.eye(X.shape[1])
    coef = np.linalg.solve(XtX, X.T @ data.r)
    return LinearRewardModel(basis, coef)


# ---------------------------------------------------------------------------
# mediator ratio
# ---------------------------------------------------------------------------

def mediator_ratio(mediator: MediatorModel, mix_policy: Policy, s: np.ndarray,
                   a: np.ndarray, m: np.ndarray) -> np.ndarray:
    """rho(s, a, m) = sum_a' pi(a'|s) p_m(m|s,a') / p_m(m|s,a)."""
    s = np.atleast_2d(s)
    probs = mix_policy.probs(s)
    num = np.zeros(s.shape[0])
    for a_star in range(probs.shape[1]):
        num += probs[:, a_star] * mediator.density(s, np.full(s.shape[0], a_star), m)
    return num / mediator.density(s, a, m)


# ---------------------------------------------------------------------------
# state features for the density-ratio fits
# ---------------------------------------------------------------------------

class StateFeatures:
    dim: int

    def transform(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class OneHotStateFeatures(StateFeatures):
    def __init__(self, tab: TabularDynamics):
        self.tab = tab
        self.dim = tab.n_states

    def transform(self, s: np.ndarray) -> np.ndarray:
        si = self.tab.state_index(s)
        out = np.zeros((si.shape[0], self.dim))
        out[np.arange(si.shape[0]), si] = 1.0
        return out


class RFFStateFeatures(StateFeatures):
    """Random cosine features approximating an RBF dictionary, plus intercept."""

    def __init__(self, s_sample: np.ndarray, n_features: int,
                 bandwidth: float | None, rng: np.random.Generator):
        if bandwidth is None:
            bandwidth = median_heuristic(s_sample, rng)
        self.bandwidth = bandwidth
        ds = s_sample.shape[1]
        self.W = rng.standard_normal((ds, n_features)) / bandwidth
        self.b = rng.uniform(0.0, 2 * np.pi, n_features)
        self.scale = np.sqrt(2.0 / n_features)
        self.dim = n_features + 1

    def transform(self, s: np.ndarray) -> np.ndarray:
        z = self.scale * np.cos(np.atleast_2d(s) @ self.W + self.b)
        return np.column_stack([np.ones(z.shape[0]), z])


def median_heuristic(x: np.ndarray, rng: np.random.Generator,
                     max_points: int = 500) -> float:
    x = np.atleast_2d(x)
    if x.shape[0] > max_points:
        x = x[rng.choice(x.shape[0], max_points, replace=False)]
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    med = np.sqrt(np.median(d2[np.triu_indices(x.shape[0], k=1)]))
    return float(med) if med > 0 else 1.0


# ---------------------------------------------------------------------------
# density-ratio models
# ---------------------------------------------------------------------------

class RatioModel:
    """omega(s) = clip(xi(s)'beta) / Z with Z normalizing the training mean to 1."""

    def __init__(self, features: StateFeatures, beta: np.ndarray, floor: float,
                 normalizer: float, kkt_residual: float):
        self.features = features
        self.beta = beta
        self.floor = floor
        self.normalizer = normalizer
        self.kkt_residual = kkt_residual

    def value(self, s: np.ndarray) -> np.ndarray:
        raw = self.features.transform(s) @ self.beta
        return np.clip(raw, self.floor, None) / self.normalizer


class TabularRatioModel:
    """State-indexed ratio table (oracle provenance, corruptible)."""

    def __init__(self, tab: TabularDynamics, values: np.ndarray):
        self.tab = tab
        self.values = values
        self.kkt_residual = 0.0

    def value(self, s: np.ndarray) -> np.ndarray:
        return self.values[self.tab.state_index(s)]


def fit_ratio(s: np.ndarray, s_next: np.ndarray, weights: np.ndarray,
              features: StateFeatures, ridge: float,
              floor: float = 1e-3) -> RatioModel:
    """Solve the stationarity moment E[(xi(S) - w xi(S')) xi(S)' beta] = 0.

    The homogeneous system is resolved against the normalization
    mean(xi(S)'beta) = 1 through its KKT form (A'A + ridge I) beta = kappa c,
    then clipped at ``floor`` and renormalized to unit training mean.
    """
    Xi = features.transform(s)
    Xi_next = features.transform(s_next)
    n = Xi.shape[0]
    diff = Xi - weights[:, None] * Xi_next
    A = diff.T @ Xi / n
    c = Xi.mean(axis=0)
    H = A.T @ A + ridge * np.eye(A.shape[0])
    try:
        beta0 = np.linalg.solve(H, c)
    except np.linalg.LinAlgError:
        warnings.warn("rank-deficient ratio system; adding ridge 1e-6",
                      RuntimeWarning, stacklevel=2)
        H = H + 1e-6 * np.eye(H.shape[0])
        beta0 = np.linalg.solve(H, c)
    denom = float(c @ beta0)
    if abs(denom) < 1e-12:
        raise ValueError("degenerate ratio fit: constraint direction is null")
    beta = beta0 / denom
    kappa = 1.0 / denom  # KKT multiplier of the unit-mean constraint
    kkt = float(max(np.max(np.abs(H @ beta - kappa * c)), abs(c @ beta - 1.0)))
    raw = np.clip(Xi @ beta, floor, None)
    normalizer = float(raw.mean())
    return RatioModel(features, beta, floor, normalizer, kkt)


# ---------------------------------------------------------------------------
# sieve features over (state, mediator) pairs
# ---------------------------------------------------------------------------

class PairFeatures:
    dim: int

    def transform(self, s: np.ndarray, m: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class OneHotPairFeatures(PairFeatures):
    """Saturated indicator basis over enumerated (state, mediator) pairs."""

    def __init__(self, tab: TabularDynamics):
        self.tab = tab
        self.dim = tab.n_states * tab.n_mediators

    def transform(self, s: np.ndarray, m: np.ndarray) -> np.ndarray:
        idx = (self.tab.state_index(s) * self.tab.n_mediators
               + self.tab.mediator_index(m))
        out = np.zeros((idx.shape[0], self.dim))
        out[np.arange(idx.shape[0]), idx] = 1.0
        return out


class SplinePairFeatures(PairFeatures):
    """Per-coordinate quadratic splines plus pairwise linear interactions.

    The knot grid sits at training quantiles of each coordinate of the
    concatenated (state, mediator) vector; tails extrapolate linearly so
    queries outside the training range stay bounded.
    """

    def __init__(self, s_sample: np.ndarray, m_sample: np.ndarray, budget: int):
        X = np.column_stack([np.atleast_2d(s_sample), np.atleast_2d(m_sample)])
        self.n_coords = X.shape[1]
        self.mu = X.mean(axis=0)
        self.sd = np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
        n_cross = self.n_coords * (self.n_coords - 1) // 2
        per = max(4, int(round((budget - n_cross) / self.n_coords)))
        # degree-2 splines contribute n_knots + 1 columns per coordinate
        self.spline = SplineTransformer(degree=2, n_knots=max(2, per - 1),
                                        knots="quantile",
                                        extrapolation="linear",
                                        include_bias=False)
        self.spline.fit(X)
        self.dim = (self.spline.transform(X[:1]).shape[1] + n_cross)

    def transform(self, s: np.ndarray, m: np.ndarray) -> np.ndarray:
        X = np.column_stack([np.atleast_2d(s), np.atleast_2d(m)])
        Z = (X - self.mu) / self.sd
        cross = [Z[:, i] * Z[:, j]
                 for i in range(self.n_coords)
                 for j in range(i + 1, self.n_coords)]
        cols = [self.spline.transform(X)]
        if cross:
            cols.append(np.column_stack(cross))
        return np.column_stack(cols)


def default_pair_features(spec: MmdpSpec, data: TupleBatch,
                          config: NuisanceConfig) -> PairFeatures:
    if spec.is_finite:
        return OneHotPairFeatures(spec.tabular)
    budget = config.sieve_dim
    if budget is None:
        budget = 3 * int(np.ceil(len(data) ** 0.25))
    return SplinePairFeatures(data.s, data.m, budget)


def default_state_features(spec: MmdpSpec, data: TupleBatch,
                           config: NuisanceConfig) -> StateFeatures:
    if spec.is_finite:
        return OneHotStateFeatures(spec.tabular)
    return RFFStateFeatures(data.s, config.d_omega, config.rff_bandwidth,
                            config.rng(17))


# ---------------------------------------------------------------------------
# expectations under the (estimated) mediator law
# ---------------------------------------------------------------------------

_CHUNK_ROWS = 2000


def _avg_pair_features(phi: PairFeatures, s: np.ndarray, a_cond: np.ndarray,
                       mediator: MediatorModel, mc_draws: int,
                       rng: np.random.Generator) -> np.ndarray:
    """E_{m ~ p(.|s, a_cond)} phi(s, m), row-wise."""
    s = np.atleast_2d(s)
    n = s.shape[0]
    a_cond = np.broadcast_to(np.asarray(a_cond, dtype=int), (n,))
    if mediator.is_finite:
        w = mediator.mass(s, a_cond)  # (n, n_m)
        out = np.zeros((n, phi.dim))
        for j, mval in enumerate(mediator.support):
            feats = phi.transform(s, np.broadcast_to(mval, (n, mval.shape[0])))
            out += w[:, j:j + 1] * feats
        return out
    out = np.empty((n, phi.dim))
    for lo in range(0, n, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, n)
        draws = mediator.sample(s[lo:hi], a_cond[lo:hi], mc_draws, rng)
        nc, D, dm = draws.shape
        s_rep = np.repeat(s[lo:hi], D, axis=0)
        feats = phi.transform(s_rep, draws.reshape(nc * D, dm))
        out[lo:hi] = feats.reshape(nc, D, phi.dim).mean(axis=1)
    return out


def expected_reward_over_mediator(reward: RewardModel, s: np.ndarray,
                                  a_eval: np.ndarray, a_cond: np.ndarray,
                                  mediator: MediatorModel, mc_draws: int,
                                  rng: np.random.Generator) -> np.ndarray:
    """E_{m ~ p(.|s, a_cond)} rbar(s, a_eval, m), row-wise."""
    s = np.atleast_2d(s)
    n = s.shape[0]
    a_eval = np.broadcast_to(np.asarray(a_eval, dtype=int), (n,))
    a_cond = np.broadcast_to(np.asarray(a_cond, dtype=int), (n,))
    if mediator.is_finite:
        w = mediator.mass(s, a_cond)
        out = np.zeros(n)
        for j, mval in enumerate(mediator.support):
            vals = reward.mean(s, a_eval, np.broadcast_to(mval, (n, mval.shape[0])))
            out += w[:, j] * vals
        return out
    out = np.empty(n)
    for lo in range(0, n, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, n)
        draws = mediator.sample(s[lo:hi], a_cond[lo:hi], mc_draws, rng)
        nc, D, dm = draws.shape
        s_rep = np.repeat(s[lo:hi], D, axis=0)
        a_rep = np.repeat(a_eval[lo:hi], D)
        vals = reward.mean(s_rep, a_rep, draws.reshape(nc * D, dm))
        out[lo:hi] = vals.reshape(nc, D).mean(axis=1)
    return out


def expected_q_over_mediator(q, s: np.ndarray, a_eval: np.ndarray,
                             a_cond: np.ndarray, mediator: MediatorModel,
                             mc_draws: int, rng: np.random.Generator) -> np.ndarray:
    """E_{m ~ p(.|s, a_cond)} Q(s, a_eval, m), row-wise."""
    s = np.atleast_2d(s)
    n = s.shape[0]
    a_eval = np.broadcast_to(np.asarray(a_eval, dtype=int), (n,))
    a_cond = np.broadcast_to(np.asarray(a_cond, dtype=int), (n,))
    if mediator.is_finite:
        w = mediator.mass(s, a_cond)
        out = np.zeros(n)
        for j, mval in enumerate(mediator.support):
            vals = q.value(s, a_eval, np.broadcast_to(mval, (n, mval.shape[0])))
            out += w[:, j] * vals
        return out
    out = np.empty(n)
    for lo in range(0, n, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, n)
        draws = mediator.sample(s[lo:hi], a_cond[lo:hi], mc_draws, rng)
        nc, D, dm = draws.shape
        s_rep = np.repeat(s[lo:hi], D, axis=0)
        a_rep = np.repeat(a_eval[lo:hi], D)
        vals = q.value(s_rep, a_rep, draws.reshape(nc * D, dm))
        out[lo:hi] = vals.reshape(nc, D).mean(axis=1)
    return out


def expected_next_q(q, s_next: np.ndarray, regime: Regime, pi_e: Policy,
                    pi_0: Policy, mediator: MediatorModel, mc_draws: int,
                    rng: np.random.Generator) -> np.ndarray:
    """E[Q(S', A', M') | S'] under the regime's own history law."""
    s_next = np.atleast_2d(s_next)
    n = s_next.shape[0]
    if regime.history is HistoryKind.MIXED:
        pa = pi_0.probs(s_next)
        pmix = pi_e.probs(s_next)
        out = np.zeros(n)
        # mediator drawn from the target-policy mixture, action from control
        for a in range(pa.shape[1]):
            inner = np.zeros(n)
            for a_star in range(pmix.shape[1]):
                inner += pmix[:, a_star] * expected_q_over_mediator(
                    q, s_next, a, a_star, mediator, mc_draws, rng)
            out += pa[:, a] * inner
        return out
    policy = pi_e if regime.history is HistoryKind.TARGET else pi_0
    pa = policy.probs(s_next)
    out = np.zeros(n)
    for a in range(pa.shape[1]):
        out += pa[:, a] * expected_q_over_mediator(
            q, s_next, a, a, mediator, mc_draws, rng)
    return out


# ---------------------------------------------------------------------------
# Q / eta sieve fit
# ---------------------------------------------------------------------------

class QModel:
    """Q(s, a, m) = phi(s, m)' beta_a with the long-run average eta attached."""

    def __init__(self, phi: PairFeatures, beta_blocks: np.ndarray, eta: float,
                 moment_residual: float, ridge: float):
        self.phi = phi
        self.beta_blocks = beta_blocks  # (K, L)
        self.eta = float(eta)
        self.moment_residual = moment_residual
        self.ridge = ridge

    def value(self, s, a, m) -> np.ndarray:
        feats = self.phi.transform(s, m)
        coef = self.beta_blocks[np.asarray(a, dtype=int)]
        return np.einsum("nl,nl->n", feats, coef)


class TabularQModel:
    """Table-backed Q with eta (oracle provenance, corruptible)."""

    def __init__(self, tab: TabularDynamics, table: np.ndarray, eta: float):
        self.tab = tab
        self.table = table  # (n_s, K, n_m)
        self.eta = float(eta)
        self.moment_residual = 0.0

    def value(self, s, a, m) -> np.ndarray:
        si = self.tab.state_index(s)
        mi = self.tab.mediator_index(m)
        return self.table[si, np.asarray(a, dtype=int), mi]


def _q_response(data: TupleBatch, regime: Regime, mediator: MediatorModel,
                reward: RewardModel, pi_0: Policy, mc_draws: int,
                rng: np.random.Generator) -> np.ndarray:
    """Per-tuple pseudo reward entering the regime's Bellman equation."""
    if regime in (Regime.PI_E, Regime.PI_0):
        return data.r
    p0 = pi_0.probs(data.s)
    out = np.zeros(len(data))
    if regime is Regime.G_E:
        for a in range(p0.shape[1]):
            out += p0[:, a] * reward.mean(data.s, np.full(len(data), a), data.m)
        return out
    # PI_E0 and G_0 integrate the mediator out as well
    for a in range(p0.shape[1]):
        out += p0[:, a] * expected_reward_over_mediator(
            reward, data.s, a, a, mediator, mc_draws, rng)
    return out


def _build_q_design(data: TupleBatch, regime: Regime, mediator: MediatorModel,
                    pi_e: Policy, pi_0: Policy, phi: PairFeatures,
                    n_actions: int, mc_draws: int, rng: np.random.Generator):
    """Design pair (U, V): U holds current features, V the next-step law."""
    n = len(data)
    L = phi.dim
    p = n_actions * L + 1
    U = np.zeros((n, p))
    feats = phi.transform(data.s, data.m)
    for a in range(n_actions):
        rows = data.a == a
        U[rows, a * L:(a + 1) * L] = feats[rows]
    U[:, -1] = 1.0

    V = np.zeros((n, p))
    if regime.history is HistoryKind.MIXED:
        pmix = pi_e.probs(data.s_next)
        mixfeat = np.zeros((n, L))
        for a_star in range(n_actions):
            mixfeat += pmix[:, a_star:a_star + 1] * _avg_pair_features(
                phi, data.s_next, a_star, mediator, mc_draws, rng)
        pnext = pi_0.probs(data.s_next)
        for a in range(n_actions):
            V[:, a * L:(a + 1) * L] = pnext[:, a:a + 1] * mixfeat
    else:
        policy = pi_e if regime.history is HistoryKind.TARGET else pi_0
        pnext = policy.probs(data.s_next)
        for a in range(n_actions):
            F_a = _avg_pair_features(phi, data.s_next, a, mediator,
                                     mc_draws, rng)
            V[:, a * L:(a + 1) * L] = pnext[:, a:a + 1] * F_a
    return U, V


def _solve_q_system(U: np.ndarray, V: np.ndarray, resp: np.ndarray,
                    lam: float) -> np.ndarray:
    n, p = U.shape
    D = np.eye(p)
    D[-1, -1] = 0.0  # the average-reward coordinate is never penalized
    M = U.T @ (U - V) / n + lam * D
    rhs = U.T @ resp / n
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"Bellman system singular at ridge {lam:g} "
            f"(condition number {np.linalg.cond(M):.3e})") from exc


def _cv_ridge(U: np.ndarray, V: np.ndarray, resp: np.ndarray,
              grid: Sequence[float], folds: int) -> float:
    """Pick ridge by K-fold validation of the empirical Bellman moment norm."""
    n = U.shape[0]
    splits = np.array_split(np.arange(n), folds)
    scores = np.zeros(len(grid))
    for k, lam in enumerate(grid):
        total = 0.0
        for val_idx in splits:
            mask = np.ones(n, dtype=bool)
            mask[val_idx] = False
            try:
                beta = _solve_q_system(U[mask], V[mask], resp[mask], lam)
            except np.linalg.LinAlgError:
                total = np.inf
                break
            g = resp[val_idx] + (V[val_idx] - U[val_idx]) @ beta
            moment = U[val_idx].T @ g / val_idx.shape[0]
            total += float(moment @ moment)
        scores[k] = total
    return float(grid[int(np.argmin(scores))])


def fit_q_eta(data: TupleBatch, regime: Regime, mediator: MediatorModel,
              reward: RewardModel, pi_e: Policy, pi_0: Policy,
              phi: PairFeatures, n_actions: int = 2,
              ridge: float | str = 1e-8,
              ridge_grid: Sequence[float] = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1),
              cv_folds: int = 5, mc_draws: int = 100,
              rng: np.random.Generator | None = None) -> QModel:
    """Fit (Q, eta) for one regime from the linear Bellman moment system.

    Stacks beta = (beta_0, ..., beta_{K-1}, eta) and solves
    mean[U (U - V)'] beta = mean[U resp] with a ridge on every coordinate
    except eta; ridge="cv" selects the penalty by K-fold validation of the
    out-of-fold moment norm.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    resp = _q_response(data, regime, mediator, reward, pi_0, mc_draws, rng)
    U, V = _build_q_design(data, regime, mediator, pi_e, pi_0, phi,
                           n_actions, mc_draws, rng)
    lam = _cv_ridge(U, V, resp, ridge_grid, cv_folds) if ridge == "cv" else float(ridge)
    beta = _solve_q_system(U, V, resp, lam)
    n, p = U.shape
    D = np.eye(p)
    D[-1, -1] = 0.0
    residual = float(np.max(np.abs(
        (U.T @ (U - V) / n + lam * D) @ beta - U.T @ resp / n)))
    L = phi.dim
    blocks = beta[:-1].reshape(n_actions, L)
    return QModel(phi, blocks, beta[-1], residual, lam)


# ---------------------------------------------------------------------------
# nuisance bundles
# ---------------------------------------------------------------------------

class TabularBehaviorModel:
    """State-indexed action probabilities (oracle provenance, corruptible)."""

    def __init__(self, tab: TabularDynamics, table: np.ndarray):
        self.tab = tab
        self.table = table  # (n_s, K)

    def probs(self, s: np.ndarray) -> np.ndarray:
        return self.table[self.tab.state_index(s)]

    def prob_of(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        p = self.probs(s)
        return p[np.arange(p.shape[0]), np.asarray(a, dtype=int)]


@dataclass
class NuisanceSet:
    """Everything the effect estimators consume, with provenance tags.

    ``ratio`` is keyed by the history law the stationary ratio targets and
    ``q`` by regime.  ``swapped`` carries the same bundle with the roles of
    the target and control policies exchanged; the alternative decomposition
    estimators read from it.
    """

    pi_e: Policy
    pi_0: Policy
    behavior: object
    mediator: MediatorModel
    reward: RewardModel
    ratio: dict
    q: dict
    provenance: dict = field(default_factory=dict)
    swapped: "NuisanceSet | None" = None
    mc_draws: int = 100
    seed: int = 0

    def rng(self, tag: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, tag]))


def oracle_nuisances(spec: MmdpSpec, pi_e: Policy, pi_0: Policy,
                     pi_b: Policy, with_alternative: bool = True,
                     mc_draws: int = 100, seed: int = 0) -> NuisanceSet:
    """Exact nuisances of a finite environment, straight from the closed form."""
    if not spec.is_finite:
        raise ValueError("exact nuisances require a finite environment")
    tab = spec.tabular

    def build(pe: Policy, p0: Policy) -> NuisanceSet:
        oc = ExactOracle(spec, pe, p0, pi_b)
        ratio = {kind: TabularRatioModel(tab, oc.omega[kind].copy())
                 for kind in HistoryKind}
        q = {reg: TabularQModel(tab, oc.q_tables[reg].copy(), oc.etas[reg])
             for reg in REGIME_ORDER}
        return NuisanceSet(
            pi_e=pe, pi_0=p0,
            behavior=TabularBehaviorModel(tab, pi_b.probs(tab.states)),
            mediator=TabularMediatorModel(tab),
            reward=TabularRewardModel(tab),
            ratio=ratio, q=q,
            provenance={k: "oracle" for k in
                        ("behavior", "mediator", "reward", "ratio", "q")},
            mc_draws=mc_draws, seed=seed,
        )

    out = build(pi_e, pi_0)
    if with_alternative:
        out.swapped = build(pi_0, pi_e)
    return out


def fit_nuisances(data: TupleBatch, spec: MmdpSpec, pi_e: Policy,
                  pi_0: Policy, config: NuisanceConfig | None = None,
                  with_alternative: bool = False) -> NuisanceSet:
    """Fit the full nuisance bundle from behavior tuples."""
    if config is None:
        config = NuisanceConfig()
    K = spec.n_actions
    tab = spec.tabular
    clip = config.prob_clip

    behavior = fit_behavior(data, clip)
    mediator = fit_mediator(data, spec.mediator_kind, tab, clip)
    reward = fit_reward(data, spec.state_kind, K, tab)

    ridge_q = config.ridge_q
    if ridge_q == "auto":
        ridge_q = 1e-8 if spec.is_finite else "cv"
    ridge_w = config.ridge_omega
    if ridge_w is None:
        ridge_w = 1e-8 if spec.is_finite else 1e-6

    xi = default_state_features(spec, data, config)
    phi = default_pair_features(spec, data, config)
    b_obs = behavior.prob_of(data.s, data.a)

    def fit_ratio_for(weights: np.ndarray) -> RatioModel:
        return fit_ratio(data.s, data.s_next, weights, xi, ridge_w,
                         config.ratio_floor)

    def fit_q_for(reg: Regime, pe: Policy, p0: Policy, tag: int) -> QModel:
        return fit_q_eta(data, reg, mediator, reward, pe, p0, phi, K,
                         ridge_q, config.ridge_grid, config.cv_folds,
                         config.mc_draws, config.rng(tag))

    w_e = pi_e.prob_of(data.s, data.a) / b_obs
    w_0 = pi_0.prob_of(data.s, data.a) / b_obs
    rho = mediator_ratio(mediator, pi_e, data.s, data.a, data.m)
    ratio = {
        HistoryKind.TARGET: fit_ratio_for(w_e),
        HistoryKind.CONTROL: fit_ratio_for(w_0),
        HistoryKind.MIXED: fit_ratio_for(rho * w_0),
    }
    q = {reg: fit_q_for(reg, pi_e, pi_0, 100 + i)
         for i, reg in enumerate(REGIME_ORDER)}
    out = NuisanceSet(
        pi_e=pi_e, pi_0=pi_0, behavior=behavior, mediator=mediator,
        reward=reward, ratio=ratio, q=q,
        provenance={k: "fitted" for k in
                    ("behavior", "mediator", "reward", "ratio", "q")},
        mc_draws=config.mc_draws, seed=config.seed,
    )
    if with_alternative:
        # Role-swapped bundle.  The swapped PI_E/PI_0 regimes and the
        # swapped marginal ratios coincide with already-fitted objects, and
        # reusing them keeps the two decompositions' total effects identical.
        rho2 = mediator_ratio(mediator, pi_0, data.s, data.a, data.m)
        out.swapped = NuisanceSet(
            pi_e=pi_0, pi_0=pi_e, behavior=behavior, mediator=mediator,
            reward=reward,
            ratio={
                HistoryKind.TARGET: ratio[HistoryKind.CONTROL],
                HistoryKind.CONTROL: ratio[HistoryKind.TARGET],
                HistoryKind.MIXED: fit_ratio_for(rho2 * w_e),
            },
            q={
                Regime.PI_E: q[Regime.PI_0],
                Regime.PI_0: q[Regime.PI_E],
                Regime.G_E: fit_q_for(Regime.G_E, pi_0, pi_e, 201),
                Regime.PI_E0: fit_q_for(Regime.PI_E0, pi_0, pi_e, 202),
                Regime.G_0: fit_q_for(Regime.G_0, pi_0, pi_e, 203),
            },
            provenance=dict(out.provenance),
            mc_draws=config.mc_draws, seed=config.seed,
        )
    return out
