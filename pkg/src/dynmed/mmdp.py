"""Core data model for mediated Markov decision processes.

An MMDP step emits (S_t, A_t, M_t, R_t, S_{t+1}): the agent picks an action,
a mediator is realized given (state, action), and the reward / next state are
drawn given (state, action, mediator).  Everything downstream (oracles,
density-ratio fits, effect estimators) consumes the pooled transition tuples
produced here.

Sampling is driven by named per-trajectory RNG substreams so that a dataset is
reproducible tuple-for-tuple regardless of batch size or generation order, and
so that trajectories generated under different policies with the same seed
share their underlying noise (useful for coupling checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, NamedTuple, Sequence

import csv
import io
import json

import numpy as np


# ---------------------------------------------------------------------------
# spaces and kernels
# ---------------------------------------------------------------------------

class SpaceKind(Enum):
    """Support of a state/mediator coordinate block."""

    BINARY = "binary"          # {0,1}^dim, enumerable
    CONTINUOUS = "continuous"  # R^dim


@dataclass(frozen=True)
class NoiseSpec:
    """Shape/kind of the per-step noise a structural kernel consumes."""

    kind: str  # "uniform" or "normal"
    dim: int

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.random((n, self.dim))
        if self.kind == "normal":
            return rng.standard_normal((n, self.dim))
        raise ValueError(f"unknown noise kind {self.kind!r}")


@dataclass(frozen=True)
class TabularDynamics:
    """Exact finite-space view of an MMDP (only for BINARY state/mediator).

    Index convention: state/mediator points are rows of ``states`` /
    ``mediators``; all tables are indexed [state, action, mediator(, ...)].
    """

    states: np.ndarray         # (n_s, ds)
    mediators: np.ndarray      # (n_m, dm)
    initial: np.ndarray        # (n_s,)
    mediator_mass: np.ndarray  # (n_s, K, n_m)
    reward_mean: np.ndarray    # (n_s, K, n_m)
    transition: np.ndarray     # (n_s, K, n_m, n_s)
    reward_support: np.ndarray  # (n_r,) distinct reward values
    reward_mass: np.ndarray    # (n_s, K, n_m, n_r)

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def n_mediators(self) -> int:
        return self.mediators.shape[0]

    def state_index(self, s: np.ndarray) -> np.ndarray:
        return _binary_code(np.atleast_2d(s))

    def mediator_index(self, m: np.ndarray) -> np.ndarray:
        return _binary_code(np.atleast_2d(m))


def _binary_code(x: np.ndarray) -> np.ndarray:
    """Map rows of a {0,1}-valued matrix to integer codes (bit order: col 0 = LSB)."""
    weights = 1 << np.arange(x.shape[1])
    return (np.rint(x).astype(np.int64) @ weights).astype(np.intp)


def enumerate_binary(dim: int) -> np.ndarray:
    """All points of {0,1}^dim as float rows, ordered by their binary code."""
    codes = np.arange(1 << dim)
    return ((codes[:, None] >> np.arange(dim)) & 1).astype(float)


@dataclass(frozen=True)
class MmdpSpec:
    """Generative description of an MMDP.

    The structural samplers map pre-drawn noise to realizations, which keeps
    simulation vectorizable across trajectories while each trajectory owns its
    RNG streams.  ``mediator_density`` evaluates p_m(m | s, a) (a mass for
    BINARY mediators); ``reward_mean`` evaluates r(s, a, m) = E[R | s, a, m].
    """

    name: str
    state_dim: int
    mediator_dim: int
    n_actions: int
    state_kind: SpaceKind
    mediator_kind: SpaceKind
    initial_noise: NoiseSpec
    mediator_noise: NoiseSpec
    outcome_noise: NoiseSpec
    initial_from_noise: Callable[[np.ndarray], np.ndarray]
    mediator_from_noise: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    outcome_from_noise: Callable[
        [np.ndarray, np.ndarray, np.ndarray, np.ndarray],
        tuple[np.ndarray, np.ndarray],
    ]
    mediator_density: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    reward_mean: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    tabular: TabularDynamics | None = None
    descriptor: dict = field(default_factory=dict)

    # Generator-facing convenience wrappers -------------------------------
    def sample_initial(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        return self.initial_from_noise(self.initial_noise.draw(rng, n))

    def sample_mediator(self, s: np.ndarray, a: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
        s = np.atleast_2d(s)
        return self.mediator_from_noise(s, np.asarray(a), self.mediator_noise.draw(rng, s.shape[0]))

    def sample_outcome(self, s: np.ndarray, a: np.ndarray, m: np.ndarray,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        s = np.atleast_2d(s)
        return self.outcome_from_noise(s, np.asarray(a), np.atleast_2d(m),
                                       self.outcome_noise.draw(rng, s.shape[0]))

    @property
    def is_finite(self) -> bool:
        return self.tabular is not None


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Policy:
    """Stochastic state-feedback policy over a finite action set."""

    name: str
    prob_fn: Callable[[np.ndarray], np.ndarray]  # (n, ds) -> (n, K)
    n_actions: int = 2

    def probs(self, s: np.ndarray) -> np.ndarray:
        p = np.asarray(self.prob_fn(np.atleast_2d(s)), dtype=float)
        return p

    def prob_of(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        p = self.probs(s)
        return p[np.arange(p.shape[0]), np.asarray(a, dtype=int)]

    def sample(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(np.atleast_2d(s).shape[0])
        return actions_from_uniform(self.probs(s), u)


def actions_from_uniform(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF action draw; consumes exactly one uniform per decision."""
    cum = np.cumsum(probs, axis=1)
    return np.minimum(
        (u[:, None] >= cum[:, :-1]).sum(axis=1), probs.shape[1] - 1
    ).astype(np.intp)


def logistic_policy(name: str, slope: np.ndarray | float, intercept: float) -> Policy:
    """Binary policy with Pr(A=1 | s) = expit(intercept + slope . s)."""
    w = np.atleast_1d(np.asarray(slope, dtype=float))

    def prob_fn(s: np.ndarray) -> np.ndarray:
        p1 = expit(intercept + s @ w)
        return np.column_stack([1.0 - p1, p1])

    return Policy(name, prob_fn, n_actions=2)


def constant_policy(name: str, probs: Sequence[float]) -> Policy:
    p = np.asarray(probs, dtype=float)

    def prob_fn(s: np.ndarray) -> np.ndarray:
        return np.broadcast_to(p, (s.shape[0], p.shape[0])).copy()

    return Policy(name, prob_fn, n_actions=p.shape[0])


def deterministic_policy(name: str, action_fn: Callable[[np.ndarray], np.ndarray],
                         n_actions: int = 2) -> Policy:
    """Policy putting mass one on action_fn(s) (vectorized over states)."""

    def prob_fn(s: np.ndarray) -> np.ndarray:
        a = np.asarray(action_fn(s), dtype=int)
        p = np.zeros((s.shape[0], n_actions))
        p[np.arange(s.shape[0]), a] = 1.0
        return p

    return Policy(name, prob_fn, n_actions=n_actions)


def expit(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------

class HistoryKind(Enum):
    TARGET = "target"    # all steps follow pi_e
    MIXED = "mixed"      # actions pi_0, mediators from the pi_e mixture
    CONTROL = "control"  # all steps follow pi_0


class PseudoRewardKind(Enum):
    OBSERVED = "observed"            # the process reward itself
    CONTROL_ACTION = "control_action"          # r(S, pi_0, M), M from the process
    CONTROL_ACTION_FRESH = "control_action_fresh"  # r(S, pi_0): fresh a and m


class Regime(Enum):
    """The five average-reward regimes entering the effect decomposition.

    Each regime is a stationary process (its *history* law) together with a
    one-step evaluation law whose mean reward defines eta.  ``history`` gives
    the process driving the state chain, ``step_action`` the evaluated-step
    action law, and ``pseudo_reward`` what is averaged.
    """

    PI_E = "pi_e"
    G_E = "g_e"
    PI_E0 = "pi_e0"
    G_0 = "g_0"
    PI_0 = "pi_0"

    @property
    def history(self) -> HistoryKind:
        return _REGIME_HISTORY[self]

    @property
    def step_action(self) -> str:
        """Policy generating the evaluated-step action: 'target' or 'control'."""
        return "target" if self is Regime.PI_E else "control"

    @property
    def pseudo_reward(self) -> PseudoRewardKind:
        return _REGIME_PSEUDO[self]


_REGIME_HISTORY = {
    Regime.PI_E: HistoryKind.TARGET,
    Regime.G_E: HistoryKind.TARGET,
    Regime.PI_E0: HistoryKind.TARGET,
    Regime.G_0: HistoryKind.MIXED,
    Regime.PI_0: HistoryKind.CONTROL,
}

_REGIME_PSEUDO = {
    Regime.PI_E: PseudoRewardKind.OBSERVED,
    Regime.G_E: PseudoRewardKind.CONTROL_ACTION,
    Regime.PI_E0: PseudoRewardKind.CONTROL_ACTION_FRESH,
    Regime.G_0: PseudoRewardKind.CONTROL_ACTION_FRESH,
    Regime.PI_0: PseudoRewardKind.OBSERVED,
}

REGIME_ORDER = [Regime.PI_E, Regime.G_E, Regime.PI_E0, Regime.G_0, Regime.PI_0]

EFFECT_NAMES = ("ide", "ime", "dde", "dme", "ate")


# ---------------------------------------------------------------------------
# trajectories and pooled tuples
# ---------------------------------------------------------------------------

class TransitionTuple(NamedTuple):
    s: np.ndarray
    a: int
    m: np.ndarray
    r: float
    s_next: np.ndarray


@dataclass
class Trajectory:
    """One rollout: states[t], actions[t], mediators[t], rewards[t], then S_T."""

    traj_id: int
    states: np.ndarray      # (T, ds)
    actions: np.ndarray     # (T,)
    mediators: np.ndarray   # (T, dm)
    rewards: np.ndarray     # (T,)
    final_state: np.ndarray  # (ds,)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def next_states(self) -> np.ndarray:
        return np.vstack([self.states[1:], self.final_state[None, :]])

    def __getitem__(self, t: int) -> TransitionTuple:
        return TransitionTuple(self.states[t], int(self.actions[t]),
                               self.mediators[t], float(self.rewards[t]),
                               self.next_states[t])

    def validate(self) -> None:
        T = len(self)
        assert self.actions.shape == (T,) and self.rewards.shape == (T,)
        assert self.mediators.shape[0] == T
        if T > 1:
            assert np.array_equal(self.states[1:], self.next_states[:-1])


@dataclass
class TupleBatch:
    """Columnar pool of transition tuples (the estimators' input format)."""

    s: np.ndarray        # (n, ds)
    a: np.ndarray        # (n,)
    m: np.ndarray        # (n, dm)
    r: np.ndarray        # (n,)
    s_next: np.ndarray   # (n, ds)
    traj_id: np.ndarray  # (n,)
    t: np.ndarray        # (n,)

    def __len__(self) -> int:
        return self.s.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return TransitionTuple(self.s[i], int(self.a[i]), self.m[i],
                                   float(self.r[i]), self.s_next[i])
        return TupleBatch(self.s[i], self.a[i], self.m[i], self.r[i],
                          self.s_next[i], self.traj_id[i], self.t[i])

    def __iter__(self) -> Iterator[TransitionTuple]:
        return (self[i] for i in range(len(self)))


def pool_tuples(trajectories: Sequence[Trajectory]) -> TupleBatch:
    """Flatten trajectories into one tuple pool, preserving (traj, t) labels."""
    if not trajectories:
        raise ValueError("cannot pool an empty trajectory list")
    return TupleBatch(
        s=np.concatenate([tr.states for tr in trajectories]),
        a=np.concatenate([tr.actions for tr in trajectories]),
        m=np.concatenate([tr.mediators for tr in trajectories]),
        r=np.concatenate([tr.rewards for tr in trajectories]),
        s_next=np.concatenate([tr.next_states for tr in trajectories]),
        traj_id=np.concatenate([np.full(len(tr), tr.traj_id) for tr in trajectories]),
        t=np.concatenate([np.arange(len(tr)) for tr in trajectories]),
    )


# ---------------------------------------------------------------------------
# seeded simulation
# ---------------------------------------------------------------------------

# named substreams per trajectory; the fixed order is part of the format
_STREAMS = ("init", "action", "mix_action", "mediator", "outcome", "side")


class TrajectoryStreams:
    """Named, independent RNG streams for one trajectory.

    Keyed by (seed, traj_id).  Actions always consume exactly one uniform per
    step, so two policies driven by the same streams see identical noise.
    """

    def __init__(self, seed: int, traj_id: int):
        children = np.random.SeedSequence([int(seed), int(traj_id)]).spawn(len(_STREAMS))
        self._gen = {name: np.random.default_rng(ss)
                     for name, ss in zip(_STREAMS, children)}

    def gen(self, name: str) -> np.random.Generator:
        return self._gen[name]


def _batch_noise(spec: MmdpSpec, seed: int, traj_ids: Sequence[int], T: int,
                 include_mix: bool) -> dict:
    """Pre-draw per-trajectory noise blocks for a vectorized rollout."""
    n = len(traj_ids)
    u_act = np.empty((n, T))
    u_mix = np.empty((n, T)) if include_mix else None
    z_init = np.empty((n, spec.initial_noise.dim))
    z_med = np.empty((n, T, spec.mediator_noise.dim))
    z_out = np.empty((n, T, spec.outcome_noise.dim))
    for i, tid in enumerate(traj_ids):
        streams = TrajectoryStreams(seed, tid)
        z_init[i] = spec.initial_noise.draw(streams.gen("init"), 1)[0]
        u_act[i] = streams.gen("action").random(T)
        if include_mix:
            u_mix[i] = streams.gen("mix_action").random(T)
        z_med[i] = spec.mediator_noise.draw(streams.gen("mediator"), T)
        z_out[i] = spec.outcome_noise.draw(streams.gen("outcome"), T)
    return dict(u_act=u_act, u_mix=u_mix, z_init=z_init, z_med=z_med, z_out=z_out)


def _rollout(spec: MmdpSpec, T: int, seed: int, traj_ids: Sequence[int],
             action_policy: Policy, mix_policy: Policy | None) -> list[Trajectory]:
    """Shared rollout engine.

    With ``mix_policy`` unset this is the plain MMDP under ``action_policy``.
    With it set, mediators are drawn as if actions came from ``mix_policy``
    (drawn on an independent substream) while the process action still comes
    from ``action_policy`` -- the mixed-history process.
    """
    n = len(traj_ids)
    noise = _batch_noise(spec, seed, traj_ids, T, include_mix=mix_policy is not None)
    s = spec.initial_from_noise(noise["z_init"])
    states = np.empty((n, T, spec.state_dim))
    actions = np.empty((n, T), dtype=np.intp)
    mediators = np.empty((n, T, spec.mediator_dim))
    rewards = np.empty((n, T))
    for t in range(T):
        a = actions_from_uniform(action_policy.probs(s), noise["u_act"][:, t])
        if mix_policy is None:
            m = spec.mediator_from_noise(s, a, noise["z_med"][:, t])
        else:
            a_star = actions_from_uniform(mix_policy.probs(s), noise["u_mix"][:, t])
            m = spec.mediator_from_noise(s, a_star, noise["z_med"][:, t])
        s_next, r = spec.outcome_from_noise(s, a, m, noise["z_out"][:, t])
        states[:, t] = s
        actions[:, t] = a
        mediators[:, t] = m
        rewards[:, t] = r
        s = s_next
    return [
        Trajectory(tid, states[i], actions[i], mediators[i], rewards[i], s[i])
        for i, tid in enumerate(traj_ids)
    ]


def sample_trajectory(spec: MmdpSpec, policy: Policy, T: int, seed: int,
                      traj_id: int = 0) -> Trajectory:
    """Roll out one trajectory of T transition tuples under ``policy``."""
    if T <= 0:
        raise ValueError("horizon must be positive")
    return _rollout(spec, T, seed, [traj_id], policy, None)[0]


def simulate_dataset(spec: MmdpSpec, policy: Policy, n_traj: int, T: int,
                     seed: int) -> list[Trajectory]:
    """n_traj independent trajectories; trajectory i is keyed by (seed, i)."""
    if n_traj <= 0 or T <= 0:
        raise ValueError("n_traj and horizon must be positive")
    return _rollout(spec, T, seed, list(range(n_traj)), policy, None)


def sample_interventional_trajectory(spec: MmdpSpec, regime: Regime,
                                     pi_e: Policy, pi_0: Policy, T: int,
                                     seed: int, traj_id: int = 0) -> Trajectory:
    """Roll out a regime's *history* process (for Monte Carlo ground truth).

    G_E's history is the plain pi_e process; G_0's draws actions from pi_0
    while mediators follow the pi_e mixture.  The reward slot carries the
    process's own rewards; regime-specific one-step evaluations are the Monte
    Carlo oracle's job.
    """
    kind = regime.history
    if kind is HistoryKind.TARGET:
        return _rollout(spec, T, seed, [traj_id], pi_e, None)[0]
    if kind is HistoryKind.MIXED:
        return _rollout(spec, T, seed, [traj_id], pi_0, pi_e)[0]
    return _rollout(spec, T, seed, [traj_id], pi_0, None)[0]


def simulate_interventional(spec: MmdpSpec, regime: Regime, pi_e: Policy,
                            pi_0: Policy, n_traj: int, T: int,
                            seed: int) -> list[Trajectory]:
    kind = regime.history
    ids = list(range(n_traj))
    if kind is HistoryKind.TARGET:
        return _rollout(spec, T, seed, ids, pi_e, None)
    if kind is HistoryKind.MIXED:
        return _rollout(spec, T, seed, ids, pi_0, pi_e)
    return _rollout(spec, T, seed, ids, pi_0, None)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def trajectory_header(state_dim: int, mediator_dim: int) -> list[str]:
    return (["traj_id", "t"]
            + [f"s{i}" for i in range(state_dim)]
            + ["a"]
            + [f"m{i}" for i in range(mediator_dim)]
            + ["r"])


def write_trajectories_csv(trajectories: Sequence[Trajectory], fh) -> None:
    """Write rollouts as rows traj_id,t,s...,a,m...,r.

    Each trajectory ends with a terminal row at t=T holding the final state
    and empty action/mediator/reward fields, so the last tuple's next state
    survives the round trip.
    """
    if not trajectories:
        raise ValueError("nothing to write")
    ds = trajectories[0].states.shape[1]
    dm = trajectories[0].mediators.shape[1]
    w = csv.writer(fh)
    w.writerow(trajectory_header(ds, dm))
    for tr in trajectories:
        for t in range(len(tr)):
            w.writerow([tr.traj_id, t]
                       + [_fmt(v) for v in tr.states[t]]
                       + [int(tr.actions[t])]
                       + [_fmt(v) for v in tr.mediators[t]]
                       + [_fmt(tr.rewards[t])])
        w.writerow([tr.traj_id, len(tr)]
                   + [_fmt(v) for v in tr.final_state]
                   + [""] + [""] * dm + [""])


def read_trajectories_csv(fh) -> list[Trajectory]:
    rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    ds = sum(1 for c in header if c.startswith("s") and c != "s")
    dm = sum(1 for c in header if c.startswith("m"))
    out: list[Trajectory] = []
    cur_id, S, A, M, R = None, [], [], [], []

    def flush(final_state):
        out.append(Trajectory(int(cur_id), np.array(S).reshape(len(S), ds),
                              np.array(A, dtype=np.intp),
                              np.array(M).reshape(len(M), dm),
                              np.array(R), np.asarray(final_state)))

    for row in body:
        tid = int(row[0])
        state = [float(v) for v in row[2:2 + ds]]
        a_field = row[2 + ds]
        if cur_id is None:
            cur_id = tid
        if a_field == "":  # terminal row closes the trajectory
            flush(state)
            cur_id, S, A, M, R = None, [], [], [], []
            continue
        S.append(state)
        A.append(int(a_field))
        M.append([float(v) for v in row[3 + ds:3 + ds + dm]])
        R.append(float(row[3 + ds + dm]))
    if cur_id is not None:
        raise ValueError("trajectory stream ended without a terminal row")
    return out


def trajectories_to_csv_string(trajectories: Sequence[Trajectory]) -> str:
    buf = io.StringIO()
    write_trajectories_csv(trajectories, buf)
    return buf.getvalue()


def trajectories_from_csv_string(text: str) -> list[Trajectory]:
    return read_trajectories_csv(io.StringIO(text))


def spec_descriptor_json(spec: MmdpSpec) -> str:
    """JSON descriptor sufficient to rebuild the spec via the environment registry."""
    d = dict(spec.descriptor)
    d.update(
        name=spec.name,
        state_dim=spec.state_dim,
        mediator_dim=spec.mediator_dim,
        n_actions=spec.n_actions,
        state_kind=spec.state_kind.value,
        mediator_kind=spec.mediator_kind.value,
    )
    return json.dumps(d, indent=2, sort_keys=True)
