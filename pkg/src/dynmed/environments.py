"""Synthetic MMDP environments and their evaluation policies.

Four systems, each exposing the generative spec plus the behavior / target /
control policy triple:

- ``toy``: binary state and mediator, logistic kernels, rewards in {0, 10}.
- ``toy-iid``: the same system except the next state ignores (S, A, M)
  entirely (Pr(S'=1) = .2), which removes the state-transition pathway.
- ``semi``: scalar continuous state, 2-dim Gaussian mediator, reward equal to
  the next state; ``sigma`` scales the mediator/reward noise.
- ``multidim``: 2-dim state and mediator, unit noise, reward drawn separately
  from the next state.
"""

from __future__ import annotations

import numpy as np

from dataclasses import dataclass

from .mmdp import (
    MmdpSpec,
    NoiseSpec,
    Policy,
    SpaceKind,
    TabularDynamics,
    constant_policy,
    enumerate_binary,
    expit,
    logistic_policy,
)

ENV_IDS = ("toy", "toy-iid", "semi", "multidim")


@dataclass(frozen=True)
class EnvironmentBundle:
    spec: MmdpSpec
    behavior: Policy
    target: Policy   # pi_e
    control: Policy  # pi_0


def build_environment(env_id: str, sigma: float = 2.0) -> EnvironmentBundle:
    """Construct an environment bundle by id (``sigma`` only affects ``semi``)."""
    if env_id == "toy":
        return _toy(iid_state=False)
    if env_id == "toy-iid":
        return _toy(iid_state=True)
    if env_id == "semi":
        return _semi(sigma)
    if env_id == "multidim":
        return _multidim()
    raise ValueError(f"unknown environment {env_id!r}; expected one of {ENV_IDS}")


def environment_from_descriptor(descriptor: dict) -> EnvironmentBundle:
    return build_environment(descriptor["env"], float(descriptor.get("sigma", 2.0)))


# ---------------------------------------------------------------------------
# toy: everything binary, fully enumerable
# ---------------------------------------------------------------------------

def _toy_mediator_p1(s, a):
    return expit(1.0 - 1.5 * s + 2.5 * a)


def _toy_reward_p10(s, a, m):
    return expit(1.0 + 2.0 * s - 1.0 * a - 2.5 * m)


def _toy_next_p1(s, a, m, iid_state):
    if iid_state:
        return np.full(np.broadcast(s, a, m).shape, 0.2)
    return expit(0.5 + 3.0 * s - 2.5 * a - 0.5 * m)


def _toy(iid_state: bool) -> EnvironmentBundle:
    states = enumerate_binary(1)
    mediators = enumerate_binary(1)
    sg = states[:, 0][:, None, None]      # (n_s,1,1)
    ag = np.arange(2)[None, :, None]
    mg = mediators[:, 0][None, None, :]

    p1_m = _toy_mediator_p1(sg, ag)
    mediator_mass = np.concatenate([1 - p1_m, p1_m], axis=2)
    p10 = _toy_reward_p10(sg, ag, mg)
    reward_mean_tab = 10.0 * p10
    p1_next = _toy_next_p1(sg, ag, mg, iid_state)
    transition = np.stack([1 - p1_next, p1_next], axis=-1)
    reward_mass = np.stack([1 - p10, p10], axis=-1)

    # In the iid variant every state (S_0 included) is drawn from the fixed
    # Bern(0.2) law, so pooled tuples carry no start-up transient.
    init_p1 = 0.2 if iid_state else 0.5
    tab = TabularDynamics(
        states=states,
        mediators=mediators,
        initial=np.array([1.0 - init_p1, init_p1]),
        mediator_mass=mediator_mass,
        reward_mean=reward_mean_tab,
        transition=transition,
        reward_support=np.array([0.0, 10.0]),
        reward_mass=reward_mass,
    )

    def initial_from_noise(z):
        return (z < init_p1).astype(float)

    def mediator_from_noise(s, a, z):
        p1 = _toy_mediator_p1(s[:, 0], a)
        return (z[:, 0] < p1).astype(float)[:, None]

    def outcome_from_noise(s, a, m, z):
        r = 10.0 * (z[:, 0] < _toy_reward_p10(s[:, 0], a, m[:, 0]))
        s1 = (z[:, 1] < _toy_next_p1(s[:, 0], a, m[:, 0], iid_state)).astype(float)
        return s1[:, None], r.astype(float)

    def mediator_density(s, a, m):
        p1 = _toy_mediator_p1(np.atleast_2d(s)[:, 0], np.asarray(a))
        m0 = np.atleast_2d(m)[:, 0]
        return np.where(m0 > 0.5, p1, 1.0 - p1)

    def reward_mean(s, a, m):
        return 10.0 * _toy_reward_p10(np.atleast_2d(s)[:, 0], np.asarray(a),
                                      np.atleast_2d(m)[:, 0])

    env_id = "toy-iid" if iid_state else "toy"
    spec = MmdpSpec(
        name=env_id,
        state_dim=1,
        mediator_dim=1,
        n_actions=2,
        state_kind=SpaceKind.BINARY,
        mediator_kind=SpaceKind.BINARY,
        initial_noise=NoiseSpec("uniform", 1),
        mediator_noise=NoiseSpec("uniform", 1),
        outcome_noise=NoiseSpec("uniform", 2),
        initial_from_noise=initial_from_noise,
        mediator_from_noise=mediator_from_noise,
        outcome_from_noise=outcome_from_noise,
        mediator_density=mediator_density,
        reward_mean=reward_mean,
        tabular=tab,
        descriptor={"env": env_id},
    )
    behavior = logistic_policy("behavior", slope=[-2.0], intercept=1.0)
    target = logistic_policy("target", slope=[1.0], intercept=1.5)
    control = constant_policy("control", [1.0, 0.0])
    return EnvironmentBundle(spec, behavior, target, control)


# ---------------------------------------------------------------------------
# semi: continuous scalar state, reward doubles as next state
# ---------------------------------------------------------------------------

def _semi_mediator_means(s, a):
    s0 = s[:, 0]
    root = np.sqrt(np.abs(s0))
    return np.column_stack([root + (a - 0.5), 0.5 * (a - 0.5) * root - 0.5 * s0])


def _semi_reward_mean(s, a, m):
    s0 = np.atleast_2d(s)[:, 0]
    m = np.atleast_2d(m)
    return (0.75 * (s0 + np.sqrt(np.abs(s0))
                    + (1 + np.sqrt(np.abs(m[:, 0]) + np.abs(m[:, 1]))) * (np.asarray(a) - 0.5))
            + 1.5 * (m[:, 0] + m[:, 1]))


def _semi(sigma: float) -> EnvironmentBundle:
    if sigma <= 0:
        raise ValueError("sigma must be positive")

    def initial_from_noise(z):
        return z.copy()

    def mediator_from_noise(s, a, z):
        return _semi_mediator_means(s, np.asarray(a)) + sigma * z

    def outcome_from_noise(s, a, m, z):
        r = _semi_reward_mean(s, a, m) + sigma * z[:, 0]
        return r[:, None], r

    def mediator_density(s, a, m):
        mu = _semi_mediator_means(np.atleast_2d(s), np.asarray(a))
        resid = (np.atleast_2d(m) - mu) / sigma
        return np.exp(-0.5 * (resid ** 2).sum(axis=1)) / (2 * np.pi * sigma ** 2)

    spec = MmdpSpec(
        name="semi",
        state_dim=1,
        mediator_dim=2,
        n_actions=2,
        state_kind=SpaceKind.CONTINUOUS,
        mediator_kind=SpaceKind.CONTINUOUS,
        initial_noise=NoiseSpec("normal", 1),
        mediator_noise=NoiseSpec("normal", 2),
        outcome_noise=NoiseSpec("normal", 1),
        initial_from_noise=initial_from_noise,
        mediator_from_noise=mediator_from_noise,
        outcome_from_noise=outcome_from_noise,
        mediator_density=mediator_density,
        reward_mean=_semi_reward_mean,
        descriptor={"env": "semi", "sigma": sigma},
    )
    behavior = constant_policy("behavior", [0.5, 0.5])
    target = logistic_policy("target", slope=[0.7], intercept=0.0)
    control = constant_policy("control", [1.0, 0.0])
    return EnvironmentBundle(spec, behavior, target, control)


# ---------------------------------------------------------------------------
# multidim: 2-dim state and mediator, unit noise
# ---------------------------------------------------------------------------

def _multi_mediator_means(s, a):
    roots = np.sqrt(np.abs(s[:, 0])) + np.sqrt(np.abs(s[:, 1]))
    return np.column_stack([
        0.5 * roots + (a - 0.5),
        -0.25 * (s[:, 0] + s[:, 1]) + 0.25 * (a - 0.5) * roots,
    ])


def _multi_reward_mean(s, a, m):
    s = np.atleast_2d(s)
    m = np.atleast_2d(m)
    roots = np.sqrt(np.abs(s[:, 0])) + np.sqrt(np.abs(s[:, 1]))
    med = 1 + np.sqrt(np.abs(m[:, 0]) + np.abs(m[:, 1]))
    return (0.75 * (0.5 * (s[:, 0] + s[:, 1] + roots) + med * (np.asarray(a) - 0.5))
            + 1.5 * (m[:, 0] + m[:, 1]))


def _multi_next_means(s, a, m):
    med = 1 + np.sqrt(np.abs(m[:, 0]) + np.abs(m[:, 1]))
    lift = 1.5 * (m[:, 0] + m[:, 1])
    cols = [
        0.75 * (s[:, i] + np.sqrt(np.abs(s[:, i])) + med * (a - 0.5)) + lift
        for i in (0, 1)
    ]
    return np.column_stack(cols)


def _multidim() -> EnvironmentBundle:
    def initial_from_noise(z):
        return z.copy()

    def mediator_from_noise(s, a, z):
        return _multi_mediator_means(s, np.asarray(a)) + z

    def outcome_from_noise(s, a, m, z):
        a = np.asarray(a)
        s_next = _multi_next_means(s, a, m) + z[:, :2]
        r = _multi_reward_mean(s, a, m) + z[:, 2]
        return s_next, r

    def mediator_density(s, a, m):
        mu = _multi_mediator_means(np.atleast_2d(s), np.asarray(a))
        resid = np.atleast_2d(m) - mu
        return np.exp(-0.5 * (resid ** 2).sum(axis=1)) / (2 * np.pi)

    spec = MmdpSpec(
        name="multidim",
        state_dim=2,
        mediator_dim=2,
        n_actions=2,
        state_kind=SpaceKind.CONTINUOUS,
        mediator_kind=SpaceKind.CONTINUOUS,
        initial_noise=NoiseSpec("normal", 2),
        mediator_noise=NoiseSpec("normal", 2),
        outcome_noise=NoiseSpec("normal", 3),
        initial_from_noise=initial_from_noise,
        mediator_from_noise=mediator_from_noise,
        outcome_from_noise=outcome_from_noise,
        mediator_density=mediator_density,
        reward_mean=_multi_reward_mean,
        descriptor={"env": "multidim"},
    )
    behavior = constant_policy("behavior", [0.5, 0.5])
    target = Policy("target", lambda s: _multi_target_probs(s), 2)
    control = constant_policy("control", [1.0, 0.0])
    return EnvironmentBundle(spec, behavior, target, control)


def _multi_target_probs(s):
    p1 = expit(0.3 * (s[:, 0] + s[:, 1]))
    return np.column_stack([1.0 - p1, p1])
