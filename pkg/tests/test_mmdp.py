"""Simulation layer: seeding, trajectory structure, pooling, serialization."""

import io

import numpy as np
import pytest

from dynmed.environments import build_environment
from dynmed.mmdp import (
    Regime,
    constant_policy,
    pool_tuples,
    read_trajectories_csv,
    simulate_dataset,
    simulate_interventional,
    trajectories_from_csv_string,
    trajectories_to_csv_string,
    write_trajectories_csv,
)


def _assert_traj_equal(a, b):
    assert a.traj_id == b.traj_id
    for attr in ("states", "actions", "mediators", "rewards", "final_state"):
        assert np.array_equal(getattr(a, attr), getattr(b, attr)), attr


def test_simulation_is_reproducible(toy):
    run1 = simulate_dataset(toy.spec, toy.behavior, 5, 20, seed=3)
    run2 = simulate_dataset(toy.spec, toy.behavior, 5, 20, seed=3)
    for t1, t2 in zip(run1, run2):
        _assert_traj_equal(t1, t2)
    other = simulate_dataset(toy.spec, toy.behavior, 5, 20, seed=4)
    assert not all(
        np.array_equal(t1.states, t2.states) for t1, t2 in zip(run1, other))


def test_each_trajectory_keyed_by_own_id(toy):
    """Trajectory i is a function of (seed, i), not of the batch size."""
    big = simulate_dataset(toy.spec, toy.behavior, 10, 15, seed=9)
    small = simulate_dataset(toy.spec, toy.behavior, 4, 15, seed=9)
    for i in range(4):
        _assert_traj_equal(big[i], small[i])


def test_trajectory_shapes_and_chain(semi):
    (traj,) = simulate_dataset(semi.spec, semi.behavior, 1, 30, seed=0)
    assert len(traj) == 30
    assert traj.states.shape == (30, 1)
    assert traj.mediators.shape == (30, 2)
    traj.validate()
    # the semi system defines the reward as the realized next state
    assert np.allclose(traj.next_states[:, 0], traj.rewards)


def test_pool_tuples_alignment(toy):
    trajs = simulate_dataset(toy.spec, toy.behavior, 3, 10, seed=1)
    batch = pool_tuples(trajs)
    assert len(batch) == 30
    for k, traj in enumerate(trajs):
        rows = slice(10 * k, 10 * (k + 1))
        assert np.array_equal(batch.s[rows], traj.states)
        assert np.array_equal(batch.s_next[rows][:-1], traj.states[1:])
        assert np.array_equal(batch.s_next[10 * k + 9], traj.final_state)
        assert np.all(batch.traj_id[rows] == traj.traj_id)
        assert np.array_equal(batch.t[rows], np.arange(10))


def test_pool_tuples_rejects_empty():
    with pytest.raises(ValueError):
        pool_tuples([])


def test_simulate_rejects_empty_sizes(toy):
    with pytest.raises(ValueError):
        simulate_dataset(toy.spec, toy.behavior, 0, 5, seed=0)
    with pytest.raises(ValueError):
        simulate_dataset(toy.spec, toy.behavior, 5, 0, seed=0)


def test_toy_frequencies_match_tables(toy):
    """Empirical kernels from a long rollout agree with the exact tables."""
    batch = pool_tuples(simulate_dataset(toy.spec, toy.behavior, 1200, 50, seed=5))
    tab = toy.spec.tabular
    s = batch.s[:, 0].astype(int)
    m = batch.m[:, 0].astype(int)
    s_next = batch.s_next[:, 0].astype(int)
    for si in (0, 1):
        # behavior policy
        sel = s == si
        assert toy.behavior.probs(np.array([[float(si)]]))[0, 1] == pytest.approx(
            batch.a[sel].mean(), abs=0.02)
        for ai in (0, 1):
            sel_a = sel & (batch.a == ai)
            # mediator mass
            assert tab.mediator_mass[si, ai, 1] == pytest.approx(
                m[sel_a].mean(), abs=0.02)
            for mi in (0, 1):
                sel_m = sel_a & (m == mi)
                assert sel_m.sum() >= 400
                # reward mean and transition kernel
                assert tab.reward_mean[si, ai, mi] == pytest.approx(
                    batch.r[sel_m].mean(), abs=0.5)
                assert tab.transition[si, ai, mi, 1] == pytest.approx(
                    s_next[sel_m].mean(), abs=0.05)


def test_interventional_regimes_with_identical_policies_coincide(toy):
    """When pi_e = pi_0 is degenerate, every regime is the same process."""
    always0 = constant_policy("a0", [1.0, 0.0])
    runs = {
        reg: simulate_interventional(toy.spec, reg, always0, always0, 4, 25, seed=13)
        for reg in Regime
    }
    for reg in (Regime.G_E, Regime.PI_E0, Regime.G_0, Regime.PI_0):
        for base, other in zip(runs[Regime.PI_E], runs[reg]):
            assert np.array_equal(base.states, other.states), reg
            assert np.array_equal(base.rewards, other.rewards), reg


def test_mixed_chain_mediator_law(toy):
    """In the mixed chain the action follows pi_0 while the mediator follows
    the pi_e-mixture of the mediator law, independently of the action."""
    trajs = simulate_interventional(toy.spec, Regime.G_0, toy.target,
                                    toy.control, 3000, 2, seed=21)
    batch = pool_tuples(trajs)
    # actions: pi_0 is the always-0 policy
    assert np.all(batch.a == 0)
    tab = toy.spec.tabular
    pe = toy.target.probs(tab.states)
    mix = np.einsum("sk,skm->sm", pe, tab.mediator_mass)
    s = batch.s[:, 0].astype(int)
    m = batch.m[:, 0].astype(int)
    for si in (0, 1):
        assert m[s == si].mean() == pytest.approx(mix[si, 1], abs=0.02)


def test_csv_round_trip_binary(toy):
    trajs = simulate_dataset(toy.spec, toy.behavior, 3, 8, seed=2)
    text = trajectories_to_csv_string(trajs)
    back = trajectories_from_csv_string(text)
    assert len(back) == 3
    for t1, t2 in zip(trajs, back):
        _assert_traj_equal(t1, t2)


def test_csv_round_trip_continuous(semi):
    trajs = simulate_dataset(semi.spec, semi.behavior, 2, 6, seed=2)
    buf = io.StringIO()
    write_trajectories_csv(trajs, buf)
    back = read_trajectories_csv(io.StringIO(buf.getvalue()))
    for t1, t2 in zip(trajs, back):
        _assert_traj_equal(t1, t2)


def test_policy_helpers():
    pol = constant_policy("p", [0.3, 0.7])
    s = np.zeros((4, 1))
    assert np.allclose(pol.probs(s), [[0.3, 0.7]] * 4)
    assert np.allclose(pol.prob_of(s, np.array([1, 0, 1, 1])),
                       [0.7, 0.3, 0.7, 0.7])


def test_multidim_rollout_smoke():
    env = build_environment("multidim")
    batch = pool_tuples(simulate_dataset(env.spec, env.behavior, 5, 10, seed=0))
    assert batch.s.shape == (50, 2)
    assert batch.m.shape == (50, 2)
    assert np.all(np.isfinite(batch.r))
