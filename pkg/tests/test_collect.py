import numpy as np
import pytest

from reachsafe.collect import (
    UnsafeSampleShortage,
    collect_safe_dataset,
    collect_unsafe_samples,
)
from reachsafe.cmdp import END_INTERVENTION, SAFE_ONLY, UNSAFE_SMALL
from reachsafe.envs import (
    behavior_mixture,
    integrator_behavior,
    make_double_integrator,
    make_hazard_gridworld,
)
from reachsafe.oracle import compute_feasible_set_oracle


def test_safe_dataset_contains_no_violation():
    env = make_hazard_gridworld(5, 5, [(2, 2)], momentum=1)
    mix = behavior_mixture(env, [("goal_greedy", 0.5), ("random", 0.5)])
    ds = collect_safe_dataset(env, mix, n_transitions=800, seed=3)
    assert ds.tag == SAFE_ONLY
    assert len(ds) == 800
    assert int(ds.cost.sum()) == 0
    for i in range(len(ds)):
        assert env.cost(ds.s[i]) == 0
        assert env.cost(ds.s2[i]) == 0


def test_straight_driver_terminals_are_infeasible():
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    driver = integrator_behavior(env, "outward")
    ds = collect_safe_dataset(env, driver, n_transitions=400, seed=0)
    oracle = compute_feasible_set_oracle(env)
    terminals = ds.episode_end_indices(END_INTERVENTION)
    assert terminals, "full-throttle driving must trigger interventions"
    for idx in terminals:
        assert not oracle.label(ds.s2[idx])
    assert "no_infeasible_terminals" not in ds.meta


def test_always_brake_never_triggers_intervention():
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    braker = integrator_behavior(env, "brake")
    ds = collect_safe_dataset(env, braker, n_transitions=300, seed=1)
    assert ds.meta.get("no_infeasible_terminals") is True
    assert ds.episode_end_indices(END_INTERVENTION) == []
    oracle = compute_feasible_set_oracle(env)
    for i in range(0, len(ds), 7):
        assert oracle.label(ds.s[i])


def test_zero_transitions_is_a_valid_empty_dataset():
    env = make_hazard_gridworld(5, 5, [(2, 2)], momentum=0)
    ds = collect_safe_dataset(env, lambda s, rng: np.zeros(2), 0, seed=0)
    assert len(ds) == 0
    assert ds.tag == SAFE_ONLY


def test_collection_is_deterministic_per_seed():
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    mix = behavior_mixture(env, [("creep", 0.6), ("random", 0.4)])
    a = collect_safe_dataset(env, mix, n_transitions=500, seed=11)
    b = collect_safe_dataset(env, mix, n_transitions=500, seed=11)
    assert np.array_equal(a.s, b.s)
    assert np.array_equal(a.a, b.a)
    assert np.array_equal(a.r, b.r)
    c = collect_safe_dataset(env, mix, n_transitions=500, seed=12)
    assert not np.array_equal(a.s, c.s)


def test_episode_metadata_distinguishes_end_reasons():
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    mix = behavior_mixture(env, [("outward", 0.5), ("brake", 0.5)])
    ds = collect_safe_dataset(env, mix, n_transitions=600, seed=5)
    reasons = {e["reason"] for e in ds.meta["episode_ends"]}
    assert END_INTERVENTION in reasons
    assert "horizon" in reasons
    # rollout_start_states pulls in the terminal next states as well.
    starts = ds.rollout_start_states()
    assert len(starts) == len(ds) + len(ds.meta["episode_ends"])


def test_unsafe_samples_all_violate():
    env = make_hazard_gridworld(6, 6, [(3, 3), (1, 4)], momentum=0)
    ds = collect_unsafe_samples(env, n=100, seed=2)
    assert ds.tag == UNSAFE_SMALL
    assert len(ds) == 100
    assert np.all(ds.cost == 1)
    for i in range(len(ds)):
        assert env.cost(ds.s2[i]) == 1


def test_unsafe_zero_request_is_empty():
    env = make_hazard_gridworld(5, 5, [(2, 2)], momentum=0)
    ds = collect_unsafe_samples(env, n=0, seed=0)
    assert len(ds) == 0


def test_unsafe_sampling_errors_on_hazard_free_env():
    env = make_hazard_gridworld(5, 5, [], momentum=0)
    with pytest.raises(UnsafeSampleShortage) as err:
        collect_unsafe_samples(env, n=1, seed=0, step_budget=500)
    assert err.value.found == 0
