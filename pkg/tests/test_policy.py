import numpy as np
import pytest

from reachsafe.collect import collect_safe_dataset
from reachsafe.cmdp import OfflineDataset, SAFE_ONLY
from reachsafe.critics import (
    CriticConfig,
    make_feasibility_critic,
    onehot_action_featurizer,
    onehot_state_featurizer,
)
from reachsafe.envs import behavior_mixture, make_double_integrator, make_hazard_gridworld
from reachsafe.oracle import compute_feasible_set_oracle
from reachsafe.policy import (
    EvalReport,
    PolicyConfig,
    RewardCriticConfig,
    RolloutDataRejected,
    bc_weights,
    evaluate_policy,
    feasibility_guided_policy_update,
    load_policy,
    make_policy,
    make_reward_critic,
    reward_norm_from_dataset,
    rollout_value_monotonicity_check,
    save_policy,
    update_reward_critic,
)
from reachsafe.reachability import tabular_value_iteration
from reachsafe.rollout import RolloutBuffer, RolloutConfig
from reachsafe.tabular import tabulate


def _toy_dataset(n=64, r_value=1.0, done=True, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, 2))
    a = rng.uniform(-1, 1, size=(n, 1))
    s2 = s + 0.1 * a
    return OfflineDataset(
        s=s, a=a, r=np.full(n, r_value), s2=s2,
        done=np.full(n, done, dtype=bool), cost=np.zeros(n, dtype=int),
        tag=SAFE_ONLY, meta={"env": "toy", "episode_ends": []},
    )


@pytest.fixture(scope="module")
def integrator():
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    mix = behavior_mixture(env, [("probe", 0.4), ("random", 0.4), ("brake", 0.2)])
    data = collect_safe_dataset(env, mix, n_transitions=2000, seed=2)
    return env, data


def test_reward_critic_rejects_rollout_data():
    ds = _toy_dataset()
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    critic = make_reward_critic(env, ds)
    buffer = RolloutBuffer(s=ds.s, a=ds.a, label=np.zeros(len(ds), dtype=int),
                           h_s=np.full(len(ds), -1.0),
                           origin=np.zeros(len(ds), dtype=int))
    with pytest.raises(RolloutDataRejected):
        update_reward_critic(critic, buffer, steps=1)
    tagged = _toy_dataset()
    tagged.meta["kind"] = "rollout-buffer"
    with pytest.raises(RolloutDataRejected):
        update_reward_critic(critic, tagged, steps=1)


def test_reward_critic_fits_terminal_reward():
    # Every transition is terminal with r = 1, so q must go to 1.
    ds = _toy_dataset(r_value=1.0, done=True)
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    critic = make_reward_critic(env, ds, RewardCriticConfig(lr=3e-3), seed=1)
    update_reward_critic(critic, ds, steps=1500, seed=1)
    q = critic.q_values(ds.s, ds.a)
    assert np.allclose(q, 1.0, atol=0.05)


def test_reward_critic_geometric_series_on_chain():
    # Constant reward, never done, self-loop-ish chain: q -> r / (1 - gamma).
    n = 128
    rng = np.random.default_rng(3)
    s = rng.uniform(-1, 1, size=(n, 2))
    ds = OfflineDataset(
        s=s, a=np.zeros((n, 1)), r=np.full(n, 0.5), s2=s,
        done=np.zeros(n, dtype=bool), cost=np.zeros(n, dtype=int),
        tag=SAFE_ONLY, meta={"env": "toy", "episode_ends": []},
    )
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    critic = make_reward_critic(env, ds, RewardCriticConfig(gamma=0.9, lr=3e-3,
                                                            target_rate=0.05),
                                seed=2)
    update_reward_critic(critic, ds, steps=4000, seed=2)
    q = critic.q_values(ds.s, ds.a)
    assert np.allclose(q, 5.0, atol=0.25), q.mean()


def test_reward_critic_tracks_sources(integrator):
    env, data = integrator
    critic = make_reward_critic(env, data)
    update_reward_critic(critic, data, steps=5)
    assert critic.sources_seen == [SAFE_ONLY]


def test_bc_weights_gate_blocks_positive_qh(integrator):
    env, data = integrator
    reward = make_reward_critic(env, data, seed=0)
    update_reward_critic(critic=reward, offline=data, steps=50)
    feas = make_feasibility_critic(env, data, CriticConfig(), seed=0,
                                   cost_fn=env.margin_predicate(0.04))
    # Push q_h net strongly positive so every action is gated off.
    feas.q_net.biases[-1][:] = 5.0
    feas.v_net.biases[-1][:] = -5.0  # states look feasible
    w = bc_weights(reward, feas, data.s[:32], data.a[:32], 3.0, 100.0)
    assert np.all(w == 0.0)


def test_bc_weights_reduce_to_awr_when_all_safe(integrator):
    env, data = integrator
    reward = make_reward_critic(env, data, seed=0)
    update_reward_critic(critic=reward, offline=data, steps=50)
    feas = make_feasibility_critic(env, data, CriticConfig(), seed=0)
    feas.q_net.biases[-1][:] = -5.0
    feas.v_net.biases[-1][:] = -5.0
    gated = bc_weights(reward, feas, data.s[:64], data.a[:64], 3.0, 100.0)
    plain = bc_weights(reward, None, data.s[:64], data.a[:64], 3.0, 100.0,
                       gate=False)
    assert np.allclose(gated, plain)


def test_bc_weights_bounded(integrator):
    env, data = integrator
    reward = make_reward_critic(env, data, seed=0)
    feas = make_feasibility_critic(env, data, CriticConfig(), seed=0)
    w = bc_weights(reward, feas, data.s, data.a, 10.0, 100.0)
    assert np.all(w >= 0.0)
    assert np.all(w <= 100.0)


def test_weight_scaling_preserves_action_ranking(integrator):
    env, data = integrator
    reward = make_reward_critic(env, data, seed=0)
    update_reward_critic(critic=reward, offline=data, steps=50)
    w = bc_weights(reward, None, data.s[:100], data.a[:100], 3.0, np.inf,
                   gate=False)
    order = np.argsort(w)
    order_scaled = np.argsort(2.5 * w)
    assert np.array_equal(order, order_scaled)


def test_policy_update_trains_and_respects_bounds(integrator):
    env, data = integrator
    reward = make_reward_critic(env, data, seed=0)
    update_reward_critic(critic=reward, offline=data, steps=200)
    policy = make_policy(env, data, PolicyConfig(lr=1e-3), seed=0)
    feasibility_guided_policy_update(policy, reward, None, data, steps=300,
                                     seed=0, gate=False)
    acts = policy.act_batch(data.s[:200])
    assert acts.min() >= env.action_bounds[0, 0] - 1e-9
    assert acts.max() <= env.action_bounds[0, 1] + 1e-9
    assert policy.steps_trained == 300


def test_policy_update_rejects_empty_batch(integrator):
    env, data = integrator
    reward = make_reward_critic(env, data, seed=0)
    policy = make_policy(env, data, seed=0)
    empty = data.subset(np.array([], dtype=int))
    with pytest.raises(ValueError):
        feasibility_guided_policy_update(policy, reward, None, empty, steps=1)


def test_greedy_actions_stay_feasible_with_oracle_critic():
    # Clone only the feasibility-sound actions on the momentum gridworld:
    # greedy actions from feasible states must keep the oracle value <= 0.
    env = make_hazard_gridworld(5, 5, [(2, 2)], momentum=1, gamma=0.95)
    mix = behavior_mixture(env, [("goal_greedy", 0.5), ("random", 0.5)])
    data = collect_safe_dataset(env, mix, n_transitions=2500, seed=4)
    model = tabulate(env)
    exact = tabular_value_iteration(model, "standard", gamma=0.95, tol=1e-12)
    v_exact = exact.v()

    reward = make_reward_critic(env, data, seed=0,
                                state_feat=onehot_state_featurizer(env),
                                action_feat=onehot_action_featurizer(env))
    update_reward_critic(critic=reward, offline=data, steps=400, seed=0)

    class OracleCritic:
        h_min, h_max = env.h_min, env.h_max

        def v_values(self, s, target=False):
            s = np.atleast_2d(s)
            return np.array([v_exact[env.state_index(row)] for row in s])

        def q_values(self, s, a, target=False):
            s, a = np.atleast_2d(s), np.atleast_2d(a)
            out = []
            for srow, arow in zip(s, a):
                ai = int(np.argmin(np.sum((env.action_set - arow) ** 2, axis=1)))
                out.append(exact.q[env.state_index(srow), ai])
            return np.array(out)

    policy = make_policy(env, data, PolicyConfig(lr=1e-3), seed=0,
                         state_feat=onehot_state_featurizer(env))
    feasibility_guided_policy_update(policy, reward, OracleCritic(), data,
                                     steps=800, seed=0)
    feasible_states = [s for s in env.states
                       if v_exact[env.state_index(s)] <= 0]
    for s in feasible_states[::3]:
        state = s.copy()
        for _ in range(10):
            a = env.clip_action(policy.act(state))
            state = env.transition(state, a)
            assert v_exact[env.state_index(state)] <= 0.0, (s, state)


def test_evaluate_policy_normalization(integrator):
    env, data = integrator
    policy = make_policy(env, data, seed=0)
    report = evaluate_policy(policy, env, episodes=3, reward_norm=(-10.0, 10.0),
                             seed=0)
    assert report.episodes == 3
    assert report.safe == (report.normalized_cost <= 1.0)
    with pytest.raises(ValueError):
        evaluate_policy(policy, env, episodes=3, reward_norm=(1.0, 1.0))
    with pytest.raises(ValueError):
        evaluate_policy(policy, env, episodes=0, reward_norm=(0.0, 1.0))


def test_eval_report_cost_scaling():
    report = EvalReport(normalized_reward=0.5, normalized_cost=1.5, episodes=1,
                        safe=False, mean_violations=15.0, mean_return=0.0)
    assert report.mean_violations / 10.0 == report.normalized_cost
    assert not report.safe
    row = report.csv_row("toy", 3)
    assert row.startswith("toy,3,1,")


def test_reward_norm_from_dataset(integrator):
    env, data = integrator
    lo, hi = reward_norm_from_dataset(data)
    assert hi > lo


def test_monotonicity_check_safe_only_gridworld():
    env = make_hazard_gridworld(5, 5, [(2, 2)], momentum=1, gamma=0.95)
    mix = behavior_mixture(env, [("goal_greedy", 0.5), ("random", 0.5)])
    data = collect_safe_dataset(env, mix, n_transitions=1200, seed=5)
    report = rollout_value_monotonicity_check(
        data, env, RolloutConfig(batch=256, epochs=4),
        cost_fn=env.margin_predicate(1.0), seeds=[0, 1], gamma=0.95)
    assert report.holds
    assert report.n_checked > 0


def test_monotonicity_check_requires_single_step():
    env = make_hazard_gridworld(5, 5, [(2, 2)], momentum=1)
    data = collect_safe_dataset(
        env, behavior_mixture(env, [("random", 1.0)]), n_transitions=100, seed=0)
    with pytest.raises(ValueError):
        rollout_value_monotonicity_check(
            data, env, RolloutConfig(horizon=2), env.margin_predicate(1.0), [0])


def test_monotonicity_with_ground_truth_and_unsafe_data():
    # Mixed corpus: true labels, predicate equals the truth. The augmented
    # values must dominate near violations and never dip below plain ones.
    env = make_hazard_gridworld(5, 5, [(2, 2)], momentum=1, gamma=0.95)
    rng = np.random.default_rng(0)
    rows_s, rows_a, rows_s2, rows_c = [], [], [], []
    for _ in range(800):
        s = env.states[int(rng.integers(len(env.states)))]
        a = env.action_set[int(rng.integers(len(env.action_set)))]
        s2 = env.transition(s, a)
        rows_s.append(s); rows_a.append(a); rows_s2.append(s2)
        rows_c.append(env.cost(s2))
    data = OfflineDataset(
        s=np.array(rows_s), a=np.array(rows_a), r=np.zeros(800),
        s2=np.array(rows_s2), done=np.zeros(800, dtype=bool),
        cost=np.array(rows_c), tag="mixed",
        meta={"env": env.name, "episode_ends": []},
    )
    report = rollout_value_monotonicity_check(
        data, env, RolloutConfig(batch=256, epochs=4),
        cost_fn=lambda s: env.cost(s), seeds=[0], gamma=0.95)
    assert report.holds


def test_policy_checkpoint_roundtrip(integrator, tmp_path):
    env, data = integrator
    policy = make_policy(env, data, seed=3)
    save_policy(policy, tmp_path / "pol")
    back = load_policy(tmp_path / "pol", env)
    acts_a = policy.act_batch(data.s[:16])
    acts_b = back.act_batch(data.s[:16])
    assert np.allclose(acts_a, acts_b, atol=1e-5)
