import numpy as np
import pytest

from reachsafe.cmdp import ConfigurationError
from reachsafe.collect import collect_safe_dataset
from reachsafe.dynamics import (
    EnsembleDynamics,
    TrainConfig,
    conservative_cost_label,
    load_ensemble,
    predict_set,
    sample_next,
    sample_next_batch,
    save_ensemble,
    train_ensemble,
)
from reachsafe.envs import behavior_mixture, make_double_integrator
from reachsafe.seeding import substream
from reachsafe.tabular import build_model


@pytest.fixture(scope="module")
def integrator_setup():
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    mix = behavior_mixture(env, [("creep", 0.4), ("random", 0.4), ("brake", 0.2)])
    data = collect_safe_dataset(env, mix, n_transitions=3000, seed=21)
    return env, data


@pytest.fixture(scope="module")
def trained(integrator_setup):
    env, data = integrator_setup
    model = train_ensemble(data, n_total=7, n_elite=5, val_fraction=0.2,
                           epochs=25, seed=5)
    return env, data, model


def test_defaults_and_elite_count(trained):
    _, _, model = trained
    assert len(model.members) == 7
    assert model.n_elites == 5


def test_elite_errors_dominate_non_elites(trained):
    _, _, model = trained
    errs = model.val_errors
    elite = errs[model.elites]
    others = np.delete(errs, model.elites)
    assert elite.max() <= others.min() + 1e-15


def test_linear_system_is_learned_accurately():
    # With the velocity cap far from the data the integrator is exactly
    # linear, so normalized held-out error collapses below 1e-3.
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60,
                                 v_max=5.0)
    mix = behavior_mixture(env, [("creep", 0.4), ("random", 0.4), ("brake", 0.2)])
    data = collect_safe_dataset(env, mix, n_transitions=2500, seed=21)
    model = train_ensemble(data, n_total=3, n_elite=2, val_fraction=0.2,
                           epochs=60, seed=5)
    assert model.val_errors[model.elites].mean() < 1e-3


def test_predicted_set_contains_truth_on_held_out_pairs(trained):
    # Executable calibration stand-in: some elite mean lands within one
    # oracle grid cell of the true next state for nearly every pair.
    env, data, model = trained
    grid = build_model(env)
    (x_lo, x_hi, nx), (v_lo, v_hi, nv) = grid.grid_ranges
    cell = np.array([(x_hi - x_lo) / (nx - 1), (v_hi - v_lo) / (nv - 1)])
    rng = substream(1, "calibration")
    idx = rng.choice(len(data), size=500, replace=False)
    means, _ = model.elite_predictions(data.s[idx], data.a[idx])
    close = np.all(np.abs(means - data.s2[idx][None]) <= cell[None, None, :], axis=2)
    assert close.any(axis=0).mean() >= 0.99


def test_predict_set_length_and_identical_members():
    env = make_double_integrator(x_lim=1.0, a_max=1.0, dt=0.1, horizon=60)
    mix = behavior_mixture(env, [("random", 1.0)])
    data = collect_safe_dataset(env, mix, n_transitions=600, seed=3)
    model = train_ensemble(data, n_total=3, n_elite=3, val_fraction=0.2,
                           epochs=5, seed=9)
    clones = EnsembleDynamics(
        members=[model.members[0]] * 3, elites=[0, 1, 2],
        in_mean=model.in_mean, in_std=model.in_std,
        delta_mean=model.delta_mean, delta_std=model.delta_std,
        d_s=model.d_s, d_a=model.d_a,
    )
    preds = predict_set(clones, data.s[0], data.a[0])
    assert len(preds) == 3
    for mean, var in preds[1:]:
        assert np.allclose(mean, preds[0][0])
        assert np.allclose(var, preds[0][1])


def test_elites_equal_members_when_requested(integrator_setup):
    _, data = integrator_setup
    model = train_ensemble(data, n_total=3, n_elite=3, val_fraction=0.2,
                           epochs=3, seed=2)
    assert sorted(model.elites) == [0, 1, 2]


def test_sample_next_modes(trained):
    _, data, model = trained
    single = EnsembleDynamics(
        members=[model.members[model.elites[0]]], elites=[0],
        in_mean=model.in_mean, in_std=model.in_std,
        delta_mean=model.delta_mean, delta_std=model.delta_std,
        d_s=model.d_s, d_a=model.d_a,
    )
    s, a = data.s[0], data.a[0]
    mean = predict_set(single, s, a)[0][0]
    out = sample_next(single, s, a, substream(0, "det"), deterministic=True)
    assert np.allclose(out, mean)
    one = sample_next(model, s, a, substream(4, "fixed"))
    two = sample_next(model, s, a, substream(4, "fixed"))
    assert np.array_equal(one, two)


def test_elite_choice_is_uniform(trained):
    _, data, model = trained
    rng = substream(6, "uniform")
    n = 10_000
    s = np.repeat(data.s[:1], n, axis=0)
    a = np.repeat(data.a[:1], n, axis=0)
    means, _ = model.elite_predictions(data.s[0], data.a[0])
    samples = sample_next_batch(model, s, a, rng, deterministic=True)
    counts = np.array([
        int(np.sum(np.all(np.isclose(samples, means[k, 0]), axis=1)))
        for k in range(model.n_elites)
    ])
    assert counts.sum() == n
    p = 1.0 / model.n_elites
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_conservative_label_any_elite(trained):
    env, data, model = trained
    s = np.array([0.93, 0.6])   # drifting over the boundary next step
    a = np.array([1.0])
    flagged = conservative_cost_label(model, s, a, env.margin_predicate(0.05))
    assert flagged == 1
    calm = conservative_cost_label(model, np.array([0.0, 0.0]), np.array([0.0]),
                                   env.margin_predicate(0.05))
    assert calm == 0
    # A predicate that never fires yields 0 everywhere (hazard-free analog).
    assert conservative_cost_label(model, s, a, lambda _s: 0) == 0


def test_conservative_label_dominates_single_elites(trained):
    env, data, model = trained
    pred = env.margin_predicate(0.1)
    rng = substream(7, "label-dominance")
    idx = rng.choice(len(data), size=100, replace=False)
    for i in idx:
        combined = conservative_cost_label(model, data.s[i], data.a[i], pred)
        for e in model.elites:
            single = EnsembleDynamics(
                members=[model.members[e]], elites=[0],
                in_mean=model.in_mean, in_std=model.in_std,
                delta_mean=model.delta_mean, delta_std=model.delta_std,
                d_s=model.d_s, d_a=model.d_a,
            )
            assert combined >= conservative_cost_label(single, data.s[i],
                                                       data.a[i], pred)


def test_training_rejects_bad_configs(integrator_setup):
    _, data = integrator_setup
    with pytest.raises(ConfigurationError):
        train_ensemble(data, n_total=3, n_elite=4, epochs=1, seed=0)
    with pytest.raises(ConfigurationError):
        train_ensemble(data.subset(np.arange(10)), n_total=2, n_elite=1,
                       epochs=1, seed=0)


def test_mse_variant_trains_and_predicts(integrator_setup):
    _, data = integrator_setup
    model = train_ensemble(data, n_total=2, n_elite=1, val_fraction=0.2,
                           epochs=5, seed=4, cfg=TrainConfig(loss="mse"))
    mean, var = predict_set(model, data.s[0], data.a[0])[0]
    assert mean.shape == (2,)
    assert np.all(var > 0)


def test_training_is_deterministic(integrator_setup):
    _, data = integrator_setup
    a = train_ensemble(data, n_total=2, n_elite=1, epochs=2, seed=8)
    b = train_ensemble(data, n_total=2, n_elite=1, epochs=2, seed=8)
    for ma, mb in zip(a.members, b.members):
        for p, q in zip(ma.net.parameters(), mb.net.parameters()):
            assert np.array_equal(p, q)


def test_ensemble_checkpoint_roundtrip(trained, tmp_path):
    _, data, model = trained
    save_ensemble(model, tmp_path / "ens")
    back = load_ensemble(tmp_path / "ens")
    assert back.elites == model.elites
    m1, v1 = back.elite_predictions(data.s[:5], data.a[:5])
    m2, v2 = model.elite_predictions(data.s[:5], data.a[:5])
    assert np.allclose(m1, m2, atol=1e-4)
    assert np.allclose(v1, v2, rtol=1e-3, atol=1e-8)
