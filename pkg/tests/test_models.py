from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imitlab import envs
from imitlab.active import collect_passive
from imitlab.control import run_episodes
from imitlab.models import (
    DaeModel,
    DemoDataset,
    DynamicsModel,
    NetConfig,
    NormStats,
    TrainConfig,
    Trajectory,
    bundle_from_dict,
    bundle_to_dict,
    dae_error,
    fit_norm,
    policy_action,
    predict_delta,
    predict_next,
    train_dae,
    train_policy,
)
from imitlab.numkit import LayerSpec, MlpParams, ShapeError, init_mlp, make_rng, mlp_forward

PR = envs.POINT_REACH


def _quick(cfg: TrainConfig, epochs: int) -> TrainConfig:
    return replace(
        cfg,
        policy=replace(cfg.policy, epochs=epochs),
        dynamics=replace(cfg.dynamics, epochs=epochs),
        dae=replace(cfg.dae, epochs=epochs),
    )


def _identity_dae(dim: int, norm: NormStats) -> DaeModel:
    p = MlpParams([LayerSpec(dim, dim, "identity")], [np.eye(dim)], [np.zeros(dim)])
    return DaeModel(p, norm)


def _unit_norm(dim: int) -> NormStats:
    z, o = np.zeros(dim), np.ones(dim)
    return NormStats(z, o, np.zeros(2), np.ones(2), z.copy(), o.copy())


def test_default_architectures():
    cfg = TrainConfig()
    assert cfg.policy.hidden == (128, 128)
    assert cfg.dae.hidden == (8, 8)
    assert cfg.dynamics.hidden == (128, 128, 128, 128)


def test_dataset_rejects_failed_demo():
    t = Trajectory(np.zeros((2, 4)), np.zeros((1, 2)), success=False)
    with pytest.raises(ValueError):
        DemoDataset().add(t)
    with pytest.raises(ValueError):
        Trajectory(np.zeros((2, 4)), np.zeros((1, 2)), tag="human")
    with pytest.raises(ShapeError):
        Trajectory(np.zeros((3, 4)), np.zeros((1, 2)))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        fit_norm(DemoDataset())


def test_norm_identical_observations_floor_std():
    obs = np.full((4, 4), 0.3)
    ds = DemoDataset([Trajectory(obs, np.zeros((3, 2)))])
    norm = fit_norm(ds)
    np.testing.assert_array_equal(norm.obs_std, np.full(4, 1e-6))


def test_norm_two_point_dataset():
    obs = np.array([[0.0] * 4, [1.0] * 4])
    ds = DemoDataset([Trajectory(obs, np.array([[0.0, 1.0]]))])
    norm = fit_norm(ds)
    np.testing.assert_array_equal(norm.obs_mean, np.full(4, 0.5))
    np.testing.assert_array_equal(norm.obs_std, np.full(4, 0.5))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_norm_round_trip(seed):
    rng = make_rng(seed)
    obs = rng.uniform(0, 1, (6, 4))
    ds = DemoDataset([Trajectory(obs, rng.uniform(-0.05, 0.05, (5, 2)))])
    norm = fit_norm(ds)
    x = rng.uniform(-1, 2, (10, 4))
    np.testing.assert_allclose(norm.denorm_obs(norm.norm_obs(x)), x, atol=1e-12, rtol=0)


def test_constant_action_policy():
    rng = make_rng(0)
    trajs = [Trajectory(rng.uniform(0, 1, (11, 4)), np.tile([0.03, -0.01], (10, 1))) for _ in range(5)]
    ds = DemoDataset(trajs)
    pol = train_policy(ds, _quick(TrainConfig(), 50))
    s, _, _ = ds.transitions()
    np.testing.assert_allclose(policy_action(pol, s), np.tile([0.03, -0.01], (len(s), 1)), atol=1e-2)


def test_policy_beats_constant_predictor(reach_data, reach_models):
    s, a, _ = reach_data.transitions()
    mse = np.mean((policy_action(reach_models.policy, s) - a) ** 2)
    baseline = np.mean((a - a.mean(axis=0)) ** 2)
    assert mse < 0.1 * baseline


def test_point_reach_policy_generalises(reach_models):
    test = envs.sample_instances(make_rng(77), 50, PR)
    eps = run_episodes(PR, test, "bc_only", reach_models)
    assert sum(e.success for e in eps) >= 40


def test_training_is_deterministic(reach_data):
    cfg = _quick(TrainConfig().with_seed(3), 3)
    a = train_policy(reach_data, cfg)
    b = train_policy(reach_data, cfg)
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        assert np.array_equal(x, y)
    c = train_dae(reach_data, cfg)
    d = train_dae(reach_data, cfg)
    for x, y in zip(c.params.arrays(), d.params.arrays()):
        assert np.array_equal(x, y)


def _held_out_transitions(n=10, seed=99):
    ds = collect_passive(PR, n, make_rng(seed, 1))
    return ds.transitions()


def test_dynamics_static_goal_and_accuracy(reach_models):
    s, a, s2 = _held_out_transitions()
    pred = predict_next(reach_models.dynamics, s, a)
    assert np.mean((pred - s2) ** 2) < 1e-4
    assert np.abs(predict_delta(reach_models.dynamics, s, a)[:, 2:]).max() < 1e-3
    assert np.abs(pred - s2).max() < 1e-2


def test_dynamics_zero_action(reach_models):
    s, _, _ = _held_out_transitions()
    pred = predict_next(reach_models.dynamics, s, np.zeros((len(s), 2)))
    assert np.abs(pred - s).max() < 1e-3


def test_dynamics_open_loop_drift(reach_models):
    inst = envs.sample_instances(make_rng(5), 1, PR)[0]
    state, obs = envs.reset(PR, inst)
    pred = obs
    for _ in range(10):
        a = envs.expert_action(state)
        state, res = envs.step(state, a)
        pred = predict_next(reach_models.dynamics, pred, a)
    assert np.abs(pred - res.observation).max() < 0.05


def test_residual_identity(reach_models):
    rng = make_rng(4)
    s = rng.uniform(0, 1, (20, 4))
    a = rng.uniform(-0.05, 0.05, (20, 2))
    np.testing.assert_array_equal(predict_next(reach_models.dynamics, s, a), s + predict_delta(reach_models.dynamics, s, a))


def test_zero_delta_network_keeps_state():
    norm = _unit_norm(4)
    p = init_mlp([6, 8, 4], make_rng(0))
    p = p.with_arrays(p.arrays()[:-2] + [np.zeros((4, 8)), np.zeros(4)])
    dyn = DynamicsModel(p, norm)
    s = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(predict_next(dyn, s, np.array([0.05, -0.05])), s)


def test_identity_dae_has_zero_energy():
    dae = _identity_dae(4, _unit_norm(4))
    assert dae_error(dae, np.array([0.3, 0.9, 0.1, 0.5])) == 0.0
    np.testing.assert_array_equal(dae_error(dae, make_rng(0).uniform(0, 1, (5, 4))), np.zeros(5))


def test_dae_shape_mismatch(reach_models):
    with pytest.raises(ShapeError):
        dae_error(reach_models.dae, np.zeros(6))
    with pytest.raises(ShapeError):
        predict_next(reach_models.dynamics, np.zeros(4), np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=4, max_size=4))
def test_energy_non_negative(x):
    dae = DaeModel(init_mlp([4, 8, 8, 4], make_rng(1)), _unit_norm(4))
    assert dae_error(dae, np.array(x)) >= 0.0


def test_dae_sigma_limit(reach_data):
    base = TrainConfig().with_seed(0)
    small = train_dae(reach_data, replace(base, noise_sigma=1e-4))
    ref = train_dae(reach_data, base)
    obs = reach_data.observations()
    assert np.mean(dae_error(small, obs)) < 10 * np.mean(dae_error(ref, obs))


def test_dae_separates_far_corner(push_data, push_models):
    obs = push_data.observations()
    train_e = np.mean(dae_error(push_models.dae, obs))
    corners = np.array([[x, y] for x in (0.0, 1.0) for y in (0.0, 1.0)])
    # agent, block and goal all at the corner farthest from the demo states
    far = max(corners, key=lambda c: np.min(np.linalg.norm(obs[:, :2] - c, axis=1)))
    corner_state = np.tile(far, 3)
    assert dae_error(push_models.dae, corner_state) > 2 * train_e


def test_dae_train_vs_uniform(push_data, push_models):
    uni = make_rng(6).uniform(0, 1, (2000, 6))
    assert np.mean(dae_error(push_models.dae, push_data.observations())) < np.mean(dae_error(push_models.dae, uni))


def test_dataset_serialization(push_data):
    text = push_data.dumps(envs.PUSH_BLOCK)
    back = DemoDataset.loads(text)
    assert len(back) == len(push_data) and back.count("passive") == len(push_data)
    for a, b in zip(push_data.trajectories, back.trajectories):
        np.testing.assert_array_equal(a.observations, b.observations)
        np.testing.assert_array_equal(a.actions, b.actions)
        assert a.instance == b.instance


def test_bundle_round_trip(reach_models):
    back = bundle_from_dict(bundle_to_dict(reach_models))
    s = make_rng(0).uniform(0, 1, (5, 4))
    np.testing.assert_array_equal(policy_action(back.policy, s), policy_action(reach_models.policy, s))
    np.testing.assert_array_equal(dae_error(back.dae, s), dae_error(reach_models.dae, s))
    with pytest.raises(ValueError):
        bundle_from_dict({"format": "other"})


def test_net_config_validation():
    with pytest.raises(ValueError):
        NetConfig((), 5)
    with pytest.raises(ValueError):
        NetConfig((8,), 0)
    with pytest.raises(ValueError):
        TrainConfig(noise_sigma=0.0)
    cfg = TrainConfig(**{k: v for k, v in TrainConfig().to_dict().items()})
    assert cfg == TrainConfig()
