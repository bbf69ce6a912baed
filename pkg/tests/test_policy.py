import numpy as np
import pytest

from vfdefense.envs import GRID, env_reset, env_step
from vfdefense.policy import (
    STACK_SIZE,
    DQNConfig,
    FrameStack,
    PolicyModel,
    ReplayBuffer,
    action_distribution,
    build_q_network,
    compute_mean_pixel,
    greedy_action,
    load_policy,
    preprocess,
    q_values,
    q_values_dropout,
    save_policy,
    select_action,
    unpreprocess,
)


def make_policy(seed=0, env="ponglite", n_actions=3):
    rng = np.random.Generator(np.random.PCG64(seed))
    net = build_q_network(n_actions, (32, 16), rng)
    return PolicyModel(q_network=net, action_count=n_actions,
                       mean_pixel=0.015, env=env)


def test_frame_stack_pads_with_first_frame():
    f = np.full((GRID, GRID), 0.5, dtype=np.float32)
    stack = FrameStack(f)
    arr = stack.as_array()
    assert arr.shape == (STACK_SIZE, GRID, GRID)
    assert all(np.array_equal(arr[i], f) for i in range(STACK_SIZE))


def test_frame_stack_push_order():
    frames = [np.full((GRID, GRID), i, dtype=np.float32) for i in range(6)]
    stack = FrameStack(frames[0])
    for f in frames[1:]:
        stack.push(f)
    arr = stack.as_array()
    # oldest first: last four pushed frames are 2,3,4,5
    assert [int(arr[i, 0, 0]) for i in range(4)] == [2, 3, 4, 5]


def test_preprocess_round_trip():
    x = np.random.default_rng(0).random((4, GRID, GRID)).astype(np.float32)
    back = unpreprocess(preprocess(x, 0.37), 0.37)
    assert np.allclose(back, x, atol=1e-6)


def test_preprocess_is_a_shift():
    x = np.ones((GRID, GRID), dtype=np.float32)
    assert np.allclose(preprocess(x, 0.25), 0.75)


def test_action_distribution_sums_to_one_and_orders_like_q():
    policy = make_policy()
    stack = FrameStack(env_reset("ponglite", 0)[1])
    q = q_values(policy, stack)
    dist = action_distribution(policy, stack)
    assert dist.sum() == pytest.approx(1.0)
    assert np.argmax(dist) == np.argmax(q)
    assert (dist > 0).all()


def test_temperature_never_changes_greedy_action():
    policy = make_policy(3)
    stack = FrameStack(env_reset("ponglite", 5)[1])
    greedy = {greedy_action(action_distribution(policy, stack, temperature=t))
              for t in (0.1, 0.5, 1.0, 5.0, 50.0)}
    assert len(greedy) == 1


def test_greedy_action_tie_break_lowest_index():
    assert greedy_action(np.array([0.4, 0.4, 0.2])) == 0
    assert greedy_action(np.array([0.1, 0.45, 0.45])) == 1


def test_select_action_modes():
    rng = np.random.Generator(np.random.PCG64(0))
    dist = np.array([0.1, 0.7, 0.2])
    assert select_action(dist, "greedy", rng) == 1
    with pytest.raises(ValueError):
        select_action(dist, "softmax", rng)


def test_select_action_epsilon_uniformity():
    # with epsilon=1 the choice is uniform; chi-squared on 3 bins
    rng = np.random.Generator(np.random.PCG64(123))
    dist = np.array([1.0, 0.0, 0.0])
    n = 3000
    counts = np.bincount(
        [select_action(dist, "epsilon", rng, epsilon=1.0) for _ in range(n)],
        minlength=3,
    )
    expected = n / 3
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 13.8  # 2 dof, p ~ 0.001


def test_select_action_sample_follows_distribution():
    rng = np.random.Generator(np.random.PCG64(7))
    dist = np.array([0.8, 0.15, 0.05])
    n = 4000
    counts = np.bincount(
        [select_action(dist, "sample", rng) for _ in range(n)], minlength=3
    )
    assert abs(counts[0] / n - 0.8) < 0.03


def test_replay_buffer_capacity_and_overwrite():
    buf = ReplayBuffer(8, (1,))
    for i in range(20):
        buf.push(np.array([i], dtype=np.float32), i, float(i),
                 np.array([i + 1], dtype=np.float32), False)
    assert buf.size == 8
    # oldest entries overwritten: stored actions are the last 8
    assert sorted(buf.actions.tolist()) == list(range(12, 20))


def test_replay_buffer_sample_shapes():
    buf = ReplayBuffer(16, (4, GRID, GRID))
    z = np.zeros((4, GRID, GRID), dtype=np.float32)
    for i in range(10):
        buf.push(z, 0, 0.0, z, False)
    rng = np.random.Generator(np.random.PCG64(0))
    s, a, r, ns, d = buf.sample(4, rng)
    assert s.shape == (4, 4, GRID, GRID) and a.shape == (4,)


def test_build_q_network_shapes():
    rng = np.random.Generator(np.random.PCG64(0))
    net = build_q_network(3, (128, 64), rng)
    assert net.input_shape == (STACK_SIZE, GRID, GRID)
    assert net.output_shape == (3,)


def test_compute_mean_pixel_in_plausible_range():
    m = compute_mean_pixel("ponglite", 500, seed=0)
    # 4 lit pixels of 256 -> about 0.0156
    assert 0.005 < m < 0.05
    assert m == compute_mean_pixel("ponglite", 500, seed=0)


def test_q_values_dropout_varies_across_passes():
    policy = make_policy(1)
    stack = FrameStack(env_reset("ponglite", 2)[1])
    rng = np.random.Generator(np.random.PCG64(0))
    qs = q_values_dropout(policy, stack, rate=0.2, passes=10, rng=rng)
    assert qs.shape == (10, 3)
    assert np.std(qs, axis=0).max() > 0  # passes differ


def test_dropout_layer_indices_are_final_affines():
    policy = make_policy()
    idx = policy.dropout_layer_indices()
    assert len(idx) == 2
    layers = policy.q_network.layers
    assert all(type(layers[i]).__name__ == "Affine" for i in idx)
    assert max(idx) == len(layers) - 1


def test_save_load_policy_round_trip(tmp_path):
    policy = make_policy(4)
    path = tmp_path / "pol.fgn"
    save_policy(policy, path)
    loaded = load_policy(path)
    assert loaded.env == policy.env
    assert loaded.action_count == policy.action_count
    assert loaded.mean_pixel == pytest.approx(policy.mean_pixel)
    stack = FrameStack(env_reset("ponglite", 1)[1])
    assert np.array_equal(q_values(policy, stack), q_values(loaded, stack))


def test_dqn_config_validation():
    with pytest.raises(ValueError):
        DQNConfig(gamma=1.5)
    with pytest.raises(ValueError):
        DQNConfig(batch_size=0)
