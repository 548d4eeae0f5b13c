import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eftlab.env import EnvConfig
from eftlab.numerics import SeededRng, forward
from eftlab.policy import (
    Batch,
    CheckpointError,
    CheckpointVersionError,
    Checkpoint,
    ReplayBuffer,
    ReplayRecord,
    TrainConfig,
    act,
    act_batch,
    actor_inputs,
    actor_loss_and_grads,
    batch_critic_inputs,
    checkpoint_from_json,
    checkpoint_to_json,
    critic_loss_and_grads,
    init_bundle,
    load_checkpoint,
    post_process,
    rollout,
    save_checkpoint,
    td3_update,
    td_targets,
    train_policy,
)


def interval_rule(p, W):
    """Discrete value w whose interval (w - (W+w)/(2W+1), w + (W-w)/(2W+1)] holds p."""
    for w in range(-W, W + 1):
        if w - (W + w) / (2 * W + 1) < p <= w + (W - w) / (2 * W + 1):
            return w
    return -W  # p == -W sits on the closed lower end


def boundaries(W):
    return np.array([w + (W - w) / (2 * W + 1) for w in range(-W, W)])


SMALL_TRAIN = TrainConfig(episodes=2, steps_per_episode=15, warmup_steps=10, batch_size=8,
                          buffer_capacity=500, hidden_sizes=(8, 8))
SMALL_ENV = EnvConfig(n_agents=3, lanes=2, circumference=60.0)


@pytest.fixture
def bundle():
    return init_bundle(SMALL_ENV, SMALL_TRAIN, SeededRng(0))


def _batch(n=16, seed=1):
    rng = SeededRng(seed)
    return Batch(rng.uniform(-1, 1, size=(n, 14)), rng.uniform(0, 1, size=(n, 3)),
                 rng.uniform(-3, 3, size=n), rng.uniform(-1, 1, size=n), rng.normal(size=n),
                 rng.uniform(-1, 1, size=(n, 14)), np.zeros(n))


def test_post_process_examples():
    assert post_process(0.0, 1) == 0
    assert post_process(1.0, 1) == 1
    assert post_process(0.9, 2) == 1
    assert post_process(-1.0, 1) == -1
    assert post_process(0.4, 1) == 1
    assert post_process(7.0, 1) == 1 and post_process(-7.0, 1) == -1
    with pytest.raises(ValueError):
        post_process(0.0, 0)


@pytest.mark.parametrize("W", [1, 2, 3, 5, 10])
def test_post_process_matches_interval_rule(W):
    for lo, hi in ((-1.0, 1.0), (-W, W)):
        grid = np.linspace(lo, hi, 10_001)
        near = np.min(np.abs(grid[:, None] - boundaries(W)[None, :]), axis=1) < 1e-9
        got = post_process(grid, W)
        want = np.array([interval_rule(p, W) for p in grid])
        assert np.array_equal(got[~near], want[~near])


@pytest.mark.parametrize("W", [1, 2, 3, 5, 10])
def test_post_process_reaches_every_value(W):
    out = post_process(np.linspace(-W, W, 20_001), W)
    assert set(out.tolist()) == set(range(-W, W + 1))


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.integers(1, 10))
def test_post_process_monotone_and_in_range(p1, p2, W):
    lo, hi = sorted((p1, p2))
    assert post_process(lo, W) <= post_process(hi, W)
    assert -W <= post_process(p1, W) <= W


def test_act_is_deterministic_without_exploration(bundle):
    o = np.linspace(-1, 1, 14)
    c = [0.2, 0.5, 0.9]
    assert act(bundle, o, c) == act(bundle, o, c)
    a = act(bundle, o, c)
    assert a.a_d == post_process(a.proto_d, 1)


def test_exploration_stays_in_bounds(bundle):
    wild = replace(bundle, train_config=replace(SMALL_TRAIN, explore_sigma_c=1e6, explore_sigma_d=1e6))
    obs = np.zeros((200, 14))
    a_c, proto, a_d = act_batch(wild, obs, np.full((200, 3), 0.5), explore=True, rng=SeededRng(3))
    assert np.all((a_c >= -3) & (a_c <= 3))
    assert np.all(np.abs(proto) <= 1) and set(np.unique(a_d)) <= {-1, 0, 1}
    with pytest.raises(ValueError):
        act_batch(bundle, obs, np.zeros(3), explore=True)


def test_td_target_with_zero_gamma_is_reward(bundle):
    b0 = replace(bundle, train_config=replace(SMALL_TRAIN, gamma=0.0))
    batch = _batch()
    np.testing.assert_array_equal(td_targets(b0, batch, SeededRng(0)), batch.reward)


def test_critic_gradient_matches_finite_differences(bundle):
    batch = _batch()
    x = batch_critic_inputs(bundle, batch)
    y = td_targets(bundle, batch, SeededRng(4))
    _, grads = critic_loss_and_grads(bundle.critic1, x, y)
    h = 1e-6
    rng = SeededRng(9)
    for _ in range(20):
        k = int(rng.integers(0, len(grads)))
        p = bundle.critic1.params()[k]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = critic_loss_and_grads(bundle.critic1, x, y)[0]
        p[idx] = old - h
        down = critic_loss_and_grads(bundle.critic1, x, y)[0]
        p[idx] = old
        num = (up - down) / (2 * h)
        assert abs(num - grads[k][idx]) <= 1e-4 * max(abs(num) + abs(grads[k][idx]), 1e-6)


def test_actor_gradient_matches_finite_differences(bundle):
    batch = _batch()
    _, grads = actor_loss_and_grads(bundle, batch)
    h = 1e-6
    rng = SeededRng(10)
    for _ in range(20):
        k = int(rng.integers(0, len(grads)))
        p = bundle.actor.params()[k]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = actor_loss_and_grads(bundle, batch)[0]
        p[idx] = old - h
        down = actor_loss_and_grads(bundle, batch)[0]
        p[idx] = old
        num = (up - down) / (2 * h)
        assert abs(num - grads[k][idx]) <= 1e-4 * max(abs(num) + abs(grads[k][idx]), 1e-6)


def test_policy_delay(bundle):
    batch = _batch()
    actor_before = [p.copy() for p in bundle.actor.params()]
    target_before = [p.copy() for p in bundle.critic1_target.params()]
    report = td3_update(bundle, batch, 1, SeededRng(0))
    assert report["actor_loss"] is None
    assert all(np.array_equal(a, b) for a, b in zip(actor_before, bundle.actor.params()))
    assert all(np.array_equal(a, b) for a, b in zip(target_before, bundle.critic1_target.params()))
    report = td3_update(bundle, batch, 2, SeededRng(0))
    assert report["actor_loss"] is not None
    assert not all(np.array_equal(a, b) for a, b in zip(actor_before, bundle.actor.params()))


@pytest.mark.parametrize("d,U", [(1, 7), (2, 9), (3, 10)])
def test_actor_update_count(bundle, d, U):
    b = replace(bundle, train_config=replace(SMALL_TRAIN, policy_delay=d))
    n = sum(td3_update(b, _batch(8, i), i, SeededRng(i))["actor_loss"] is not None for i in range(1, U + 1))
    assert n == U // d


def test_empty_batch_is_noop(bundle, caplog):
    before = [p.copy() for p in bundle.critic1.params()]
    assert td3_update(bundle, None, 1, SeededRng(0)) == {"critic_loss": None, "actor_loss": None}
    assert all(np.array_equal(a, b) for a, b in zip(before, bundle.critic1.params()))


def test_replay_buffer_wraps():
    buf = ReplayBuffer(5)
    for i in range(8):
        buf.add(ReplayRecord(np.full(14, i / 10), np.zeros(3), 0.0, 0.0, float(i), np.zeros(14), False))
    assert len(buf) == 5
    assert sorted(buf.reward.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]
    batch = buf.sample(10, SeededRng(0))
    assert len(batch) == 10 and set(batch.reward) <= {3.0, 4.0, 5.0, 6.0, 7.0}
    with pytest.raises(ValueError):
        buf.add(ReplayRecord(np.full(14, np.nan), np.zeros(3), 0.0, 0.0, 0.0, np.zeros(14), False))


def test_zero_episodes_returns_initialization():
    res = train_policy(SMALL_ENV, replace(SMALL_TRAIN, episodes=0), 5)
    init = init_bundle(SMALL_ENV, SMALL_TRAIN, SeededRng(5).spawn(0))
    for name, net in res.checkpoint.bundle.networks().items():
        for a, b in zip(net.params(), init.networks()[name].params()):
            assert np.array_equal(a, b)
    assert res.curve == []


def test_training_is_bitwise_reproducible():
    a = train_policy(SMALL_ENV, SMALL_TRAIN, 11)
    b = train_policy(SMALL_ENV, SMALL_TRAIN, 11)
    assert checkpoint_to_json(a.checkpoint) == checkpoint_to_json(b.checkpoint)
    assert a.curve == b.curve and len(a.curve) == 2


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, bundle):
    ck = Checkpoint(bundle, 3)
    path = save_checkpoint(ck, tmp_path / "ck.json")
    back = load_checkpoint(path)
    x = actor_inputs(SeededRng(0).uniform(-1, 1, size=(5, 14)), [0.1, 0.2, 0.3])
    assert np.array_equal(forward(back.bundle.actor, x), forward(bundle.actor, x))
    for name, net in bundle.networks().items():
        for p, q in zip(net.params(), back.bundle.networks()[name].params()):
            assert p.tobytes() == q.tobytes()
    assert back.bundle.env_config == bundle.env_config
    assert back.bundle.train_config == bundle.train_config
    assert back.seed == 3


def test_checkpoint_errors(tmp_path, bundle):
    text = checkpoint_to_json(Checkpoint(bundle, 0))
    with pytest.raises(CheckpointError):
        checkpoint_from_json(text[: len(text) // 2])
    doc = json.loads(text)
    doc["format_version"] = 99
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_json(json.dumps(doc))
    doc = json.loads(text)
    doc["networks"]["actor"]["params"][0]["data"] = doc["networks"]["actor"]["params"][0]["data"][:-8]
    with pytest.raises(CheckpointError):
        checkpoint_from_json(json.dumps(doc))


def test_rollout_shapes_and_random_policy(bundle):
    chars = np.full((3, 3), 0.5)
    log = rollout(bundle, SMALL_ENV, chars, SeededRng(1), 12)
    assert log.obs.shape == (12, 3, 14) and log.terms.shape == (12, 4, 3)
    again = rollout(bundle, SMALL_ENV, chars, SeededRng(1), 12)
    assert np.array_equal(log.rewards, again.rewards)
    rnd = rollout(None, SMALL_ENV, chars, SeededRng(1), 12, policy="random")
    assert rnd.a_c.shape == (12, 3)
    with pytest.raises(ValueError):
        rollout(bundle, SMALL_ENV, chars, SeededRng(1), 2, policy="other")
