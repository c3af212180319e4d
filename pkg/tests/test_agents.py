import json

import numpy as np
import pytest

from trafficlab.agents import (
    Batch, DDPGAgent, DDPGConfig, DQNAgent, DQNConfig, GaussianNoise, InsufficientSamples,
    OUNoise, ReplayBuffer, binarize, encode_obs, encoded_dim, load_agent, make_noise, save_agent,
    train_ddpg, train_dqn,
)
from trafficlab.env import ArrivalModel, PassingRates, SingleIntersectionEnv, make_env
from trafficlab.mdp import TruncatedSpace, build_transitions, policy_iteration
from trafficlab.nn import CheckpointIncompatible


def linear_dqn(b0, b1, gamma=0.99, lr=1e-3):
    agent = DQNAgent(3, DQNConfig(hidden=(), gamma=gamma, lr=lr), seed=0)
    agent.q_net.params[0][:] = 0.0
    agent.q_net.params[1][:] = [b0, b1]
    return agent


# ------------------------------------------------------------------ buffer


def test_buffer_evicts_oldest():
    buf = ReplayBuffer(3, 1)
    for k in range(4):
        buf.push([k], 0, -k, [k + 1])
    assert len(buf) == 3 and buf.count == 4
    assert [t.s[0] for t in buf.contents()] == [1, 2, 3]


def test_buffer_full_sample_is_permutation():
    buf = ReplayBuffer(5, 1)
    for k in range(5):
        buf.push([k], 0, 0.0, [0])
    b = buf.sample(5, np.random.default_rng(0))
    assert sorted(b.s[:, 0].tolist()) == [0, 1, 2, 3, 4]


def test_buffer_insufficient():
    buf = ReplayBuffer(10, 1)
    buf.push([0], 0, 0.0, [0])
    with pytest.raises(InsufficientSamples):
        buf.sample(2, np.random.default_rng(0))


def test_buffer_sampling_uniform():
    buf = ReplayBuffer(10, 1)
    for k in range(10):
        buf.push([k], 0, 0.0, [0])
    rng = np.random.default_rng(1)
    counts = np.zeros(10)
    for _ in range(10_000):
        counts[buf.sample(10, rng).s[:3, 0].astype(int)] += 1  # first three draws
    freq = np.bincount(
        np.concatenate([buf.sample(1, rng).s[:, 0].astype(int) for _ in range(100_000)]), minlength=10
    ) / 100_000
    assert np.all(np.abs(freq - 0.1) < 0.01)
    assert np.all(np.abs(counts / counts.sum() - 0.1) < 0.01)


# ------------------------------------------------------------------- noise


def test_ou_zero_sigma():
    n = OUNoise(3, sigma=0.0, seed=0)
    assert all(np.all(n.sample() == 0) for _ in range(100))


def test_ou_random_walk_variance():
    n = OUNoise(1, theta=0.0, sigma=0.3, dt=1.0, seed=2)
    xs = np.array([n.sample()[0] for _ in range(100_000)])
    inc = np.diff(np.concatenate([[0.0], xs]))
    assert np.var(inc) == pytest.approx(0.09, rel=0.05)


def test_ou_stationary_variance():
    n = OUNoise(40, theta=0.15, sigma=0.3, dt=0.05, seed=3)
    for _ in range(2000):
        n.sample()
    xs = np.array([n.sample() for _ in range(20_000)])
    assert xs.var() == pytest.approx(0.09 / 0.3, rel=0.08)


def test_noise_factory():
    assert isinstance(make_noise("ou", 2, 0.3), OUNoise)
    g = make_noise("gaussian", 2, 0.3, seed=0)
    assert isinstance(g, GaussianNoise)
    assert np.std([g.sample() for _ in range(20_000)]) == pytest.approx(0.3, rel=0.03)
    with pytest.raises(ValueError):
        make_noise("pink", 2, 0.3)
    with pytest.raises(ValueError):
        OUNoise(2, sigma=-1)


# ---------------------------------------------------------------- features


def test_encode_obs():
    f = encode_obs([4, 2, 2], 2.0, True)
    assert f.tolist() == [[2.0, 1.0, 0.0, 0.0, 1.0, 0.0]]
    g = encode_obs([1, 2, 3, 4, 3, 0, 0, 0, 0, 0], 1.0, False)
    assert g.tolist() == [[1, 2, 3, 4, 1.0, 0, 0, 0, 0, 0]]
    assert encoded_dim(3, True) == 6 and encoded_dim(15, True) == 24 and encoded_dim(15, False) == 15


# --------------------------------------------------------------------- DQN


def test_dqn_select():
    agent = linear_dqn(-1.0, -5.0)
    rng = np.random.default_rng(0)
    assert agent.select(np.array([3, 1, 0]), rng, 0.0) == 0
    assert linear_dqn(-5.0, -1.0).select(np.array([3, 1, 0]), rng, 0.0) == 1
    assert linear_dqn(-2.0, -2.0).greedy(np.array([0, 0, 0])) == 0
    picks = [agent.select(np.zeros(3), rng, 1.0) for _ in range(10_000)]
    assert abs(np.mean(picks) - 0.5) < 0.02


def test_epsilon_schedule():
    agent = DQNAgent(3, DQNConfig(hidden=(4,)), seed=0)
    assert agent.epsilon_at(0, 1000) == 1.0
    assert agent.epsilon_at(250, 1000) == pytest.approx(0.525)
    assert agent.epsilon_at(500, 1000) == pytest.approx(0.05)
    assert agent.epsilon_at(999, 1000) == pytest.approx(0.05)


def test_dqn_myopic_loss():
    agent = DQNAgent(3, DQNConfig(hidden=(8,), gamma=0.0), seed=4)
    s, s2 = np.array([[2.0, 1.0, 0.0]]), np.array([[2.0, 2.0, 0.0]])
    q = agent.q_values(s)[0, 1]
    loss = agent.update(Batch(s, np.array([[1.0]]), np.array([-8.0]), s2))
    assert loss == pytest.approx((-8.0 - q) ** 2, rel=1e-12)


def test_dqn_consistent_q_leaves_parameters():
    agent = linear_dqn(-3.0, -4.0, gamma=0.0)
    before = agent.q_net.get_flat()
    s = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 2.0]])
    loss = agent.update(Batch(s, np.array([[0.0], [1.0]]), np.array([-3.0, -4.0]), s))
    assert loss == 0.0
    assert np.array_equal(agent.q_net.get_flat(), before)


def test_dqn_target_snapshot_before_update():
    agent = DQNAgent(3, DQNConfig(hidden=(8,)), seed=1)
    s = np.array([[1.0, 2.0, 0.0]])
    before = agent.q_net.get_flat()
    agent.update(Batch(s, np.array([[0.0]]), np.array([-5.0]), s))
    assert np.array_equal(agent.target.get_flat(), before)
    assert not np.array_equal(agent.q_net.get_flat(), before)


def test_dqn_target_period():
    agent = DQNAgent(3, DQNConfig(hidden=(8,), target_period=3), seed=1)
    s = np.array([[1.0, 2.0, 0.0]])
    b = Batch(s, np.array([[0.0]]), np.array([-5.0]), s)
    first = agent.q_net.get_flat()
    for _ in range(3):
        agent.update(b)
    assert np.array_equal(agent.target.get_flat(), first)
    third = agent.q_net.get_flat()
    agent.update(b)
    assert np.array_equal(agent.target.get_flat(), third)


def test_update_does_not_touch_buffer_batch():
    buf = ReplayBuffer(20, 3)
    rng = np.random.default_rng(0)
    for _ in range(20):
        buf.push(rng.integers(0, 5, 3), rng.integers(0, 2), -rng.random(), rng.integers(0, 5, 3))
    snap = [t._replace(s=t.s.copy(), s_next=t.s_next.copy()) for t in buf.contents()]
    batch = buf.sample(8, rng)
    agent = DQNAgent(3, DQNConfig(hidden=(8,)), seed=0)
    agent.update(batch)
    for a, b in zip(snap, buf.contents()):
        assert np.array_equal(a.s, b.s) and a.r == b.r and np.array_equal(a.s_next, b.s_next)


def test_td_fixed_point_leaves_only_variance():
    """With Q(s, a) = E[V*(s')], the expected TD target equals Q and the loss is Var y."""
    space = TruncatedSpace(30)
    model = build_transitions(space, 0.25, 0.25)
    _, V = policy_iteration(model, 0.99)
    Q = np.column_stack([P @ V for P in model.P])
    st = space.states()
    y = -(st[:, 0] ** 2 + st[:, 1] ** 2).astype(float) + 0.99 * Q.max(axis=1)  # target given s'
    scale = np.abs(V).max()
    for a, P in enumerate(model.P):
        mean_y = P @ y
        assert np.max(np.abs(mean_y - Q[:, a])) < 1e-8 * scale
        loss = P @ (y * y) - 2 * Q[:, a] * mean_y + Q[:, a] ** 2
        var = P @ (y * y) - mean_y ** 2
        assert np.max(np.abs(loss - var)) < 1e-6 * scale


# -------------------------------------------------------------------- DDPG


def test_binarize():
    assert binarize([0.5, 0.4999]).tolist() == [1, 0]
    assert binarize([0.91, 0.02]).tolist() == [1, 0]
    raw = np.array([0.2, 0.7, 0.5])
    assert np.array_equal(binarize(binarize(raw)), binarize(raw))


def small_ddpg(n=2, **kw):
    cfg = DDPGConfig(actor_hidden=(16,), critic_hidden=(16,), **kw)
    return DDPGAgent(5 * n, n, cfg, seed=3)


def test_ddpg_select_deterministic_without_noise():
    agent = small_ddpg()
    s = np.array([1, 2, 0, 1, 0, 3, 0, 0, 1, 2])
    r1, b1 = agent.select(s, explore=False)
    r2, b2 = agent.select(s, explore=False)
    assert np.array_equal(r1, r2) and np.array_equal(b1, b2)
    assert np.all((r1 > 0) & (r1 < 1)) and r1.shape == (2,)
    raw, bits = agent.select(s, explore=True)
    assert np.all((raw >= 0) & (raw <= 1)) and np.array_equal(bits, binarize(raw))


def _toy_batch(n=2, M=4, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 4, (M, 5 * n)).astype(float)
    s[:, 4::5] = rng.integers(0, 4, (M, n))
    return Batch(s, rng.random((M, n)), -rng.random(M) * 3, s[::-1].copy())


@pytest.mark.parametrize("tau", [0.0, 1.0])
def test_soft_update_extremes(tau):
    agent = small_ddpg(tau=tau)
    a0, c0 = agent.actor_target.get_flat(), agent.critic_target.get_flat()
    agent.update(_toy_batch())
    if tau == 0.0:
        assert np.array_equal(agent.actor_target.get_flat(), a0)
        assert np.array_equal(agent.critic_target.get_flat(), c0)
    else:
        assert np.array_equal(agent.actor_target.get_flat(), agent.actor.get_flat())
        assert np.array_equal(agent.critic_target.get_flat(), agent.critic.get_flat())


def test_ddpg_myopic_critic_regression():
    agent = small_ddpg(gamma=0.0, critic_lr=1e-3)
    batch = _toy_batch(seed=5)
    for _ in range(10_000):
        agent.update(batch)
    q = agent.critic.predict(np.hstack([agent.features(batch.s), batch.a]))[:, 0]
    assert np.max(np.abs(q - batch.r)) < 1e-3


def test_ddpg_actor_ascends_critic():
    agent = small_ddpg(gamma=0.0, tau=0.0, actor_lr=1e-3)
    batch = _toy_batch(seed=6)
    objs = [agent.update(batch)[1] for _ in range(300)]
    # with the critic near its fixed point, the actor objective should not fall
    agent.critic_opt.lr = 0.0
    tail = [agent.update(batch)[1] for _ in range(200)]
    assert tail[-1] >= tail[0] - 1e-9
    assert np.isfinite(objs).all()


def test_invalid_tau():
    with pytest.raises(ValueError):
        small_ddpg(tau=1.5)


# ---------------------------------------------------------------- training


def test_train_dqn_log_and_determinism(tmp_path):
    def run(path):
        env = SingleIntersectionEnv(ArrivalModel(avenue=0.25, cross=0.25), seed=1)
        agent = DQNAgent(3, DQNConfig(hidden=(8,), capacity=500), seed=2)
        train_dqn(env, agent, 400, episode_len=150, seed=3, log_path=path)
        return agent

    a = run(tmp_path / "a.jsonl")
    b = run(tmp_path / "b.jsonl")
    assert np.array_equal(a.q_net.get_flat(), b.q_net.get_flat())
    recs = [json.loads(line) for line in open(tmp_path / "a.jsonl")]
    assert [r["steps"] for r in recs] == [150, 300, 400]
    assert set(recs[0]) == {"episode", "steps", "mean_reward", "mean_queue", "epsilon", "loss"}
    assert all(r["mean_reward"] <= 0 for r in recs)


def test_train_ddpg_log(tmp_path):
    env = make_env("avenue-2", ArrivalModel(avenue=0.5, cross=0.25), PassingRates(), seed=0)
    agent = DDPGAgent(env.obs_dim, 2, DDPGConfig(actor_hidden=(8,), critic_hidden=(8,)), seed=1)
    train_ddpg(env, agent, 200, episode_len=100, seed=2, log_path=tmp_path / "log.jsonl")
    recs = [json.loads(line) for line in open(tmp_path / "log.jsonl")]
    assert len(recs) == 2
    assert {"noise_sigma", "critic_loss", "actor_objective"} <= set(recs[1])


def test_agent_checkpoint_roundtrip(tmp_path):
    dqn = DQNAgent(3, DQNConfig(hidden=(6, 5), onehot_phase=True, obs_scale=10), seed=9)
    save_agent(dqn, tmp_path / "dqn")
    back = load_agent(tmp_path / "dqn")
    obs = np.array([[3, 4, 2], [0, 9, 1]])
    assert np.array_equal(back.q_values(obs), dqn.q_values(obs))
    ddpg = small_ddpg(3)
    save_agent(ddpg, tmp_path / "ddpg")
    back = load_agent(tmp_path / "ddpg")
    s = np.arange(15.0) % 4
    assert np.array_equal(back.select(s, False)[0], ddpg.select(s, False)[0])


def test_agent_checkpoint_mismatch(tmp_path):
    dqn = DQNAgent(3, DQNConfig(hidden=(6,)), seed=0)
    save_agent(dqn, tmp_path / "c")
    meta = json.loads((tmp_path / "c" / "agent.json").read_text())
    meta["config"]["hidden"] = [7]
    (tmp_path / "c" / "agent.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointIncompatible):
        load_agent(tmp_path / "c")
    meta["kind"] = "sarsa"
    (tmp_path / "c" / "agent.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointIncompatible):
        load_agent(tmp_path / "c")
