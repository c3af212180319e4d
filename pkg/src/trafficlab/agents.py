"""Replay-based DQN for a single intersection and binarised DDPG for grids."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .nn import MLP, Adam, CheckpointIncompatible, chain_critic_to_actor, load_mlp, save_mlp


class InsufficientSamples(ValueError):
    pass


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray


class Batch(NamedTuple):
    s: np.ndarray  # (M, state_dim)
    a: np.ndarray  # (M, action_dim)
    r: np.ndarray  # (M,)
    s_next: np.ndarray  # (M, state_dim)


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is evicted first."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.count = 0  # total insertions

    def __len__(self) -> int:
        return min(self.count, self.capacity)

    def push(self, s, a, r, s_next) -> None:
        i = self.count % self.capacity
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.count += 1

    def sample(self, M: int, rng: np.random.Generator) -> Batch:
        n = len(self)
        if M < 1 or n < M:
            raise InsufficientSamples(f"requested {M} transitions from a buffer holding {n}")
        idx = rng.choice(n, size=M, replace=False)
        return Batch(self.s[idx].copy(), self.a[idx].copy(), self.r[idx].copy(), self.s_next[idx].copy())

    def contents(self) -> list[Transition]:
        order = range(len(self)) if self.count <= self.capacity else (
            (self.count + k) % self.capacity for k in range(self.capacity)
        )
        return [Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i]) for i in order]


# ------------------------------------------------------------------ noise


class OUNoise:
    """Ornstein-Uhlenbeck process ``x += theta (mu - x) dt + sigma sqrt(dt) N(0, 1)``."""

    def __init__(self, dim: int, theta=0.15, sigma=0.3, dt=1.0, mu=0.0, seed=None):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.dim, self.theta, self.sigma, self.dt, self.mu = dim, theta, sigma, dt, mu
        self.rng = np.random.default_rng(seed)
        self.x = np.full(dim, float(mu))

    def reset(self) -> None:
        self.x = np.full(self.dim, float(self.mu))

    def sample(self) -> np.ndarray:
        dw = self.rng.standard_normal(self.dim)
        self.x = self.x + self.theta * (self.mu - self.x) * self.dt + self.sigma * np.sqrt(self.dt) * dw
        return self.x.copy()


class GaussianNoise:
    def __init__(self, dim: int, sigma=0.3, seed=None):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.dim, self.sigma = dim, sigma
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        pass

    def sample(self) -> np.ndarray:
        return self.sigma * self.rng.standard_normal(self.dim)


def make_noise(kind: str, dim: int, sigma: float, theta: float = 0.15, dt: float = 1.0, seed=None):
    if kind == "ou":
        return OUNoise(dim, theta, sigma, dt, seed=seed)
    if kind == "gaussian":
        return GaussianNoise(dim, sigma, seed=seed)
    raise ValueError(f"unknown noise {kind!r}")


# --------------------------------------------------------------- features


def encode_obs(obs, scale: float, onehot_phase: bool) -> np.ndarray:
    """Scale queue counts and optionally one-hot encode the phases.

    Observations are groups of ``[queues..., phase]``: width 3 for a
    single intersection, width 5 per node for a grid.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    width = 3 if obs.shape[1] == 3 else 5
    groups = obs.reshape(obs.shape[0], -1, width)
    q = groups[:, :, :-1] / scale
    ph = groups[:, :, -1]
    if onehot_phase:
        hot = (ph[:, :, None] == np.arange(4)).astype(np.float64)
        feats = np.concatenate([q, hot], axis=2)
    else:
        feats = np.concatenate([q, ph[:, :, None] / 3.0], axis=2)
    return feats.reshape(obs.shape[0], -1)


def encoded_dim(obs_dim: int, onehot_phase: bool) -> int:
    width = 3 if obs_dim == 3 else 5
    per = width - 1 + (4 if onehot_phase else 1)
    return obs_dim // width * per


# -------------------------------------------------------------------- DQN


@dataclass
class DQNConfig:
    hidden: tuple = (400, 400)
    activation: str = "tanh"
    lr: float = 1e-3
    lr_end: float | None = None  # linear decay of the step size over training when set
    gamma: float = 0.99
    batch_size: int = 64
    capacity: int = 100_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5  # share of training over which epsilon decays
    target_period: int = 0  # 0: snapshot of the online net before every update
    obs_scale: float = 1.0
    onehot_phase: bool = False
    reward_scale: float = 1.0
    learn_start: int = 0  # updates begin once the buffer holds max(batch, learn_start)
    updates_per_step: int = 1
    td_clip: float | None = None  # clip TD errors in the gradient (Huber loss) when set


class DQNAgent:
    def __init__(self, obs_dim: int = 3, config: DQNConfig | None = None, seed=None):
        self.config = config or DQNConfig()
        c = self.config
        self.obs_dim = obs_dim
        sizes = [encoded_dim(obs_dim, c.onehot_phase), *c.hidden, 2]
        self.q_net = MLP.build(sizes, hidden=c.activation, output="identity", seed=seed)
        self.target = self.q_net.copy()
        self.opt = Adam(self.q_net.params, lr=c.lr)
        self.n_updates = 0

    def features(self, obs) -> np.ndarray:
        return encode_obs(obs, self.config.obs_scale, self.config.onehot_phase)

    def q_values(self, obs) -> np.ndarray:
        q = self.q_net.predict(self.features(obs))
        return q[0] if np.ndim(obs) == 1 else q

    def greedy(self, obs) -> int:
        q = self.q_values(obs)
        return int(q[1] > q[0])

    def select(self, obs, rng: np.random.Generator, epsilon: float) -> int:
        if epsilon > 0 and rng.random() < epsilon:
            return int(rng.integers(2))
        return self.greedy(obs)

    def epsilon_at(self, step: int, total_steps: int) -> float:
        c = self.config
        span = max(1, int(c.eps_fraction * total_steps))
        frac = min(1.0, step / span)
        return c.eps_start + frac * (c.eps_end - c.eps_start)

    def update(self, batch: Batch) -> float:
        """One Adam step on the mean squared TD error; returns the loss."""
        c = self.config
        if c.target_period <= 0:
            self.target.copy_from(self.q_net)
        elif self.n_updates % c.target_period == 0:
            self.target.copy_from(self.q_net)
        M = len(batch.r)
        q_next = self.target.predict(self.features(batch.s_next))
        y = c.reward_scale * batch.r + c.gamma * q_next.max(axis=1)
        q = self.q_net.forward(self.features(batch.s))
        a = batch.a.reshape(M).astype(np.int64)
        rows = np.arange(M)
        err = q[rows, a] - y
        g = np.zeros_like(q)
        gerr = err if c.td_clip is None else np.clip(err, -c.td_clip, c.td_clip)
        g[rows, a] = 2.0 * gerr / M
        grads, _ = self.q_net.backward(g)
        self.opt.step(self.q_net.params, grads)
        self.n_updates += 1
        return float(np.mean(err * err))

    def policy(self) -> "GreedyQPolicy":
        return GreedyQPolicy(self)


class GreedyQPolicy:
    def __init__(self, agent: DQNAgent):
        self.agent = agent

    def reset(self):
        pass

    def act(self, obs) -> int:
        return self.agent.greedy(obs)


# ------------------------------------------------------------------- DDPG


@dataclass
class DDPGConfig:
    actor_hidden: tuple = (600, 600, 600, 600)
    critic_hidden: tuple = (600, 600, 600, 600)
    activation: str = "relu"
    alpha: float = 10.0  # steepness of the actor's output sigmoid
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.001
    batch_size: int = 64
    capacity: int = 100_000
    noise: str = "ou"
    sigma: float = 0.3
    theta: float = 0.15
    dt: float = 1.0
    obs_scale: float = 1.0
    onehot_phase: bool = False
    reward_scale: float = 1.0
    learn_start: int = 0
    updates_per_step: int = 1


def binarize(raw) -> np.ndarray:
    """Switch bit per node: 1 iff the continuous output is at least 0.5."""
    return (np.asarray(raw) >= 0.5).astype(np.int64)


class DDPGAgent:
    def __init__(self, obs_dim: int, n_actions: int, config: DDPGConfig | None = None, seed=None):
        self.config = config or DDPGConfig()
        c = self.config
        if not 0.0 <= c.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        self.obs_dim, self.n_actions = obs_dim, n_actions
        ss = np.random.SeedSequence(seed)
        actor_seed, critic_seed, noise_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        fdim = encoded_dim(obs_dim, c.onehot_phase)
        self.actor = MLP.build(
            [fdim, *c.actor_hidden, n_actions], hidden=c.activation,
            output="steepened_sigmoid", alpha=c.alpha, seed=actor_seed,
        )
        self.critic = MLP.build([fdim + n_actions, *c.critic_hidden, 1], hidden=c.activation,
                                output="identity", seed=critic_seed)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, lr=c.actor_lr)
        self.critic_opt = Adam(self.critic.params, lr=c.critic_lr)
        self.noise = make_noise(c.noise, n_actions, c.sigma, c.theta, c.dt, seed=noise_seed)
        self.n_updates = 0

    def features(self, obs) -> np.ndarray:
        return encode_obs(obs, self.config.obs_scale, self.config.onehot_phase)

    def select(self, obs, explore: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Return the (clipped, possibly noisy) continuous action and its bits."""
        raw = self.actor.predict(self.features(obs))[0]
        if explore:
            raw = np.clip(raw + self.noise.sample(), 0.0, 1.0)
        return raw, binarize(raw)

    def update(self, batch: Batch) -> tuple[float, float]:
        c = self.config
        M = len(batch.r)
        f_next = self.features(batch.s_next)
        a_next = self.actor_target.predict(f_next)
        q_next = self.critic_target.predict(np.hstack([f_next, a_next]))[:, 0]
        y = c.reward_scale * batch.r + c.gamma * q_next

        f = self.features(batch.s)
        q = self.critic.forward(np.hstack([f, batch.a]))[:, 0]
        err = q - y
        grads, _ = self.critic.backward((2.0 * err / M)[:, None])
        self.critic_opt.step(self.critic.params, grads)

        actor_grads, objective = chain_critic_to_actor(self.critic, self.actor, f)
        # ascend the critic's estimate
        self.actor_opt.step(self.actor.params, [-g for g in actor_grads])

        self.actor_target.soft_update(self.actor, c.tau)
        self.critic_target.soft_update(self.critic, c.tau)
        self.n_updates += 1
        return float(np.mean(err * err)), objective

    def policy(self) -> "DeterministicActorPolicy":
        return DeterministicActorPolicy(self)


class DeterministicActorPolicy:
    def __init__(self, agent: DDPGAgent):
        self.agent = agent

    def reset(self):
        pass

    def act(self, obs) -> np.ndarray:
        return self.agent.select(obs, explore=False)[1]


# --------------------------------------------------------------- training


@dataclass
class TrainLog:
    episodes: list = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.episodes:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_dqn(env, agent: DQNAgent, total_steps: int, episode_len: int = 150, seed=None,
              log_path=None) -> TrainLog:
    """Epsilon-greedy training in episodes that restart from the environment's initial state.

    ``seed`` drives exploration and minibatch sampling; the environment
    keeps its own arrival stream.
    """
    c = agent.config
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(c.capacity, env.obs_dim, 1)
    log = TrainLog()
    step = 0
    while step < total_steps:
        obs = env.reset()
        rewards, queues, losses = [], [], []
        eps = agent.epsilon_at(step, total_steps)
        for _ in range(min(episode_len, total_steps - step)):
            eps = agent.epsilon_at(step, total_steps)
            if c.lr_end is not None:
                agent.opt.lr = c.lr + (c.lr_end - c.lr) * step / total_steps
            a = agent.select(obs, rng, eps)
            nxt, r, _ = env.step(a)
            buf.push(obs, a, r, nxt)
            obs = nxt
            rewards.append(r)
            queues.append(float(env.queues().sum()))
            step += 1
            if len(buf) >= max(c.batch_size, c.learn_start):
                for _ in range(c.updates_per_step):
                    losses.append(agent.update(buf.sample(c.batch_size, rng)))
        log.episodes.append(_episode_record(len(log.episodes), step, rewards, queues,
                                            {"epsilon": eps, "loss": _mean(losses)}))
    if log_path is not None:
        log.write_jsonl(log_path)
    return log


def train_ddpg(env, agent: DDPGAgent, total_steps: int, episode_len: int = 150, seed=None,
               log_path=None) -> TrainLog:
    c = agent.config
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(c.capacity, env.obs_dim, agent.n_actions)
    log = TrainLog()
    step = 0
    while step < total_steps:
        obs = env.reset()
        agent.noise.reset()
        rewards, queues, c_losses, objs = [], [], [], []
        for _ in range(min(episode_len, total_steps - step)):
            raw, bits = agent.select(obs, explore=True)
            nxt, r, _ = env.step(bits)
            buf.push(obs, raw, r, nxt)
            obs = nxt
            rewards.append(r)
            queues.append(float(env.queues().sum()))
            step += 1
            if len(buf) >= max(c.batch_size, c.learn_start):
                for _ in range(c.updates_per_step):
                    cl, ob = agent.update(buf.sample(c.batch_size, rng))
                    c_losses.append(cl)
                    objs.append(ob)
        log.episodes.append(_episode_record(
            len(log.episodes), step, rewards, queues,
            {"noise_sigma": c.sigma, "critic_loss": _mean(c_losses), "actor_objective": _mean(objs)},
        ))
    if log_path is not None:
        log.write_jsonl(log_path)
    return log


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _episode_record(ep, steps, rewards, queues, extra) -> dict:
    rec = {
        "episode": ep,
        "steps": steps,
        "mean_reward": float(np.mean(rewards)),
        "mean_queue": float(np.mean(queues)),
    }
    rec.update(extra)
    return rec


# ------------------------------------------------------------ checkpoints


def save_agent(agent, directory) -> None:
    """Write every network via the nn checkpoint format plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    if isinstance(agent, DQNAgent):
        nets = {"q_net": agent.q_net, "target": agent.target}
        meta = {"kind": "dqn", "obs_dim": agent.obs_dim}
    else:
        nets = {"actor": agent.actor, "critic": agent.critic,
                "actor_target": agent.actor_target, "critic_target": agent.critic_target}
        meta = {"kind": "ddpg", "obs_dim": agent.obs_dim, "n_actions": agent.n_actions}
    meta["config"] = asdict(agent.config)
    meta["networks"] = sorted(nets)
    for name, net in nets.items():
        save_mlp(net, os.path.join(directory, f"{name}.bin"))
    with open(os.path.join(directory, "agent.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)


def load_agent(directory):
    try:
        with open(os.path.join(directory, "agent.json")) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointIncompatible(f"{directory}: cannot read agent manifest: {e}") from e
    if meta.get("kind") == "dqn":
        cfg = DQNConfig(**{**meta["config"], "hidden": tuple(meta["config"]["hidden"])})
        agent = DQNAgent(meta["obs_dim"], cfg, seed=0)
    elif meta.get("kind") == "ddpg":
        conf = meta["config"]
        cfg = DDPGConfig(**{**conf, "actor_hidden": tuple(conf["actor_hidden"]),
                            "critic_hidden": tuple(conf["critic_hidden"])})
        agent = DDPGAgent(meta["obs_dim"], meta["n_actions"], cfg, seed=0)
    else:
        raise CheckpointIncompatible(f"{directory}: unknown agent kind {meta.get('kind')!r}")
    for name in meta["networks"]:
        net = getattr(agent, name)
        loaded = load_mlp(os.path.join(directory, f"{name}.bin"))
        if [s for s in loaded.specs] != list(net.specs):
            raise CheckpointIncompatible(f"{directory}: network {name} does not match the manifest")
        net.copy_from(loaded)
    return agent
