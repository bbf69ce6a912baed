"""DQN policy over stacked pixel frames, and the action distribution the
detector compares.

The Q-network consumes the last 4 frames. Its softmax (temperature 1 by
default) is the policy's action distribution; the temperature never
changes the greedy action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .envs import GRID, action_count, env_reset, env_step
from .nets import AdamState, LossKind, Network, adam_step, param_gradients

STACK_SIZE = 4


class FrameStack:
    """The m=4 most recent frames, oldest first. Padded by repeating the
    first frame at episode start."""

    def __init__(self, first_frame):
        self.frames = [np.asarray(first_frame, dtype=np.float32)] * STACK_SIZE

    def push(self, frame):
        self.frames = self.frames[1:] + [np.asarray(frame, dtype=np.float32)]

    def as_array(self):
        return np.stack(self.frames, axis=0)


@dataclass
class DQNConfig:
    env: str = "ponglite"
    replay_capacity: int = 50_000
    batch_size: int = 32
    gamma: float = 0.99
    target_sync: int = 1_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 30_000
    training_steps: int = 100_000
    warmup_steps: int = 500
    learning_rate: float = 1e-4
    eval_every: int = 5_000
    eval_episodes: int = 20
    hidden: tuple = (128, 64)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("replay_capacity", "batch_size", "target_sync"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PolicyModel:
    q_network: Network
    action_count: int
    mean_pixel: float
    env: str
    temperature: float = 1.0

    def dropout_layer_indices(self):
        # inputs of the final affine layers (everything after the conv/front
        # half of the stack); used only by the dropout detector
        affine = [i for i, l in enumerate(self.q_network.layers)
                  if isinstance(l, nets.Affine)]
        return tuple(affine[-2:]) if len(affine) >= 2 else tuple(affine)


def preprocess(frame, mean_pixel):
    """Zero-center a frame (or stack of frames) by the corpus mean pixel."""
    return np.asarray(frame, dtype=np.float32) - np.float32(mean_pixel)


def unpreprocess(tensor, mean_pixel):
    return np.asarray(tensor, dtype=np.float32) + np.float32(mean_pixel)


def q_values(policy, stack):
    x = preprocess(stack.as_array() if isinstance(stack, FrameStack) else stack,
                   policy.mean_pixel)
    return nets.forward_eval(policy.q_network, x)


def q_values_dropout(policy, stack, rate, passes, rng):
    """Stochastic Q-value samples with dropout before the final affine
    layers; returns (passes, action_count)."""
    x = preprocess(stack.as_array() if isinstance(stack, FrameStack) else stack,
                   policy.mean_pixel)
    batch = np.repeat(x[None], passes, axis=0)
    idx = policy.dropout_layer_indices()
    # one mask per pass: forward each sample separately so masks differ
    outs = [policy.q_network.forward(batch[i : i + 1], dropout=(idx, rate, rng))[0]
            for i in range(passes)]
    return np.stack(outs, axis=0)


def action_distribution(policy, stack, temperature=None):
    tau = policy.temperature if temperature is None else temperature
    return nets.softmax_temp(q_values(policy, stack), tau)


def greedy_action(dist_or_q):
    """Argmax with lowest-index tie-break (np.argmax's convention)."""
    return int(np.argmax(dist_or_q))


def select_action(dist, mode, rng, epsilon=0.0):
    dist = np.asarray(dist, dtype=np.float64)
    if mode == "greedy":
        return greedy_action(dist)
    if mode == "epsilon":
        if rng.random() < epsilon:
            return int(rng.integers(0, len(dist)))
        return greedy_action(dist)
    if mode == "sample":
        return int(rng.choice(len(dist), p=dist / dist.sum()))
    raise ValueError(f"unknown selection mode {mode!r}")


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    def __init__(self, capacity, stack_shape):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity,) + stack_shape, dtype=np.float32)
        self.next_states = np.zeros_like(self.states)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def push(self, state, action, reward, next_state, done):
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return (
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.dones[idx],
        )


# ---------------------------------------------------------------------------
# training


def build_q_network(n_actions, hidden, rng):
    layers = []
    in_features = STACK_SIZE * GRID * GRID
    for width in hidden:
        layers.append(nets.Affine(in_features, width, rng=rng))
        layers.append(nets.Relu())
        in_features = width
    layers.append(nets.Affine(in_features, n_actions, rng=rng))
    return Network((STACK_SIZE, GRID, GRID), layers)


def compute_mean_pixel(env, frames, seed):
    """Scalar mean pixel over a random-policy rollout corpus."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n_actions = action_count(env)
    total = 0.0
    count = 0
    state, frame = env_reset(env, int(rng.integers(0, 2**63)))
    while count < frames:
        total += float(frame.sum())
        count += 1
        action = int(rng.integers(0, n_actions))
        state, result = env_step(state, action)
        frame = result.frame
        if result.done:
            state, frame = env_reset(env, int(rng.integers(0, 2**63)))
    return total / (count * GRID * GRID)


def evaluate_policy(policy, episodes, seed, mode="greedy", epsilon=0.0):
    """Mean return over seeded episodes; returns (mean, returns list)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    returns = []
    for _ in range(episodes):
        state, frame = env_reset(policy.env, int(rng.integers(0, 2**63)))
        stack = FrameStack(frame)
        total = 0.0
        while True:
            dist = action_distribution(policy, stack)
            action = select_action(dist, mode, rng, epsilon)
            state, result = env_step(state, action)
            total += result.reward
            stack.push(result.frame)
            if result.done:
                break
        returns.append(total)
    return float(np.mean(returns)), returns


def train_dqn(config):
    """Train a DQN policy; returns (PolicyModel, training curve dict).

    Deterministic given config.seed. The returned model is the best
    periodic-evaluation checkpoint, so its greedy return matches the best
    return observed during training up to evaluation sampling.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n_actions = action_count(config.env)
    mean_pixel = compute_mean_pixel(config.env, 10_000, config.seed + 1)

    online = build_q_network(n_actions, config.hidden, rng)
    target = online.copy()
    opt = AdamState()
    buffer = ReplayBuffer(config.replay_capacity, (STACK_SIZE, GRID, GRID))
    policy = PolicyModel(online, n_actions, mean_pixel, config.env)

    episode_returns = []
    eval_curve = []
    losses = []
    best_eval = -np.inf
    best_params = {k: v.copy() for k, v in online.named_params().items()}

    state, frame = env_reset(config.env, int(rng.integers(0, 2**63)))
    stack = FrameStack(frame)
    episode_return = 0.0

    for step in range(1, config.training_steps + 1):
        frac = min(1.0, step / config.eps_decay_steps)
        eps = config.eps_start + frac * (config.eps_end - config.eps_start)
        obs = preprocess(stack.as_array(), mean_pixel)
        if rng.random() < eps:
            action = int(rng.integers(0, n_actions))
        else:
            action = greedy_action(nets.forward_eval(online, obs))
        state, result = env_step(state, action)
        episode_return += result.reward
        prev = stack.as_array()
        stack.push(result.frame)
        buffer.push(
            preprocess(prev, mean_pixel),
            action,
            result.reward,
            preprocess(stack.as_array(), mean_pixel),
            result.done,
        )
        if result.done:
            episode_returns.append(episode_return)
            episode_return = 0.0
            state, frame = env_reset(config.env, int(rng.integers(0, 2**63)))
            stack = FrameStack(frame)

        if step > config.warmup_steps and buffer.size >= config.batch_size:
            s, a, r, s2, d = buffer.sample(config.batch_size, rng)
            q_next = target.forward(s2).max(axis=1)
            targets = r + config.gamma * q_next * (~d)
            q_all = online.forward(s)
            td_target = q_all.copy()
            td_target[np.arange(len(a)), a] = targets
            loss, grads = param_gradients(online, s, LossKind.HUBER, td_target)
            if not np.isfinite(loss):
                raise nets.NetError(f"training diverged at step {step}")
            adam_step(online.named_params(), grads, opt, config.learning_rate)
            losses.append(loss)

        if step % config.target_sync == 0:
            target.set_params(online.named_params())

        if step % config.eval_every == 0:
            mean_ret, _ = evaluate_policy(
                policy, config.eval_episodes, config.seed + 7
            )
            eval_curve.append((step, mean_ret))
            if mean_ret > best_eval:
                best_eval = mean_ret
                best_params = {
                    k: v.copy() for k, v in online.named_params().items()
                }

    online.set_params(best_params)
    curve = {
        "episode_returns": episode_returns,
        "eval_curve": eval_curve,
        "best_eval_return": best_eval,
        "final_loss": losses[-1] if losses else None,
    }
    return policy, curve


# ---------------------------------------------------------------------------
# checkpointing: numcore container + sidecar text of stats/config echo


def save_policy(policy, path):
    nets.save_network(policy.q_network, path)
    with open(str(path) + ".meta", "w") as fh:
        fh.write(f"env={policy.env}\n")
        fh.write(f"action_count={policy.action_count}\n")
        fh.write(f"mean_pixel={policy.mean_pixel!r}\n")
        fh.write(f"temperature={policy.temperature!r}\n")


def load_policy(path):
    net = nets.load_network(path)
    meta = {}
    with open(str(path) + ".meta") as fh:
        for line in fh:
            key, value = line.strip().split("=", 1)
            meta[key] = value
    return PolicyModel(
        q_network=net,
        action_count=int(meta["action_count"]),
        mean_pixel=float(meta["mean_pixel"]),
        env=meta["env"],
        temperature=float(meta.get("temperature", "1.0")),
    )
