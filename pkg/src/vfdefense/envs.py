"""Deterministic 16x16 pixel environments.

PongLite: a ball bounces around the grid; a 3-pixel paddle on column 1
must intercept it. Catching the ball scores +1 and reflects it; a miss
scores -1 and ends the episode. GridChase: an agent walks the grid
collecting pellets that respawn at seeded random cells.

Both render pure functions of state (entities 1.0, background 0.0) and
are bit-reproducible from (seed, action sequence).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, replace

import numpy as np

GRID = 16
EPISODE_CAP = 512

PONG_ACTIONS = 3  # up, noop, down
PONG_UP, PONG_NOOP, PONG_DOWN = 0, 1, 2
PADDLE_COL = 1
PADDLE_HEIGHT = 3

CHASE_ACTIONS = 5  # up, down, left, right, noop
CHASE_MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1), 4: (0, 0)}


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepResult:
    frame: np.ndarray
    reward: float
    done: bool


@dataclass(frozen=True)
class PongState:
    ball: tuple  # (row, col)
    vel: tuple  # (drow, dcol), each in {-1, +1}
    paddle_top: int
    t: int
    done: bool = False


@dataclass(frozen=True)
class ChaseState:
    agent: tuple
    pellet: tuple
    t: int
    rng_state: dict  # serialized bit-generator state for pellet respawns
    done: bool = False


def action_count(kind):
    if kind == "ponglite":
        return PONG_ACTIONS
    if kind == "gridchase":
        return CHASE_ACTIONS
    raise EnvError(f"unknown environment kind {kind!r}")


def _render_pong(state):
    frame = np.zeros((GRID, GRID), dtype=np.float32)
    frame[state.paddle_top : state.paddle_top + PADDLE_HEIGHT, PADDLE_COL] = 1.0
    r, c = state.ball
    frame[r, c] = 1.0
    return frame


def _render_chase(state):
    frame = np.zeros((GRID, GRID), dtype=np.float32)
    frame[state.pellet] = 1.0
    frame[state.agent] = 1.0
    return frame


def render(state):
    if isinstance(state, PongState):
        return _render_pong(state)
    return _render_chase(state)


def _draw_pellet(rng, agent):
    # dedicated respawn stream: draw (row, col) pairs until off the agent
    while True:
        r = int(rng.integers(0, GRID))
        c = int(rng.integers(0, GRID))
        if (r, c) != agent:
            return (r, c)


def env_reset(kind, seed):
    """Deterministic initial (state, frame) from a 64-bit seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == "ponglite":
        ball = (int(rng.integers(2, 14)), int(rng.integers(4, 13)))
        vel = (int(rng.integers(0, 2)) * 2 - 1, int(rng.integers(0, 2)) * 2 - 1)
        state = PongState(ball=ball, vel=vel, paddle_top=6, t=0)
        return state, _render_pong(state)
    if kind == "gridchase":
        agent = (8, 8)
        pellet = _draw_pellet(rng, agent)
        state = ChaseState(
            agent=agent, pellet=pellet, t=0, rng_state=rng.bit_generator.state
        )
        return state, _render_chase(state)
    raise EnvError(f"unknown environment kind {kind!r}")


def _step_pong(state, action):
    if action not in (PONG_UP, PONG_NOOP, PONG_DOWN):
        raise EnvError(f"pong action out of range: {action}")
    paddle = state.paddle_top
    if action == PONG_UP:
        paddle = max(0, paddle - 1)
    elif action == PONG_DOWN:
        paddle = min(GRID - PADDLE_HEIGHT, paddle + 1)

    r, c = state.ball
    vr, vc = state.vel
    r += vr
    c += vc
    reward = 0.0
    done = False
    if r <= 0:
        r = 0
        vr = 1
    elif r >= GRID - 1:
        r = GRID - 1
        vr = -1
    if c >= GRID - 1:
        c = GRID - 1
        vc = -1
    elif c <= PADDLE_COL:
        c = PADDLE_COL
        if paddle <= r < paddle + PADDLE_HEIGHT:
            reward = 1.0
            vc = 1
        else:
            reward = -1.0
            done = True

    t = state.t + 1
    if t >= EPISODE_CAP and not done:
        done = True
    new = PongState(ball=(r, c), vel=(vr, vc), paddle_top=paddle, t=t, done=done)
    return new, StepResult(frame=_render_pong(new), reward=reward, done=done)


def _step_chase(state, action):
    if action not in CHASE_MOVES:
        raise EnvError(f"chase action out of range: {action}")
    dr, dc = CHASE_MOVES[action]
    agent = (
        min(GRID - 1, max(0, state.agent[0] + dr)),
        min(GRID - 1, max(0, state.agent[1] + dc)),
    )
    reward = 0.0
    pellet = state.pellet
    rng_state = state.rng_state
    if agent == pellet:
        reward = 1.0
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = rng_state
        pellet = _draw_pellet(rng, agent)
        rng_state = rng.bit_generator.state
    t = state.t + 1
    done = t >= EPISODE_CAP
    new = ChaseState(
        agent=agent, pellet=pellet, t=t, rng_state=rng_state, done=done
    )
    return new, StepResult(frame=_render_chase(new), reward=reward, done=done)


def env_step(state, action):
    if state.done:
        raise EnvError("step after episode end; reset first")
    if isinstance(state, PongState):
        return _step_pong(state, int(action))
    return _step_chase(state, int(action))


# ---------------------------------------------------------------------------
# trajectory recording: JSON-lines, 256-byte base64 frames


def frame_to_b64(frame):
    raw = np.rint(np.asarray(frame) * 255).astype(np.uint8).tobytes()
    return base64.b64encode(raw).decode("ascii")


def frame_from_b64(text):
    raw = np.frombuffer(base64.b64decode(text), dtype=np.uint8)
    return (raw.reshape(GRID, GRID).astype(np.float32)) / 255.0


def write_trajectory(fh, steps):
    """steps: iterable of (t, action, reward, done, frame)."""
    for t, action, reward, done, frame in steps:
        fh.write(
            json.dumps(
                {
                    "t": int(t),
                    "action": int(action),
                    "reward": float(reward),
                    "done": bool(done),
                    "frame": frame_to_b64(frame),
                },
                separators=(",", ":"),
            )
            + "\n"
        )


def read_trajectory(fh):
    for line in fh:
        if not line.strip():
            continue
        rec = json.loads(line)
        yield (
            rec["t"],
            rec["action"],
            rec["reward"],
            rec["done"],
            frame_from_b64(rec["frame"]),
        )
