"""Closed loop: run episodes under a scheduled adversary with a chosen
defense, logging the per-step record every evaluation artifact is
computed from.

The adversary perturbs only the frame delivered at the current step;
frames already in the agent's history are never rewritten. Detection is
suppressed for the first 4 steps (not enough history), and the observed
frame -- not the predicted one -- always enters the history buffer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import attacks as attacks_mod
from .detect import detector_score
from .envs import EPISODE_CAP, env_reset, env_step
from .policy import STACK_SIZE, greedy_action, select_action
from . import nets

DEFENSES = ("none", "detect_only", "foresight_suggest", "random_on_flag",
            "squeeze_suggest")

NOOP = {"ponglite": 1, "gridchase": 4}


class GuardError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepRecord:
    t: int
    attacked: bool
    attack_success: bool
    score: float
    flagged: bool
    action_taken: int
    action_clean: int
    reward: float


@dataclass
class EpisodeLog:
    seed: int
    config: dict
    steps: list
    total_return: float

    def scores(self):
        return np.array([s.score for s in self.steps])


def _policy_dist(policy, frames):
    q = nets.forward_eval(
        policy.q_network,
        np.asarray(frames, dtype=np.float32) - np.float32(policy.mean_pixel),
    )
    return nets.softmax_temp(q, policy.temperature)


def run_episode(env, policy, detector_config, attack_config, mask, defense,
                seed, predictor=None, max_steps=EPISODE_CAP):
    """Play one episode and return its EpisodeLog.

    `mask` decides which steps are attacked; `defense` decides what to do
    with detector verdicts. Deterministic given seeds; the dropout
    detector draws from its own child stream of `seed`.
    """
    if defense not in DEFENSES:
        raise GuardError(f"unknown defense {defense!r}")
    needs_detector = defense != "none"
    if needs_detector and detector_config is None:
        raise GuardError(f"defense {defense!r} needs a detector config")
    if defense == "foresight_suggest" and detector_config.kind != "foresight":
        raise GuardError("foresight_suggest requires the foresight detector")
    if defense == "squeeze_suggest" and detector_config.kind != "squeeze":
        raise GuardError("squeeze_suggest requires the squeeze detector")
    detector_model = predictor
    rng = np.random.Generator(np.random.PCG64(seed))
    detector_rng = np.random.Generator(np.random.PCG64(seed + 10_007))

    state, frame = env_reset(env, seed)
    noop = NOOP[env]
    history_frames = [frame] * STACK_SIZE  # observed frames, oldest first
    history_actions = [noop] * STACK_SIZE
    steps = []
    total = 0.0
    t = 0
    while t < max_steps:
        clean = frame
        attacked = bool(mask[t]) if t < len(mask) else False
        clean_stack = np.stack(history_frames[1:] + [clean])
        action_clean = greedy_action(_policy_dist(policy, clean_stack))
        if attacked:
            outcome = attacks_mod.craft(policy, clean_stack, attack_config)
            observed = outcome.adversarial_frame
            attack_success = outcome.success
        else:
            observed = clean
            attack_success = False

        score = 0.0
        flagged = False
        suggested = None
        if needs_detector and t >= STACK_SIZE:
            verdict = detector_score(
                detector_config, policy, detector_model,
                history_frames, history_actions, observed, rng=detector_rng,
            )
            score = verdict.score
            flagged = verdict.flagged
            suggested = verdict.suggested_dist

        obs_stack = np.stack(history_frames[1:] + [observed])
        if flagged and defense == "foresight_suggest":
            action = greedy_action(suggested)
        elif flagged and defense == "squeeze_suggest":
            action = greedy_action(suggested)
        elif flagged and defense == "random_on_flag":
            action = int(rng.integers(0, policy.action_count))
        else:
            action = greedy_action(_policy_dist(policy, obs_stack))

        state, result = env_step(state, action)
        total += result.reward
        steps.append(
            StepRecord(
                t=t,
                attacked=attacked,
                attack_success=attack_success,
                score=float(score),
                flagged=bool(flagged),
                action_taken=int(action),
                action_clean=int(action_clean),
                reward=float(result.reward),
            )
        )
        history_frames = history_frames[1:] + [observed]
        history_actions = history_actions[1:] + [int(action)]
        frame = result.frame
        t += 1
        if result.done:
            break
    config_echo = {
        "env": env,
        "defense": defense,
        "attack": None if attack_config is None else {
            "kind": attack_config.kind,
            "epsilon": attack_config.epsilon,
            "alpha": attack_config.step_size,
            "iterations": attack_config.iterations,
        },
        "detector": None if detector_config is None else {
            "kind": detector_config.kind,
            "metric": detector_config.metric,
            "threshold": detector_config.threshold,
        },
        "mask_mode": getattr(mask, "mode", "none"),
    }
    return EpisodeLog(seed=seed, config=config_echo, steps=steps,
                      total_return=total)


def write_log(log, fh):
    """JSON-lines: one header line with the config echo, then one line per
    StepRecord."""
    header = {"seed": log.seed, "config": log.config,
              "total_return": log.total_return}
    fh.write(json.dumps(header, separators=(",", ":"), sort_keys=True) + "\n")
    for step in log.steps:
        fh.write(json.dumps(asdict(step), separators=(",", ":"),
                            sort_keys=True) + "\n")


def read_log(fh):
    lines = [line for line in fh if line.strip()]
    header = json.loads(lines[0])
    steps = [StepRecord(**json.loads(line)) for line in lines[1:]]
    return EpisodeLog(seed=header["seed"], config=header["config"],
                      steps=steps, total_return=header["total_return"])
