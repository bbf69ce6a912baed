"""White-box perturbation crafting against the policy inside an L-infinity
epsilon ball, plus per-timestep attack schedules.

Only the newest frame of the stack is perturbed: a static adversary
cannot rewrite frames the agent has already stored. CWLinfLite is a
margin-loss projected-gradient simplification, not the full
Carlini-Wagner optimization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .nets import LossKind
from .policy import FrameStack, greedy_action, preprocess

EPSILON_SANITY = 0.1  # perturbations above this are no longer "imperceivable"
CW_KAPPA = 0.01


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"  # fgsm | bim | cwlite
    epsilon: float = 0.01
    alpha: float | None = None  # default epsilon / 4
    iterations: int = 10

    def __post_init__(self):
        if self.kind not in ("fgsm", "bim", "cwlite"):
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if not 0 < self.epsilon <= EPSILON_SANITY:
            raise AttackError(
                f"epsilon must be in (0, {EPSILON_SANITY}], got {self.epsilon}"
            )
        if self.kind != "fgsm" and self.iterations < 1:
            raise AttackError("iterative attacks need iterations >= 1")

    @property
    def step_size(self):
        return self.alpha if self.alpha is not None else self.epsilon / 4.0


@dataclass(frozen=True)
class AttackOutcome:
    adversarial_frame: np.ndarray
    delta_linf: float
    success: bool
    crafting_iterations_used: int


def _stack_array(stack):
    return stack.as_array() if isinstance(stack, FrameStack) else np.asarray(
        stack, dtype=np.float32
    )


def _greedy_on(policy, frames):
    q = nets.forward_eval(policy.q_network, preprocess(frames, policy.mean_pixel))
    return greedy_action(q)


def _frame_gradient(policy, frames, clean_action):
    """d(cross-entropy vs clean action)/d(newest frame). Mean-centering is
    a shift, so the gradient in pixel space equals the gradient in
    preprocessed space."""
    x = preprocess(frames, policy.mean_pixel)
    g = nets.input_gradient(policy.q_network, x, LossKind.XENT, clean_action)
    return g[-1]


def _margin_gradient(policy, frames, clean_action):
    """Gradient of max(Q[a_clean] - max_{a != a_clean} Q[a], -kappa) with
    respect to the newest frame, plus the margin value."""
    x = preprocess(frames, policy.mean_pixel)
    q = nets.forward_eval(policy.q_network, x)
    others = np.delete(q, clean_action)
    runner_up = int(np.argmax(others))
    if runner_up >= clean_action:
        runner_up += 1
    margin = float(q[clean_action] - q[runner_up])
    if margin <= -CW_KAPPA:
        return margin, None  # loss already at its floor; gradient is zero
    dout = np.zeros_like(q)
    dout[clean_action] = 1.0
    dout[runner_up] = -1.0
    g = nets.input_gradient_from_output_grad(policy.q_network, x, dout)
    return margin, g[-1]


def _finish(policy, frames, original, adv_frame, clean_action, iters):
    adv_stack = frames.copy()
    adv_stack[-1] = adv_frame
    success = _greedy_on(policy, adv_stack) != clean_action
    delta = float(np.max(np.abs(adv_frame - original)))
    return AttackOutcome(
        adversarial_frame=adv_frame,
        delta_linf=delta,
        success=success,
        crafting_iterations_used=iters,
    )


def _iterated_sign_attack(policy, stack, epsilon, alpha, iterations):
    """Shared FGSM/BIM core: repeated signed steps on the cross-entropy
    loss, projected into the epsilon ball and [0, 1] after each step."""
    frames = _stack_array(stack)
    original = frames[-1].copy()
    clean_action = _greedy_on(policy, frames)
    work = frames.copy()
    used = 0
    for _ in range(iterations):
        g = _frame_gradient(policy, work, clean_action)
        used += 1
        adv = work[-1] + np.float32(alpha) * np.sign(g, dtype=np.float32)
        adv = np.clip(adv, original - np.float32(epsilon),
                      original + np.float32(epsilon))
        adv = np.clip(adv, 0.0, 1.0)
        work[-1] = adv
        if _greedy_on(policy, work) != clean_action:
            break
    return _finish(policy, frames, original, work[-1], clean_action, used)


def fgsm(policy, stack, epsilon):
    """Single signed-gradient step of size epsilon on the newest frame."""
    if not epsilon > 0:
        raise AttackError("epsilon must be positive")
    return _iterated_sign_attack(policy, stack, epsilon, epsilon, 1)


def bim(policy, stack, epsilon, alpha, iterations):
    """Iterated FGSM with per-step epsilon-ball projection and early exit
    once the greedy action flips. bim(eps, eps, 1) is bit-equal to fgsm."""
    if not alpha > 0:
        raise AttackError("alpha must be positive")
    if iterations < 1:
        raise AttackError("iterations must be >= 1")
    return _iterated_sign_attack(policy, stack, epsilon, alpha, iterations)


def cw_linf_lite(policy, stack, epsilon, alpha, iterations):
    """Projected signed-gradient descent on the margin loss
    max(Q[a_clean] - max_others Q, -kappa)."""
    if not alpha > 0:
        raise AttackError("alpha must be positive")
    if iterations < 1:
        raise AttackError("iterations must be >= 1")
    frames = _stack_array(stack)
    original = frames[-1].copy()
    clean_action = _greedy_on(policy, frames)
    work = frames.copy()
    used = 0
    for _ in range(iterations):
        margin, g = _margin_gradient(policy, work, clean_action)
        used += 1
        if g is None:
            break  # margin below -kappa: attack already optimal
        adv = work[-1] - np.float32(alpha) * np.sign(g, dtype=np.float32)
        adv = np.clip(adv, original - np.float32(epsilon),
                      original + np.float32(epsilon))
        adv = np.clip(adv, 0.0, 1.0)
        work[-1] = adv
        if _greedy_on(policy, work) != clean_action:
            break
    return _finish(policy, frames, original, work[-1], clean_action, used)


def craft(policy, stack, config):
    if config.kind == "fgsm":
        return fgsm(policy, stack, config.epsilon)
    if config.kind == "bim":
        return bim(policy, stack, config.epsilon, config.step_size,
                   config.iterations)
    return cw_linf_lite(policy, stack, config.epsilon, config.step_size,
                        config.iterations)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleMask:
    mask: tuple  # per-timestep booleans
    mode: str
    seed: int

    def __getitem__(self, t):
        return self.mask[t]

    def __len__(self):
        return len(self.mask)


def schedule_mask(length, mode, seed=0, ratio=0.5, period=100, width=50):
    """mode='bernoulli': each step attacked with probability `ratio`;
    mode='periodic': steps t with (t mod period) < width are attacked."""
    if length < 1:
        raise AttackError("mask length must be >= 1")
    if mode == "bernoulli":
        rng = np.random.Generator(np.random.PCG64(seed))
        bits = tuple(bool(b) for b in rng.random(length) < ratio)
    elif mode == "periodic":
        if width > period:
            raise AttackError("periodic width cannot exceed the period")
        bits = tuple((t % period) < width for t in range(length))
    else:
        raise AttackError(f"unknown schedule mode {mode!r}")
    return ScheduleMask(mask=bits, mode=mode, seed=seed)
