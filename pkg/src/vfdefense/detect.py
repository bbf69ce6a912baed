"""Per-timestep adversarial-presence scoring.

The foresight detector compares the policy's action distribution on the
observed frame with its distribution on the frame predicted from history
and past actions; three single-frame baselines (feature squeezing,
autoencoder reconstruction, dropout uncertainty) score the same steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import GRID
from .policy import q_values_dropout
from .predictor import predict_frame, reconstruct
from . import nets

DETECTOR_KINDS = ("foresight", "squeeze", "autoencoder", "dropout")
METRICS = ("l1", "chi2", "histint")


class DetectError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "foresight"
    threshold: float = 0.1
    metric: str = "l1"
    dropout_passes: int = 30
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise DetectError(f"unknown detector kind {self.kind!r}")
        if self.metric not in METRICS:
            raise DetectError(f"unknown metric {self.metric!r}")
        if self.threshold < 0:
            raise DetectError("threshold must be non-negative")
        if self.dropout_passes < 2:
            raise DetectError("dropout detector needs at least 2 passes")


@dataclass(frozen=True)
class Verdict:
    score: float
    flagged: bool
    suggested_dist: np.ndarray
    kind: str


def action_dist_distance(p, q, metric="l1"):
    """Distance between two action distributions; all three variants are
    symmetric, non-negative, and zero only at p == q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DetectError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if metric == "l1":
        return float(np.abs(p - q).sum())
    if metric == "chi2":
        num = (p - q) ** 2
        den = p + q
        terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return float(terms.sum())
    if metric == "histint":
        return float(1.0 - np.minimum(p, q).sum())
    raise DetectError(f"unknown metric {metric!r}")


def median_filter(frame, window=2):
    """2x2 median filter with edge-replication padding; the even-window
    median is the mean of the two middle order statistics."""
    frame = np.asarray(frame, dtype=np.float32)
    if window != 2:
        raise DetectError("only the 2x2 window is supported")
    idx = np.minimum(np.arange(GRID) + 1, GRID - 1)
    a = frame
    b = frame[:, idx]  # right neighbor (replicated at the edge)
    c = frame[idx, :]  # bottom neighbor
    d = frame[idx][:, idx]  # bottom-right
    stackv = np.stack([a, b, c, d], axis=0)
    stackv.sort(axis=0)
    return ((stackv[1] + stackv[2]) / 2.0).astype(np.float32)


def _policy_dist(policy, frames):
    q = nets.forward_eval(
        policy.q_network,
        np.asarray(frames, dtype=np.float32) - np.float32(policy.mean_pixel),
    )
    return nets.softmax_temp(q, policy.temperature)


def detector_score(config, policy, model, history_frames, history_actions,
                   observed, rng=None):
    """Score one timestep.

    history_frames/history_actions: the m=4 frames as observed (possibly
    perturbed) and the actions executed after each; observed: the current
    frame x_t. `model` is the trained predictor (foresight), the trained
    autoencoder (autoencoder), or unused (squeeze/dropout). The dropout
    detector draws its stochastic masks from `rng`.
    """
    frames = [np.asarray(f, dtype=np.float32) for f in history_frames]
    if len(frames) != 4:
        raise DetectError("detector needs exactly 4 history frames")
    observed = np.asarray(observed, dtype=np.float32)
    obs_stack = np.stack(frames[1:] + [observed])
    p_obs = _policy_dist(policy, obs_stack)

    if config.kind == "foresight":
        if model is None:
            raise DetectError("foresight detector needs a predictor")
        predicted = predict_frame(model, frames, history_actions)
        alt_stack = np.stack(frames[1:] + [predicted])
        p_alt = _policy_dist(policy, alt_stack)
    elif config.kind == "squeeze":
        filtered = median_filter(observed)
        alt_stack = np.stack(frames[1:] + [filtered])
        p_alt = _policy_dist(policy, alt_stack)
    elif config.kind == "autoencoder":
        if model is None:
            raise DetectError("autoencoder detector needs a trained baseline")
        rebuilt = reconstruct(model, observed)
        alt_stack = np.stack(frames[1:] + [rebuilt])
        p_alt = _policy_dist(policy, alt_stack)
    else:  # dropout
        if rng is None:
            raise DetectError("dropout detector needs an RNG stream")
        qs = q_values_dropout(
            policy, obs_stack, config.dropout_rate, config.dropout_passes, rng
        )
        dists = np.stack([nets.softmax_temp(q, policy.temperature) for q in qs])
        n = len(dists)
        total = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                total += np.abs(dists[i] - dists[j]).sum()
        score = total / (n * (n - 1) / 2)
        mean_dist = dists.mean(axis=0)
        mean_dist /= mean_dist.sum()
        return Verdict(
            score=float(score),
            flagged=bool(score > config.threshold),
            suggested_dist=mean_dist,
            kind=config.kind,
        )

    score = action_dist_distance(p_obs, p_alt, config.metric)
    return Verdict(
        score=float(score),
        flagged=bool(score > config.threshold),
        suggested_dist=p_alt,
        kind=config.kind,
    )
