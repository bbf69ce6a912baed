"""Evaluation artifacts from episode logs: precision-recall curves with
successful-only labeling, mAP, reward-vs-attack-ratio tables, periodic
attack timelines, and the predictor-quality study.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks as attacks_mod
from .detect import DetectorConfig
from .guard import run_episode
from .policy import STACK_SIZE
from .predictor import validation_mse


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# labeling and PR curves


def label_positives(log):
    """(scores, labels) over the scored steps of a log.

    A step is a positive only when it was attacked AND the attack changed
    the greedy action; unsuccessful attacks and clean steps are negatives.
    The first 4 steps (detection suppressed, no full history) are excluded.
    """
    scores = []
    labels = []
    for step in log.steps:
        if step.t < STACK_SIZE:
            continue
        scores.append(step.score)
        labels.append(bool(step.attacked and step.attack_success))
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)


@dataclass
class PRCurve:
    points: list  # (threshold, precision, recall), sorted by threshold
    average_precision: float | None


def pr_curve_ap(scores, labels):
    """PR curve over distinct-score thresholds (flag iff score > threshold)
    and rank-based average precision.

    AP sums precision-at-rank over positives in descending-score order
    (ties broken by step order, i.e. stable sort) divided by the positive
    count. Zero positives make AP undefined (None).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise EvalError("scores and labels must align")
    n_pos = int(labels.sum())
    points = []
    for threshold in sorted(set(scores.tolist())):
        flagged = scores > threshold
        tp = int(np.sum(flagged & labels))
        fp = int(np.sum(flagged & ~labels))
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / n_pos if n_pos else 0.0
        points.append((threshold, precision, recall))
    if n_pos == 0:
        return PRCurve(points=points, average_precision=None)
    order = np.argsort(-scores, kind="stable")
    hits = 0
    ap = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            ap += hits / rank
    return PRCurve(points=points, average_precision=ap / n_pos)


def mean_average_precision(logs):
    """Mean AP across per-trial logs; trials with no positives are skipped."""
    aps = []
    for log in logs:
        scores, labels = label_positives(log)
        curve = pr_curve_ap(scores, labels)
        if curve.average_precision is not None:
            aps.append(curve.average_precision)
    if not aps:
        return None
    return float(np.mean(aps))


def interpolate_pr_band(curves, grid_points=101):
    """Mean +- one standard deviation of precision across trials on a
    common recall grid."""
    grid = np.linspace(0.0, 1.0, grid_points)
    rows = []
    for curve in curves:
        if not curve.points:
            continue
        recalls = np.array([p[2] for p in curve.points])
        precisions = np.array([p[1] for p in curve.points])
        order = np.argsort(recalls)
        rows.append(np.interp(grid, recalls[order], precisions[order]))
    if not rows:
        raise EvalError("no curves to interpolate")
    rows = np.stack(rows)
    return grid, rows.mean(axis=0), rows.std(axis=0)


def calibrate_threshold(scores, labels, floor=None):
    """F1-maximizing flag threshold (flag iff score > H) over candidate
    cut points. `floor` optionally forces H above every clean-step score
    seen during calibration so an idle detector stays passive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    best_h, best_f1 = 0.0, -1.0
    candidates = sorted(set(scores.tolist()))
    cuts = [0.0] + [
        (candidates[i] + candidates[i + 1]) / 2.0
        for i in range(len(candidates) - 1)
    ]
    for h in cuts:
        flagged = scores > h
        tp = int(np.sum(flagged & labels))
        fp = int(np.sum(flagged & ~labels))
        fn = int(np.sum(~flagged & labels))
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        if f1 > best_f1:
            best_f1, best_h = f1, h
    if floor is not None and best_h <= floor:
        best_h = float(floor) * (1.0 + 1e-6) + 1e-12
    return float(best_h)


# ---------------------------------------------------------------------------
# reward sweep


RATIO_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
SWEEP_DEFENSES = ("none", "foresight_suggest", "random_on_flag",
                  "squeeze_suggest")


@dataclass
class RewardTable:
    rows: list  # dicts: ratio, defense, trial, seed, return
    clean_reference: list  # per-trial clean returns (same seeds as ratio 0)

    def cell(self, ratio, defense):
        vals = [r["return"] for r in self.rows
                if r["ratio"] == ratio and r["defense"] == defense]
        return float(np.mean(vals)), float(np.std(vals))


def _detector_for(defense, foresight_config, squeeze_config):
    if defense == "squeeze_suggest":
        return squeeze_config
    if defense == "none":
        return None
    return foresight_config


def reward_sweep(env, policy, predictor, attack_config, detector_config,
                 squeeze_config=None, ratios=RATIO_GRID,
                 defenses=SWEEP_DEFENSES, trials=5, seed=0):
    """Mean return per (attack ratio, defense) cell over seeded trials,
    plus the no-attack reference with the same seeds."""
    if squeeze_config is None:
        squeeze_config = DetectorConfig(kind="squeeze",
                                        threshold=detector_config.threshold)
    trial_seeds = [seed + 1000 * i for i in range(trials)]
    rows = []
    clean_reference = []
    for i, s in enumerate(trial_seeds):
        mask = attacks_mod.schedule_mask(1, "bernoulli", seed=s, ratio=0.0)
        log = run_episode(env, policy, None, attack_config, mask, "none", s,
                          predictor=predictor)
        clean_reference.append(log.total_return)
    for ratio in ratios:
        for defense in defenses:
            det = _detector_for(defense, detector_config, squeeze_config)
            for i, s in enumerate(trial_seeds):
                mask = attacks_mod.schedule_mask(
                    2048, "bernoulli", seed=seed + 37 * i, ratio=ratio
                )
                log = run_episode(env, policy, det, attack_config, mask,
                                  defense, s, predictor=predictor)
                rows.append({
                    "ratio": ratio,
                    "defense": defense,
                    "trial": i,
                    "seed": s,
                    "return": log.total_return,
                })
    return RewardTable(rows=rows, clean_reference=clean_reference)


# ---------------------------------------------------------------------------
# quality study


@dataclass
class StudyRecord:
    snapshot: int
    mse: float
    map: float


def quality_study(snapshots, dataset, policy, attack_config, detector_config,
                  trials=5, seed=0):
    """For each predictor snapshot: held-out prediction MSE and the
    foresight detector's mAP over seeded ratio-0.5 episodes."""
    if len(snapshots) < 3:
        raise EvalError("quality study needs at least 3 snapshots")
    records = []
    for mark, model in snapshots:
        mse = validation_mse(model, dataset.val)
        logs = []
        for i in range(trials):
            mask = attacks_mod.schedule_mask(
                2048, "bernoulli", seed=seed + 37 * i, ratio=0.5
            )
            logs.append(
                run_episode(dataset.env, policy, detector_config,
                            attack_config, mask, "detect_only",
                            seed + 1000 * i, predictor=model)
            )
        m = mean_average_precision(logs)
        records.append(StudyRecord(snapshot=mark, mse=float(mse),
                                   map=float(m) if m is not None else 0.0))
    return records


def spearman_rank_correlation(xs, ys):
    """Spearman rho via Pearson correlation of average ranks."""
    from scipy import stats

    rho, _ = stats.spearmanr(xs, ys)
    return float(rho)


# ---------------------------------------------------------------------------
# timeline


def timeline_export(log):
    """(t, score, attacked) series for a periodic-mask log."""
    if log.config.get("mask_mode") != "periodic":
        raise EvalError("timeline export expects a periodic-mask log")
    return [(s.t, s.score, s.attacked) for s in log.steps]


# ---------------------------------------------------------------------------
# CSV: 9 significant digits, lossless round-trip


def fmt(value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9g}"


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path):
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows
