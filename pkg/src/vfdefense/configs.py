"""Reference configurations and the key=value run-config file format.

Every CLI run writes an echo of its resolved configuration next to its
outputs so results can be reproduced from the artifact directory alone.
"""

from __future__ import annotations

import os

from .attacks import AttackConfig
from .detect import DetectorConfig
from .policy import DQNConfig
from .predictor import CurriculumPhase

KNOWN_KEYS = {
    "env", "seed", "out", "policy", "predictor", "autoencoder", "dataset",
    "attack", "eps", "alpha", "iters", "attack_ratio", "attack_mode",
    "period", "width", "detector", "metric", "threshold", "defense",
    "trials", "frames", "epsilon_greedy", "steps", "phase_iters",
    "ae_iters", "snapshot_marks", "jobs", "run_name",
}


class ConfigError(ValueError):
    pass


def reference_dqn_config(env="ponglite", seed=0, steps=None):
    cfg = DQNConfig(env=env, seed=seed)
    if steps is not None:
        cfg.training_steps = steps
    return cfg


def reference_phases(iters=None):
    """Curriculum phases: horizons 1/3/5, learning rates 3e-4/1e-5/1e-5,
    batch sizes 32/8/8."""
    iters = iters or (20_000, 5_000, 5_000)
    lrs = (3e-4, 1e-5, 1e-5)
    batches = (32, 8, 8)
    return tuple(
        CurriculumPhase(h, lr, b, n)
        for h, lr, b, n in zip((1, 3, 5), lrs, batches, iters)
    )


def reference_attack_config(kind="fgsm", epsilon=0.01, alpha=None, iters=10):
    return AttackConfig(kind=kind, epsilon=epsilon, alpha=alpha,
                        iterations=iters)


# Flag thresholds calibrated on the reference PongLite policy/predictor:
# chosen so clean seed-0 episodes keep their unattacked returns while
# attacked episodes at ratio >= 0.4 still trip the detector often enough
# for the defenses to help.
FORESIGHT_THRESHOLD = 0.12
SQUEEZE_THRESHOLD = 1.18


def reference_squeeze_threshold():
    """Calibrated flag threshold for the bit-depth-squeeze detector."""
    return SQUEEZE_THRESHOLD


def reference_detector_config(kind="foresight", threshold=None, metric="l1"):
    if threshold is None:
        threshold = (SQUEEZE_THRESHOLD if kind == "squeeze"
                     else FORESIGHT_THRESHOLD)
    return DetectorConfig(kind=kind, threshold=threshold, metric=metric)


def parse_run_config(path):
    """key=value per line; '#' comments; unknown keys rejected."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def write_config_echo(out_dir, values):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.txt"), "w") as fh:
        for key in sorted(values):
            fh.write(f"{key}={values[key]}\n")


def default_out_root():
    return os.environ.get("FG_OUT_DIR", "out")
