import io

import numpy as np
import pytest

from vfdefense.attacks import AttackConfig, schedule_mask
from vfdefense.detect import DetectorConfig
from vfdefense.guard import (
    DEFENSES,
    GuardError,
    run_episode,
    read_log,
    write_log,
)
from vfdefense.policy import PolicyModel, build_q_network
from vfdefense.predictor import build_predictor


def make_policy(seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    net = build_q_network(3, (32, 16), rng)
    return PolicyModel(q_network=net, action_count=3, mean_pixel=0.015,
                       env="ponglite")


POLICY = make_policy()
PREDICTOR = build_predictor("ponglite", 0.015, seed=0)
ATTACK = AttackConfig(kind="fgsm", epsilon=0.01)


def zero_mask(n=512):
    return schedule_mask(n, "bernoulli", seed=0, ratio=0.0)


def full_mask(n=512):
    return schedule_mask(n, "bernoulli", seed=0, ratio=1.0)


def test_unknown_defense_raises():
    with pytest.raises(GuardError):
        run_episode("ponglite", POLICY, None, ATTACK, zero_mask(), "panic", 0)


def test_defense_detector_pairings_enforced():
    squeeze = DetectorConfig(kind="squeeze", threshold=0.1)
    foresight = DetectorConfig(kind="foresight", threshold=0.1)
    with pytest.raises(GuardError):
        run_episode("ponglite", POLICY, squeeze, ATTACK, zero_mask(),
                    "foresight_suggest", 0, predictor=PREDICTOR)
    with pytest.raises(GuardError):
        run_episode("ponglite", POLICY, foresight, ATTACK, zero_mask(),
                    "squeeze_suggest", 0, predictor=PREDICTOR)
    with pytest.raises(GuardError):
        run_episode("ponglite", POLICY, None, ATTACK, zero_mask(),
                    "detect_only", 0)


def test_detection_suppressed_for_first_four_steps():
    det = DetectorConfig(kind="squeeze", threshold=0.0)
    log = run_episode("ponglite", POLICY, det, ATTACK, full_mask(),
                      "detect_only", seed=1)
    for step in log.steps[:4]:
        assert step.score == 0.0 and not step.flagged


def test_detect_only_never_changes_actions():
    det = DetectorConfig(kind="squeeze", threshold=0.0)
    a = run_episode("ponglite", POLICY, det, ATTACK, full_mask(),
                    "detect_only", seed=2)
    b = run_episode("ponglite", POLICY, None, ATTACK, full_mask(),
                    "none", seed=2)
    assert [s.action_taken for s in a.steps] == [s.action_taken for s in b.steps]
    assert a.total_return == b.total_return


def test_clean_run_matches_none_defense_with_high_threshold():
    # with no attacks and a threshold nothing can cross, any defense
    # behaves exactly like 'none'
    det = DetectorConfig(kind="foresight", threshold=1e9)
    base = run_episode("ponglite", POLICY, None, ATTACK, zero_mask(),
                       "none", seed=3, predictor=PREDICTOR)
    guarded = run_episode("ponglite", POLICY, det, ATTACK, zero_mask(),
                          "foresight_suggest", seed=3, predictor=PREDICTOR)
    assert [s.action_taken for s in base.steps] == \
        [s.action_taken for s in guarded.steps]
    assert base.total_return == guarded.total_return


def test_attacked_flags_follow_mask():
    log = run_episode("ponglite", POLICY, None, ATTACK,
                      schedule_mask(512, "periodic", period=10, width=5),
                      "none", seed=4)
    for step in log.steps:
        assert step.attacked == ((step.t % 10) < 5)


def test_attack_success_only_on_attacked_steps():
    log = run_episode("ponglite", POLICY, None, ATTACK, zero_mask(), "none",
                      seed=5)
    assert not any(s.attack_success for s in log.steps)


def test_run_episode_deterministic():
    det = DetectorConfig(kind="dropout", threshold=0.5)
    logs = [
        run_episode("ponglite", POLICY, det, ATTACK, full_mask(),
                    "detect_only", seed=6)
        for _ in range(2)
    ]
    bufs = []
    for log in logs:
        buf = io.StringIO()
        write_log(log, buf)
        bufs.append(buf.getvalue())
    assert bufs[0] == bufs[1]


def test_total_return_sums_step_rewards():
    log = run_episode("ponglite", POLICY, None, ATTACK, zero_mask(), "none",
                      seed=7)
    assert log.total_return == pytest.approx(sum(s.reward for s in log.steps))


def test_random_on_flag_uses_episode_stream():
    det = DetectorConfig(kind="squeeze", threshold=0.0)
    a = run_episode("ponglite", POLICY, det, ATTACK, full_mask(),
                    "random_on_flag", seed=8)
    b = run_episode("ponglite", POLICY, det, ATTACK, full_mask(),
                    "random_on_flag", seed=8)
    assert [s.action_taken for s in a.steps] == [s.action_taken for s in b.steps]


def test_log_round_trip():
    det = DetectorConfig(kind="squeeze", threshold=0.1)
    log = run_episode("ponglite", POLICY, det, ATTACK, full_mask(),
                      "detect_only", seed=9)
    buf = io.StringIO()
    write_log(log, buf)
    buf.seek(0)
    loaded = read_log(buf)
    assert loaded.seed == log.seed
    assert loaded.total_return == log.total_return
    assert loaded.config == log.config
    assert loaded.steps == log.steps


def test_gridchase_episode_runs():
    rng = np.random.Generator(np.random.PCG64(0))
    net = build_q_network(5, (32, 16), rng)
    policy = PolicyModel(q_network=net, action_count=5, mean_pixel=0.008,
                         env="gridchase")
    log = run_episode("gridchase", policy, None, ATTACK, zero_mask(), "none",
                      seed=10, max_steps=50)
    assert len(log.steps) == 50
