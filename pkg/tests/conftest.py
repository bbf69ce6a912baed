import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# One pass/fail line per acceptance criterion, filled in by
# tests/test_acceptance.py and printed after the run.
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, description, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} [{status}] {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


def _cache_dir():
    """Optional artifact cache so repeated local runs skip retraining.
    Unset (the default) means every session trains from scratch."""
    return os.environ.get("VFD_TEST_CACHE")


@pytest.fixture(scope="session")
def trained_policy_bundle(tmp_path_factory):
    """Reference-config PongLite policy plus its training curve."""
    from vfdefense import configs, policy as policy_mod

    cache = _cache_dir()
    path = os.path.join(cache, "policy.fgn") if cache else None
    curve_path = os.path.join(cache, "policy_best.txt") if cache else None
    if path and os.path.exists(path) and os.path.exists(curve_path):
        model = policy_mod.load_policy(path)
        best = float(open(curve_path).read())
        return model, best
    cfg = configs.reference_dqn_config(env="ponglite", seed=0)
    model, curve = policy_mod.train_dqn(cfg)
    best = float(curve["best_eval_return"])
    if path:
        os.makedirs(cache, exist_ok=True)
        policy_mod.save_policy(model, path)
        with open(curve_path, "w") as fh:
            fh.write(repr(best))
    return model, best


@pytest.fixture(scope="session")
def trained_policy(trained_policy_bundle):
    return trained_policy_bundle[0]


@pytest.fixture(scope="session")
def prediction_dataset(trained_policy, tmp_path_factory):
    from vfdefense import predictor as predictor_mod

    cache = _cache_dir()
    path = os.path.join(cache, "dataset") if cache else None
    if path and os.path.exists(os.path.join(path, "index.txt")):
        return predictor_mod.load_dataset(path)
    dataset = predictor_mod.collect_dataset(
        trained_policy, "ponglite", 100_000, seed=0
    )
    if path:
        predictor_mod.save_dataset(dataset, path)
    return dataset


@pytest.fixture(scope="session")
def predictor_bundle(prediction_dataset):
    """Fully trained frame predictor plus its curriculum snapshots."""
    from vfdefense import predictor as predictor_mod

    cache = _cache_dir()
    marks = predictor_mod.DEFAULT_SNAPSHOT_MARKS
    if cache:
        main_path = os.path.join(cache, "predictor.fgn")
        snap_paths = [
            os.path.join(cache, f"predictor_snap_{m}.fgn") for m in marks
        ]
        if os.path.exists(main_path) and all(map(os.path.exists, snap_paths)):
            model = predictor_mod.load_predictor(main_path)
            snapshots = [
                (m, predictor_mod.load_predictor(p))
                for m, p in zip(marks, snap_paths)
            ]
            return model, snapshots
    model, snapshots, _ = predictor_mod.train_predictor(
        prediction_dataset, seed=0
    )
    if cache:
        os.makedirs(cache, exist_ok=True)
        predictor_mod.save_predictor(model, os.path.join(cache, "predictor.fgn"))
        for mark, snap in snapshots:
            predictor_mod.save_predictor(
                snap, os.path.join(cache, f"predictor_snap_{mark}.fgn")
            )
    return model, snapshots


@pytest.fixture(scope="session")
def trained_predictor(predictor_bundle):
    return predictor_bundle[0]


@pytest.fixture(scope="session")
def trained_autoencoder(prediction_dataset):
    from vfdefense import predictor as predictor_mod

    cache = _cache_dir()
    path = os.path.join(cache, "autoencoder.fgn") if cache else None
    if path and os.path.exists(path):
        return predictor_mod.load_predictor(path)
    model, _ = predictor_mod.train_autoencoder(prediction_dataset, seed=0)
    if path:
        predictor_mod.save_predictor(model, path)
    return model
