"""Single entry point exposing the pipeline as subcommands.

All randomness derives from --seed; artifacts land under
<out-root>/<run-name>/ together with an echo of the resolved config.
Exit codes: 0 success, 2 bad flags/usage, 3 missing model or data files.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import attacks as attacks_mod
from . import configs, evaluation, plots, policy as policy_mod
from . import predictor as predictor_mod
from .detect import DetectorConfig
from .guard import run_episode, write_log

DETECTOR_ALIASES = {"foresight": "foresight", "squeeze": "squeeze",
                    "ae": "autoencoder", "dropout": "dropout"}


class MissingArtifact(RuntimeError):
    pass


def _out_dir(args):
    root = args.out or configs.default_out_root()
    path = os.path.join(root, args.run_name) if args.run_name else root
    os.makedirs(path, exist_ok=True)
    return path


def _echo(args, out_dir, extra=None):
    values = {"seed": str(args.seed)}
    for key in ("env", "policy", "predictor", "autoencoder", "dataset",
                "attack", "eps", "alpha", "iters", "attack_ratio",
                "attack_mode", "period", "width", "detector", "metric",
                "threshold", "defense", "trials", "frames", "steps", "jobs"):
        if hasattr(args, key) and getattr(args, key) is not None:
            values[key] = str(getattr(args, key))
    if extra:
        values.update(extra)
    configs.write_config_echo(out_dir, values)


def _load_policy(path):
    if not path or not os.path.exists(path):
        raise MissingArtifact(f"policy checkpoint not found: {path}")
    return policy_mod.load_policy(path)


def _load_predictor(path):
    if not path or not os.path.exists(path):
        raise MissingArtifact(f"predictor checkpoint not found: {path}")
    return predictor_mod.load_predictor(path)


def _load_dataset(path):
    if not path or not os.path.exists(os.path.join(path, "index.txt")):
        raise MissingArtifact(f"dataset not found: {path}")
    return predictor_mod.load_dataset(path)


def _attack_config(args):
    return configs.reference_attack_config(
        kind=args.attack, epsilon=args.eps, alpha=args.alpha,
        iters=args.iters,
    )


def _detector_config(args, kind=None):
    return DetectorConfig(
        kind=kind or DETECTOR_ALIASES[args.detector],
        threshold=args.threshold,
        metric=args.metric,
    )


def _map_parallel(jobs, fn, items):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_policy(args):
    out = _out_dir(args)
    cfg = configs.reference_dqn_config(env=args.env, seed=args.seed,
                                       steps=args.steps)
    model, curve = policy_mod.train_dqn(cfg)
    path = os.path.join(out, "policy.fgn")
    policy_mod.save_policy(model, path)
    evaluation.write_csv(
        os.path.join(out, "training_curve.csv"),
        ["step", "eval_return"],
        curve["eval_curve"],
    )
    _echo(args, out, {"best_eval_return": repr(curve["best_eval_return"])})
    print(f"saved policy to {path}")
    return 0


def cmd_collect(args):
    out = _out_dir(args)
    model = _load_policy(args.policy)
    dataset = predictor_mod.collect_dataset(
        model, args.env, args.frames, epsilon=args.epsilon_greedy,
        seed=args.seed,
    )
    predictor_mod.save_dataset(dataset, out)
    _echo(args, out)
    print(f"saved {args.frames} frames to {out}")
    return 0


def cmd_train_foresight(args):
    out = _out_dir(args)
    dataset = _load_dataset(args.dataset)
    phases = configs.reference_phases(
        tuple(int(n) for n in args.phase_iters.split(","))
        if args.phase_iters else None
    )
    marks = (
        tuple(int(n) for n in args.snapshot_marks.split(","))
        if args.snapshot_marks else predictor_mod.DEFAULT_SNAPSHOT_MARKS
    )
    model, snapshots, _ = predictor_mod.train_predictor(
        dataset, phases=phases, seed=args.seed, snapshot_marks=marks
    )
    path = os.path.join(out, "predictor.fgn")
    predictor_mod.save_predictor(model, path)
    for mark, snap in snapshots:
        predictor_mod.save_predictor(
            snap, os.path.join(out, f"predictor_snap_{mark}.fgn")
        )
    _echo(args, out)
    print(f"saved predictor to {path} ({len(snapshots)} snapshots)")
    return 0


def cmd_train_ae(args):
    out = _out_dir(args)
    dataset = _load_dataset(args.dataset)
    cfg = predictor_mod.AutoencoderConfig(iterations=args.ae_iters)
    model, curve = predictor_mod.train_autoencoder(dataset, cfg,
                                                   seed=args.seed)
    path = os.path.join(out, "autoencoder.fgn")
    predictor_mod.save_predictor(model, path)
    evaluation.write_csv(os.path.join(out, "ae_curve.csv"),
                         ["iteration", "train_mse"], curve)
    _echo(args, out)
    print(f"saved autoencoder to {path}")
    return 0


def _detector_model(args, kind):
    if kind == "foresight":
        return _load_predictor(args.predictor)
    if kind == "autoencoder":
        return _load_predictor(args.autoencoder)
    return None


def cmd_eval_detect(args):
    out = _out_dir(args)
    pol = _load_policy(args.policy)
    kind = DETECTOR_ALIASES[args.detector]
    model = _detector_model(args, kind)
    det = _detector_config(args, kind)
    atk = _attack_config(args)

    def one_trial(i):
        mask = attacks_mod.schedule_mask(
            2048, "bernoulli", seed=args.seed + 37 * i,
            ratio=args.attack_ratio,
        )
        return run_episode(args.env, pol, det, atk, mask, "detect_only",
                           args.seed + 1000 * i, predictor=model)

    logs = _map_parallel(args.jobs, one_trial, range(args.trials))
    rows = []
    for i, log in enumerate(logs):
        scores, labels = evaluation.label_positives(log)
        curve = evaluation.pr_curve_ap(scores, labels)
        for threshold, precision, recall in curve.points:
            rows.append([i, threshold, precision, recall])
    evaluation.write_csv(os.path.join(out, "pr.csv"),
                         ["trial", "threshold", "precision", "recall"], rows)
    m = evaluation.mean_average_precision(logs)
    with open(os.path.join(out, "map.txt"), "w") as fh:
        fh.write("nan" if m is None else f"{m:.9g}")
        fh.write("\n")
    with open(os.path.join(out, "episodes.jsonl"), "w") as fh:
        for log in logs:
            write_log(log, fh)
    _echo(args, out)
    print(f"mAP={'nan' if m is None else f'{m:.4f}'} -> {out}/pr.csv")
    return 0


def cmd_eval_reward(args):
    out = _out_dir(args)
    pol = _load_policy(args.policy)
    predictor = _load_predictor(args.predictor)
    atk = _attack_config(args)
    det = _detector_config(args, "foresight")
    squeeze = DetectorConfig(kind="squeeze",
                             threshold=configs.reference_squeeze_threshold())
    table = evaluation.reward_sweep(
        args.env, pol, predictor, atk, det, squeeze_config=squeeze,
        trials=args.trials, seed=args.seed,
    )
    rows = [[r["ratio"], r["defense"], r["trial"], r["return"]]
            for r in table.rows]
    evaluation.write_csv(os.path.join(out, "reward.csv"),
                         ["ratio", "defense", "trial", "return"], rows)
    evaluation.write_csv(
        os.path.join(out, "clean_reference.csv"),
        ["trial", "return"],
        list(enumerate(table.clean_reference)),
    )
    _echo(args, out)
    print(f"wrote {out}/reward.csv")
    return 0


def cmd_eval_quality(args):
    out = _out_dir(args)
    pol = _load_policy(args.policy)
    dataset = _load_dataset(args.dataset)
    snap_dir = args.predictor
    if not snap_dir or not os.path.isdir(snap_dir):
        raise MissingArtifact(f"snapshot directory not found: {snap_dir}")
    snapshots = []
    for name in sorted(os.listdir(snap_dir)):
        if name.startswith("predictor_snap_") and name.endswith(".fgn"):
            mark = int(name[len("predictor_snap_"):-4])
            snapshots.append((mark, predictor_mod.load_predictor(
                os.path.join(snap_dir, name))))
    snapshots.sort(key=lambda pair: pair[0])
    if len(snapshots) < 3:
        raise MissingArtifact(f"need >= 3 snapshots in {snap_dir}")
    atk = _attack_config(args)
    det = _detector_config(args, "foresight")
    records = evaluation.quality_study(
        snapshots, dataset, pol, atk, det, trials=args.trials,
        seed=args.seed,
    )
    evaluation.write_csv(
        os.path.join(out, "quality.csv"),
        ["snapshot", "mse", "map"],
        [[r.snapshot, r.mse, r.map] for r in records],
    )
    _echo(args, out)
    print(f"wrote {out}/quality.csv")
    return 0


def cmd_timeline(args):
    out = _out_dir(args)
    pol = _load_policy(args.policy)
    predictor = _load_predictor(args.predictor)
    atk = _attack_config(args)
    det = _detector_config(args, "foresight")
    mask = attacks_mod.schedule_mask(2048, "periodic", seed=args.seed,
                                     period=args.period, width=args.width)
    log = run_episode(args.env, pol, det, atk, mask, "detect_only",
                      args.seed, predictor=predictor)
    series = evaluation.timeline_export(log)
    evaluation.write_csv(os.path.join(out, "timeline.csv"),
                         ["t", "score", "attacked"], series)
    shaded = _attack_windows(series)
    svg = plots.polyline_chart(
        [("detector score", [s[0] for s in series], [s[1] for s in series])],
        title="Detector score under periodic attack",
        x_label="step", y_label="score", shaded=shaded,
    )
    with open(os.path.join(out, "timeline.svg"), "w") as fh:
        fh.write(svg)
    _echo(args, out)
    print(f"wrote {out}/timeline.csv")
    return 0


def _attack_windows(series):
    windows = []
    start = None
    for t, _, attacked in series:
        if attacked and start is None:
            start = t
        elif not attacked and start is not None:
            windows.append((start, t - 1))
            start = None
    if start is not None:
        windows.append((start, series[-1][0]))
    return windows


def cmd_plot(args):
    if not os.path.exists(args.csv):
        raise MissingArtifact(f"csv not found: {args.csv}")
    header, rows = evaluation.read_csv(args.csv)
    if header == ["trial", "threshold", "precision", "recall"]:
        series = []
        for trial in sorted({r[0] for r in rows}, key=int):
            pts = [(float(r[3]), float(r[2])) for r in rows if r[0] == trial]
            pts.sort()
            series.append((f"trial {trial}", [p[0] for p in pts],
                           [p[1] for p in pts]))
        svg = plots.polyline_chart(series, title="Precision-recall",
                                   x_label="recall", y_label="precision",
                                   x_range=(0, 1), y_range=(0, 1))
    elif header == ["ratio", "defense", "trial", "return"]:
        series = []
        defenses = sorted({r[1] for r in rows})
        for defense in defenses:
            ratios = sorted({float(r[0]) for r in rows if r[1] == defense})
            means = []
            for ratio in ratios:
                vals = [float(r[3]) for r in rows
                        if r[1] == defense and float(r[0]) == ratio]
                means.append(float(np.mean(vals)))
            series.append((defense, ratios, means))
        svg = plots.polyline_chart(series, title="Return vs attack ratio",
                                   x_label="attack ratio", y_label="return")
    elif header == ["t", "score", "attacked"]:
        pts = [(int(r[0]), float(r[1]), r[2] == "1") for r in rows]
        shaded = _attack_windows(pts)
        svg = plots.polyline_chart(
            [("score", [p[0] for p in pts], [p[1] for p in pts])],
            title="Detector score timeline", x_label="step",
            y_label="score", shaded=shaded,
        )
    elif header == ["snapshot", "mse", "map"]:
        pts = sorted((float(r[1]), float(r[2])) for r in rows)
        svg = plots.polyline_chart(
            [("detector mAP", [p[0] for p in pts], [p[1] for p in pts])],
            title="Detector quality vs prediction error",
            x_label="prediction MSE", y_label="mAP",
        )
    else:
        print(f"error: unrecognized csv schema {header}", file=sys.stderr)
        return 2
    out_path = args.svg or (os.path.splitext(args.csv)[0] + ".svg")
    with open(out_path, "w") as fh:
        fh.write(svg)
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub, attack=False, detector=False):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--env", default="ponglite",
                     choices=["ponglite", "gridchase"])
    sub.add_argument("--out", default=None,
                     help="output root (default $FG_OUT_DIR or ./out)")
    sub.add_argument("--run-name", dest="run_name", default=None)
    sub.add_argument("--config", default=None,
                     help="key=value run-config file; flags override")
    sub.add_argument("--jobs", type=int, default=1)
    if attack:
        sub.add_argument("--attack", default="fgsm",
                         choices=["fgsm", "bim", "cwlite"])
        sub.add_argument("--eps", type=float, default=0.01)
        sub.add_argument("--alpha", type=float, default=None)
        sub.add_argument("--iters", type=int, default=10)
        sub.add_argument("--attack-ratio", dest="attack_ratio", type=float,
                         default=0.5)
        sub.add_argument("--attack-mode", dest="attack_mode",
                         default="bernoulli",
                         choices=["bernoulli", "periodic"])
        sub.add_argument("--period", type=int, default=100)
        sub.add_argument("--width", type=int, default=50)
    if detector:
        sub.add_argument("--detector", default="foresight",
                         choices=["foresight", "squeeze", "ae", "dropout"])
        sub.add_argument("--metric", default="l1",
                         choices=["l1", "chi2", "histint"])
        sub.add_argument("--threshold", type=float,
                         default=configs.FORESIGHT_THRESHOLD)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vfdefense",
        description="Visual-foresight defense testbed: train, attack, "
                    "detect, evaluate.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train-policy", help="train a DQN policy")
    _add_common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train_policy)

    p = subs.add_parser("collect", help="collect a prediction dataset")
    _add_common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--frames", type=int, default=100_000)
    p.add_argument("--epsilon-greedy", dest="epsilon_greedy", type=float,
                   default=0.3)
    p.set_defaults(fn=cmd_collect)

    p = subs.add_parser("train-foresight", help="train the frame predictor")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--phase-iters", dest="phase_iters", default=None,
                   help="comma-separated iterations for the 3 phases")
    p.add_argument("--snapshot-marks", dest="snapshot_marks", default=None)
    p.set_defaults(fn=cmd_train_foresight)

    p = subs.add_parser("train-ae", help="train the autoencoder baseline")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--ae-iters", dest="ae_iters", type=int, default=8_000)
    p.set_defaults(fn=cmd_train_ae)

    p = subs.add_parser("eval-detect", help="PR curves for one detector")
    _add_common(p, attack=True, detector=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--predictor", default=None)
    p.add_argument("--autoencoder", default=None)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(fn=cmd_eval_detect)

    p = subs.add_parser("eval-reward", help="reward vs attack-ratio sweep")
    _add_common(p, attack=True, detector=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(fn=cmd_eval_reward)

    p = subs.add_parser("eval-quality", help="predictor quality study")
    _add_common(p, attack=True, detector=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--predictor", required=True,
                   help="directory holding predictor_snap_*.fgn")
    p.add_argument("--dataset", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(fn=cmd_eval_quality)

    p = subs.add_parser("timeline", help="score timeline under periodic "
                                         "attack")
    _add_common(p, attack=True, detector=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--predictor", required=True)
    p.set_defaults(fn=cmd_timeline)

    p = subs.add_parser("plot", help="render a CSV artifact as SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--svg", default=None)
    p.set_defaults(fn=cmd_plot)

    return parser


INT_KEYS = {"seed", "iters", "period", "width", "trials", "frames", "steps",
            "ae_iters", "jobs"}
FLOAT_KEYS = {"eps", "alpha", "attack_ratio", "threshold", "epsilon_greedy"}


def _coerce(key, value):
    if key in INT_KEYS:
        return int(value)
    if key in FLOAT_KEYS:
        return float(value)
    return value


def _apply_config_file(args):
    if getattr(args, "config", None):
        values = configs.parse_run_config(args.config)
        # the file provides defaults for flags left unset on the command line
        for key, value in values.items():
            if hasattr(args, key) and getattr(args, key) is None:
                setattr(args, key, _coerce(key, value))
    return args


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args)
        return args.fn(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
