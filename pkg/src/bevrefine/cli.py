"""Pipeline driver: gen -> track -> extract -> train -> refine -> eval.

Stages hand off through files (scene / tracklet / trajectory JSONL, model
checkpoints, report CSVs), so any stage can be re-run or swapped in
isolation. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure.
"""
from __future__ import annotations

import argparse
import ast
import glob
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import datagen, metrics, tracker, trajectory
from .model import load_model
from .nncore import CheckpointError, NonFiniteError
from .training import TrajectoryRefiner, TrainingDiverged, refine_sample, write_metrics_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; values parsed as Python literals when possible."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            try:
                out[key] = ast.literal_eval(value)
            except (ValueError, SyntaxError):
                out[key] = value
    return out


def _scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=base_seed, spawn_key=(index,)).generate_state(1)[0])


def _list_inputs(path, pattern) -> list[str]:
    if os.path.isfile(path):
        return [path]
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, pattern)))
        if not files:
            raise DataError(f"no files matching {pattern} under {path}")
        return files
    raise DataError(f"input path does not exist: {path}")


def _noise_from_args(args) -> datagen.NoiseModel:
    base = datagen.NoiseModel.noiseless() if args.noise == "none" else datagen.NoiseModel()
    overrides = {}
    for field in ("sigma_xy", "sigma_theta", "sigma_lw", "heading_flip_prob", "drop_prob"):
        v = getattr(args, field)
        if v is not None:
            overrides[field] = v
    if overrides:
        from dataclasses import replace
        base = replace(base, **overrides)
    return base


def _gen_one(task) -> tuple[str, int, int, int]:
    out_dir, index, seed, actors, frames, period, density, noise = task
    cfg = datagen.SceneConfig(num_actors=actors, num_frames=frames, frame_period=period,
                              points_at_10m=density, rng_seed=seed)
    scene = datagen.generate_scene(cfg, noise=noise)
    path = os.path.join(out_dir, f"scene_{index:04d}.jsonl")
    datagen.write_scene(scene, path)
    n_points = sum(f.points.shape[0] for f in scene.frames)
    return path, actors, frames, n_points


def cmd_gen(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    noise = _noise_from_args(args)
    meta_rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(1,)))
    tasks = []
    for i in range(args.scenes):
        frames = int(meta_rng.integers(args.frames_min, args.frames_max + 1))
        tasks.append((args.out, i, _scene_seed(args.seed, i), args.actors, frames,
                      args.frame_period, args.points_at_10m, noise))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_gen_one, tasks))
    else:
        results = [_gen_one(t) for t in tasks]
    total_points = sum(r[3] for r in results)
    for path, actors, frames, n_points in results:
        print(f"wrote {path}: {actors} actors, {frames} frames, {n_points} points")
    print(f"generated {len(results)} scenes, {total_points} points total")
    return EXIT_OK


def _track_one(task) -> tuple[str, int, int]:
    scene_path, out_path, cfg_fields = task
    scene = datagen.read_scene(scene_path)
    cfg = tracker.TrackerConfig(**cfg_fields)
    tracklets = tracker.track_scene(tracker.detections_from_scene(scene), cfg)
    gt = tracker.gt_tracks_from_scene(scene)
    associations = {t.id: tracker.associate_gt(t, gt) for t in tracklets if t.steps}
    tracker.write_tracklets(tracklets, associations, out_path)
    n_tp = sum(1 for v in associations.values() if v is not None)
    return out_path, n_tp, len(tracklets) - n_tp


def cmd_track(args) -> int:
    scene_files = _list_inputs(args.scenes, "scene_*.jsonl")
    os.makedirs(args.out, exist_ok=True)
    cfg_fields = dict(nms_iou=args.nms_iou, score_min_det=args.score_min,
                      match_dist_max=args.match_dist, terminate_below=args.terminate_below)
    tasks = []
    for path in scene_files:
        stem = os.path.splitext(os.path.basename(path))[0]
        index = stem.split("_")[-1]
        tasks.append((path, os.path.join(args.out, f"tracklets_{index}.jsonl"), cfg_fields))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_track_one, tasks))
    else:
        results = [_track_one(t) for t in tasks]
    tp = sum(r[1] for r in results)
    fp = sum(r[2] for r in results)
    for out_path, n_tp, n_fp in results:
        print(f"wrote {out_path}: {n_tp} associated, {n_fp} false-positive tracklets")
    print(f"tracked {len(results)} scenes: {tp} true-positive tracklets, {fp} discarded")
    return EXIT_OK


def cmd_extract(args) -> int:
    scene_files = _list_inputs(args.scenes, "scene_*.jsonl")
    os.makedirs(args.out, exist_ok=True)
    total, skipped_total = 0, 0
    for scene_path in scene_files:
        stem = os.path.splitext(os.path.basename(scene_path))[0]
        index = stem.split("_")[-1]
        tr_path = os.path.join(args.tracklets, f"tracklets_{index}.jsonl")
        if not os.path.exists(tr_path):
            raise DataError(f"missing tracklet file for scene {scene_path}: {tr_path}")
        scene = datagen.read_scene(scene_path)
        records = tracker.read_tracklets(tr_path)
        samples, skipped = trajectory.extract_samples(scene, records,
                                                      context_pad=args.context_pad)
        out_path = os.path.join(args.out, f"trajectories_{index}.jsonl")
        trajectory.write_samples(samples, out_path)
        total += len(samples)
        skipped_total += skipped
        print(f"wrote {out_path}: {len(samples)} trajectories ({skipped} skipped)")
    print(f"extracted {total} trajectories, skipped {skipped_total} unassociated tracklets")
    return EXIT_OK


def _load_samples(path, min_frames=None, max_frames=None):
    files = _list_inputs(path, "trajectories_*.jsonl")
    samples = []
    for f in files:
        samples.extend(trajectory.read_samples(f))
    if min_frames is not None:
        samples = [s for s in samples if s.num_frames >= min_frames]
    if max_frames is not None:
        samples = [s for s in samples if s.num_frames <= max_frames]
    return samples


def cmd_train(args) -> int:
    samples = _load_samples(args.trajectories, args.min_frames, args.max_frames)
    if not samples:
        raise DataError(f"no usable trajectories under {args.trajectories}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(2,)))
    order = rng.permutation(len(samples))
    n_val = int(round(args.val_frac * len(samples)))
    val = [samples[i] for i in sorted(order[:n_val].tolist())]
    train_set = [samples[i] for i in sorted(order[n_val:].tolist())]
    if not train_set:
        raise DataError("validation split consumed every sample; lower --val-frac")
    refiner = TrajectoryRefiner(
        preset=args.preset, epochs=args.epochs, batch_size=args.batch,
        base_lr=args.lr, weight_decay=args.weight_decay, seed=args.seed,
        variant=args.variant, pos_encoding=args.pos, window=args.window,
        window_mode=args.window_mode,
        use_box_encoder=not args.no_box_enc, use_point_encoder=not args.no_point_enc,
        perturb=not args.no_perturb, subsequence=not args.no_subseq,
        val_fraction=0.0,
    )
    print(f"training on {len(train_set)} trajectories, validating on {len(val)} "
          f"({args.preset} preset, variant={args.variant}, pos={args.pos}, window={args.window})")
    refiner.fit(train_set, validation_data=val if val else None)
    refiner.save(args.out)
    if args.log:
        write_metrics_csv(refiner.history_, args.log)
        print(f"wrote metrics log {args.log}")
    best = refiner.best_val_iou_
    print(f"saved checkpoint {args.out} (best val mean IoU "
          f"{best if best >= 0 else float('nan'):.4f})")
    return EXIT_OK


def _refine_one(task) -> tuple[str, int]:
    ckpt_path, in_path, out_path = task
    net, _ = load_model(ckpt_path)
    samples = trajectory.read_samples(in_path)
    records = []
    for s in samples:
        t0 = time.perf_counter()
        refined = refine_sample(net, s)
        wall = time.perf_counter() - t0
        records.append({
            "tracklet_id": s.tracklet_id,
            "gt_actor_id": s.gt_actor_id,
            "frames": s.frames,
            "refined": refined,
            "wall_time_s": wall,
        })
    trajectory.write_refined(records, out_path)
    return out_path, len(records)


def cmd_refine(args) -> int:
    load_model(args.ckpt)  # validate the checkpoint before fanning out
    files = _list_inputs(args.trajectories, "trajectories_*.jsonl")
    os.makedirs(args.out, exist_ok=True)
    tasks = []
    for f in files:
        index = os.path.splitext(os.path.basename(f))[0].split("_")[-1]
        tasks.append((args.ckpt, f, os.path.join(args.out, f"refined_{index}.jsonl")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_refine_one, tasks))
    else:
        results = [_refine_one(t) for t in tasks]
    count = 0
    for out_path, n in results:
        count += n
        print(f"wrote {out_path}: {n} trajectories")
    print(f"refined {count} trajectories")
    return EXIT_OK


def cmd_eval(args) -> int:
    traj_files = _list_inputs(args.trajectories, "trajectories_*.jsonl")
    refined_files = _list_inputs(args.refined, "refined_*.jsonl")
    refined_by_key = {}
    for f in refined_files:
        index = os.path.splitext(os.path.basename(f))[0].split("_")[-1]
        for rec in trajectory.read_refined(f):
            refined_by_key[(index, rec["tracklet_id"])] = rec
    init_scores, refined_scores = [], []
    uid = 0
    for f in traj_files:
        index = os.path.splitext(os.path.basename(f))[0].split("_")[-1]
        for s in trajectory.read_samples(f):
            rec = refined_by_key.get((index, s.tracklet_id))
            if rec is None:
                raise DataError(f"no refined output for trajectory {s.tracklet_id} of file {f}")
            if rec["frames"] != s.frames:
                raise DataError(f"frame mismatch for trajectory {s.tracklet_id} of file {f}")
            init_scores.append(metrics.score_track(uid, s.boxes, s.gt_boxes))
            refined_scores.append(metrics.score_track(uid, rec["refined"].boxes(), s.gt_boxes))
            uid += 1
    if not init_scores:
        raise DataError("nothing to evaluate")
    metrics.write_report_csv(args.report, init_scores, refined_scores)
    print(f"wrote report {args.report}")
    if args.curve:
        metrics.write_recall_curve(args.curve, init_scores, refined_scores)
        print(f"wrote recall curve {args.curve}")
    init_sum = metrics.evaluate_set(init_scores)
    ref_sum = metrics.evaluate_set(refined_scores)
    print(f"tracks: {init_sum.num_tracks}")
    print(f"mean IoU: init {init_sum.mean_iou:.4f} -> refined {ref_sum.mean_iou:.4f}")
    for alpha in metrics.RC_THRESHOLDS:
        print(f"RC@{alpha}: init {init_sum.recall[alpha]:.4f} -> refined {ref_sum.recall[alpha]:.4f}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """Run every stage under one working directory with shared seeds."""
    w = args.workdir
    paths = {
        "scenes": os.path.join(w, "scenes"),
        "tracklets": os.path.join(w, "tracklets"),
        "trajectories": os.path.join(w, "trajectories"),
        "refined": os.path.join(w, "refined"),
    }
    ckpt = os.path.join(w, "model.ckpt")
    log = os.path.join(w, "train_log.csv")
    report = os.path.join(w, "report.csv")
    curve = os.path.join(w, "recall_curve.csv")
    parser = build_parser()
    run = lambda argv: _dispatch(parser.parse_args(argv))
    run(["gen", "--out", paths["scenes"], "--scenes", str(args.scenes),
         "--actors", str(args.actors), "--frames-min", str(args.frames_min),
         "--frames-max", str(args.frames_max), "--seed", str(args.seed),
         "--points-at-10m", str(args.points_at_10m), "--noise", args.noise])
    run(["track", "--scenes", paths["scenes"], "--out", paths["tracklets"]])
    run(["extract", "--scenes", paths["scenes"], "--tracklets", paths["tracklets"],
         "--out", paths["trajectories"]])
    run(["train", "--trajectories", paths["trajectories"], "--out", ckpt, "--log", log,
         "--preset", args.preset, "--epochs", str(args.epochs), "--seed", str(args.seed),
         "--val-frac", str(args.val_frac)])
    run(["refine", "--trajectories", paths["trajectories"], "--ckpt", ckpt,
         "--out", paths["refined"]])
    run(["eval", "--trajectories", paths["trajectories"], "--refined", paths["refined"],
         "--report", report, "--curve", curve])
    print(f"pipeline complete under {w}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="bevrefine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="key=value config file providing flag defaults")

    p = sub.add_parser("gen", help="generate synthetic scenes")
    add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--actors", type=int, default=4)
    p.add_argument("--frames-min", type=int, default=20)
    p.add_argument("--frames-max", type=int, default=20)
    p.add_argument("--frame-period", type=float, default=0.1)
    p.add_argument("--points-at-10m", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", choices=("default", "none"), default="default")
    for f in ("sigma-xy", "sigma-theta", "sigma-lw", "heading-flip-prob", "drop-prob"):
        p.add_argument(f"--{f}", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("track", help="run the tracker over scene detections")
    add_config(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nms-iou", type=float, default=0.1)
    p.add_argument("--score-min", type=float, default=0.1)
    p.add_argument("--match-dist", type=float, default=5.0)
    p.add_argument("--terminate-below", type=float, default=0.1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("extract", help="build trajectory training files from tracklets")
    add_config(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--tracklets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--context-pad", type=float, default=trajectory.CONTEXT_PAD)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the refinement model")
    add_config(p)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--preset", choices=("paper", "desk", "tiny"), default="desk")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-frac", type=float, default=0.15)
    p.add_argument("--variant", choices=("attention", "mlp_pool"), default="attention")
    p.add_argument("--pos", choices=("alibi", "absolute"), default="alibi")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--window-mode", choices=("mask", "chunk"), default="mask")
    p.add_argument("--no-perturb", action="store_true")
    p.add_argument("--no-subseq", action="store_true")
    p.add_argument("--no-box-enc", action="store_true")
    p.add_argument("--no-point-enc", action="store_true")
    p.add_argument("--min-frames", type=int, default=None)
    p.add_argument("--max-frames", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="refine trajectories with a trained checkpoint")
    add_config(p)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="score refined trajectories against ground truth")
    add_config(p)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--refined", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--curve", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run gen/track/extract/train/refine/eval end to end")
    add_config(p)
    p.add_argument("--workdir", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--actors", type=int, default=4)
    p.add_argument("--frames-min", type=int, default=12)
    p.add_argument("--frames-max", type=int, default=24)
    p.add_argument("--points-at-10m", type=int, default=60)
    p.add_argument("--noise", choices=("default", "none"), default="default")
    p.add_argument("--preset", choices=("paper", "desk", "tiny"), default="desk")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pipeline)

    return parser


def _dispatch(args) -> int:
    return args.func(args)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config_path = getattr(args, "config", None)
        if config_path:
            overrides = load_config_file(config_path)
            known = {k for k in vars(args) if k not in ("func", "command", "config")}
            bad = sorted(set(overrides) - known)
            if bad:
                raise UsageError(f"config keys not recognized for '{args.command}': {bad}")
            # Flags given on the command line win over the config file.
            given = _explicit_dests(argv)
            for key, value in overrides.items():
                if key not in given:
                    setattr(args, key, value)
        return _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, datagen.SceneParseError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if isinstance(exc, TrainingDiverged) and exc.dump_path:
            print(f"diagnostic dump: {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC


def _explicit_dests(argv) -> set[str]:
    out = set()
    for token in argv:
        if token.startswith("--"):
            out.add(token[2:].split("=", 1)[0].replace("-", "_"))
    return out


if __name__ == "__main__":
    sys.exit(main())
