import os

import numpy as np
import pytest

from bevrefine import datagen, tracker
from bevrefine.cli import main
from bevrefine.model import ModelConfig, RefinerNet, load_model, save_model
from bevrefine.trajectory import read_refined, read_samples


def run(argv):
    return main(argv)


def dir_bytes(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as f:
            out[name] = f.read()
    return out


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    code = run(["gen", "--out", str(out), "--scenes", "2", "--actors", "2",
                "--frames-min", "8", "--frames-max", "10", "--seed", "3",
                "--points-at-10m", "40"])
    assert code == 0
    return out


class TestGen:
    def test_writes_expected_files(self, gen_dir):
        names = sorted(os.listdir(gen_dir))
        assert names == ["scene_0000.jsonl", "scene_0001.jsonl"]

    def test_rerun_identical_bytes(self, gen_dir, tmp_path):
        out2 = tmp_path / "again"
        code = run(["gen", "--out", str(out2), "--scenes", "2", "--actors", "2",
                    "--frames-min", "8", "--frames-max", "10", "--seed", "3",
                    "--points-at-10m", "40"])
        assert code == 0
        assert dir_bytes(gen_dir) == dir_bytes(out2)

    def test_single_frame_scene_valid(self, tmp_path):
        out = tmp_path / "one"
        assert run(["gen", "--out", str(out), "--scenes", "1", "--actors", "1",
                    "--frames-min", "1", "--frames-max", "1", "--seed", "0"]) == 0
        scene = datagen.read_scene(out / "scene_0000.jsonl")
        assert scene.num_frames == 1

    def test_noise_flags(self, tmp_path):
        out = tmp_path / "drop"
        assert run(["gen", "--out", str(out), "--scenes", "1", "--actors", "2",
                    "--frames-min", "4", "--frames-max", "4", "--seed", "0",
                    "--drop-prob", "1.0"]) == 0
        scene = datagen.read_scene(out / "scene_0000.jsonl")
        assert all(len(f.detections) == 0 for f in scene.frames)


class TestTrackCmd:
    def test_noiseless_recovers_actor_count(self, tmp_path):
        scenes = tmp_path / "scenes"
        assert run(["gen", "--out", str(scenes), "--scenes", "1", "--actors", "3",
                    "--frames-min", "6", "--frames-max", "6", "--seed", "1",
                    "--noise", "none"]) == 0
        tracks = tmp_path / "tracks"
        assert run(["track", "--scenes", str(scenes), "--out", str(tracks)]) == 0
        recs = tracker.read_tracklets(tracks / "tracklets_0000.jsonl")
        assert len(recs) == 3
        assert all(r["gt_actor_id"] is not None for r in recs)

    def test_all_dropped_gives_zero_tracklets(self, tmp_path):
        scenes = tmp_path / "scenes"
        run(["gen", "--out", str(scenes), "--scenes", "1", "--actors", "2",
             "--frames-min", "4", "--frames-max", "4", "--seed", "1",
             "--drop-prob", "1.0"])
        tracks = tmp_path / "tracks"
        assert run(["track", "--scenes", str(scenes), "--out", str(tracks)]) == 0
        assert tracker.read_tracklets(tracks / "tracklets_0000.jsonl") == []

    def test_missing_scene_dir_is_data_error(self, tmp_path):
        assert run(["track", "--scenes", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "t")]) == 2


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    scenes, tracks, trajs = root / "scenes", root / "tracks", root / "trajs"
    assert run(["gen", "--out", str(scenes), "--scenes", "2", "--actors", "2",
                "--frames-min", "6", "--frames-max", "8", "--seed", "7",
                "--points-at-10m", "40"]) == 0
    assert run(["track", "--scenes", str(scenes), "--out", str(tracks)]) == 0
    assert run(["extract", "--scenes", str(scenes), "--tracklets", str(tracks),
                "--out", str(trajs)]) == 0
    return root, scenes, tracks, trajs


class TestExtract:
    def test_trajectory_contracts(self, pipeline_dirs):
        root, scenes, tracks, trajs = pipeline_dirs
        samples = read_samples(trajs / "trajectories_0000.jsonl")
        assert samples
        scene = datagen.read_scene(scenes / "scene_0000.jsonl")
        per_frame = {f.index: f.points.shape[0] for f in scene.frames}
        for s in samples:
            mid = s.boxes[len(s.boxes) // 2]
            assert (mid.x, mid.y, mid.theta) == (0.0, 0.0, 0.0)
            sizes = {(b.l, b.w) for b in s.gt_boxes}
            assert len(sizes) == 1
            for frame, pts in zip(s.frames, s.points):
                assert pts.shape[0] <= per_frame[frame]

    def test_missing_tracklets_is_data_error(self, pipeline_dirs, tmp_path):
        root, scenes, tracks, trajs = pipeline_dirs
        assert run(["extract", "--scenes", str(scenes),
                    "--tracklets", str(tmp_path / "void"),
                    "--out", str(tmp_path / "out")]) == 2


class TestTrainCmd:
    def test_train_writes_checkpoint_and_log(self, pipeline_dirs, tmp_path):
        root, scenes, tracks, trajs = pipeline_dirs
        ckpt = tmp_path / "model.ckpt"
        log = tmp_path / "log.csv"
        code = run(["train", "--trajectories", str(trajs), "--out", str(ckpt),
                    "--log", str(log), "--preset", "tiny", "--epochs", "2",
                    "--seed", "0", "--val-frac", "0.3"])
        assert code == 0
        assert ckpt.exists()
        lines = log.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_mean_iou,lr"
        assert len(lines) == 3
        net, header = load_model(ckpt)
        assert header["model.name"] == "tiny"

    @pytest.mark.parametrize("extra", [
        ["--variant", "mlp_pool"],
        ["--pos", "absolute"],
        ["--window", "2"],
        ["--no-perturb", "--no-subseq"],
        ["--no-box-enc"],
        ["--no-point-enc"],
    ])
    def test_ablation_flags_train(self, pipeline_dirs, tmp_path, extra):
        root, scenes, tracks, trajs = pipeline_dirs
        ckpt = tmp_path / "model.ckpt"
        code = run(["train", "--trajectories", str(trajs), "--out", str(ckpt),
                    "--preset", "tiny", "--epochs", "1", "--seed", "0",
                    "--val-frac", "0", *extra])
        assert code == 0 and ckpt.exists()

    def test_empty_dataset_is_data_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run(["train", "--trajectories", str(empty),
                    "--out", str(tmp_path / "m.ckpt")]) == 2


class TestRefineAndEval:
    def test_zero_residual_refine_matches_inputs(self, pipeline_dirs, tmp_path):
        root, scenes, tracks, trajs = pipeline_dirs
        net = RefinerNet(ModelConfig.preset("tiny"), seed=0)
        net.pose_head.weight.data[...] = 0.0
        net.pose_head.bias.data[...] = 0.0
        net.size_head.weight.data[...] = 0.0
        net.size_head.bias.data[...] = 0.0
        ckpt = tmp_path / "zero.ckpt"
        save_model(net, ckpt)
        refined_dir = tmp_path / "refined"
        assert run(["refine", "--trajectories", str(trajs), "--ckpt", str(ckpt),
                    "--out", str(refined_dir)]) == 0
        samples = read_samples(trajs / "trajectories_0000.jsonl")
        recs = read_refined(refined_dir / "refined_0000.jsonl")
        by_id = {r["tracklet_id"]: r for r in recs}
        for s in samples:
            r = by_id[s.tracklet_id]
            mean_l = float(np.mean([b.l for b in s.boxes]))
            mean_w = float(np.mean([b.w for b in s.boxes]))
            assert r["refined"].size[0] == pytest.approx(mean_l, rel=1e-6)
            assert r["refined"].size[1] == pytest.approx(mean_w, rel=1e-6)
            for pose, box in zip(r["refined"].poses, s.boxes):
                assert pose.x == pytest.approx(box.x, abs=1e-6)
                assert pose.y == pytest.approx(box.y, abs=1e-6)
            assert r["wall_time_s"] >= 0.0

    def test_eval_report(self, pipeline_dirs, tmp_path):
        root, scenes, tracks, trajs = pipeline_dirs
        net = RefinerNet(ModelConfig.preset("tiny"), seed=0)
        ckpt = tmp_path / "m.ckpt"
        save_model(net, ckpt)
        refined_dir = tmp_path / "refined"
        assert run(["refine", "--trajectories", str(trajs), "--ckpt", str(ckpt),
                    "--out", str(refined_dir)]) == 0
        report = tmp_path / "report.csv"
        curve = tmp_path / "curve.csv"
        assert run(["eval", "--trajectories", str(trajs), "--refined", str(refined_dir),
                    "--report", str(report), "--curve", str(curve)]) == 0
        lines = report.read_text().splitlines()
        assert lines[0].startswith("object_id,M,motion_state")
        rc_rows = [l for l in lines if l.startswith("rc@")]
        assert len(rc_rows) == 4
        for col in (3, 4):
            vals = [float(r.split(",")[col]) for r in rc_rows]
            assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert curve.exists()

    def test_checkpoint_mismatch_is_data_error(self, pipeline_dirs, tmp_path):
        root, scenes, tracks, trajs = pipeline_dirs
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_bytes(b"BVRFgarbage")
        assert run(["refine", "--trajectories", str(trajs), "--ckpt", str(bogus),
                    "--out", str(tmp_path / "r")]) == 2


class TestNoiselessRoundTrip:
    def test_gt_equals_refined_under_identity(self, tmp_path):
        # noiseless scenes + zero-residual model => eval scores 1.0 everywhere
        scenes, tracks, trajs = tmp_path / "s", tmp_path / "t", tmp_path / "j"
        assert run(["gen", "--out", str(scenes), "--scenes", "1", "--actors", "2",
                    "--frames-min", "6", "--frames-max", "6", "--seed", "5",
                    "--noise", "none"]) == 0
        assert run(["track", "--scenes", str(scenes), "--out", str(tracks)]) == 0
        assert run(["extract", "--scenes", str(scenes), "--tracklets", str(tracks),
                    "--out", str(trajs)]) == 0
        net = RefinerNet(ModelConfig.preset("tiny"), seed=0)
        for head in (net.pose_head, net.size_head):
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0
        ckpt = tmp_path / "zero.ckpt"
        save_model(net, ckpt)
        refined = tmp_path / "r"
        assert run(["refine", "--trajectories", str(trajs), "--ckpt", str(ckpt),
                    "--out", str(refined)]) == 0
        report = tmp_path / "report.csv"
        assert run(["eval", "--trajectories", str(trajs), "--refined", str(refined),
                    "--report", str(report)]) == 0
        mean_row = [l for l in report.read_text().splitlines()
                    if l.startswith("mean_iou,")][0].split(",")
        assert float(mean_row[3]) == pytest.approx(1.0, abs=1e-9)   # init
        assert float(mean_row[4]) == pytest.approx(1.0, abs=1e-6)   # refined


class TestUsageAndConfig:
    def test_missing_required_flag_is_usage_error(self):
        assert run(["gen"]) == 1

    def test_unknown_subcommand_is_usage_error(self):
        assert run(["explode"]) == 1

    def test_config_file_provides_defaults(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("scenes=1\nactors=2\nframes-min=4\nframes-max=4\nseed=9\n")
        out = tmp_path / "scenes"
        assert run(["gen", "--config", str(cfg), "--out", str(out)]) == 0
        scene = datagen.read_scene(out / "scene_0000.jsonl")
        assert scene.config.num_frames == 4
        assert scene.config.num_actors == 2

    def test_cli_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("scenes=3\n")
        out = tmp_path / "scenes"
        assert run(["gen", "--config", str(cfg), "--out", str(out), "--scenes", "1",
                    "--actors", "1", "--frames-min", "2", "--frames-max", "2",
                    "--seed", "0"]) == 0
        assert len(os.listdir(out)) == 1

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("bananas=4\n")
        assert run(["gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1

    def test_malformed_config_is_data_error(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("no equals sign here\n")
        assert run(["gen", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


class TestPipelineCommand:
    def test_end_to_end(self, tmp_path):
        work = tmp_path / "run"
        code = run(["pipeline", "--workdir", str(work), "--scenes", "2", "--actors", "2",
                    "--frames-min", "6", "--frames-max", "8", "--preset", "tiny",
                    "--epochs", "1", "--val-frac", "0.34", "--seed", "11",
                    "--points-at-10m", "40"])
        assert code == 0
        for rel in ("scenes/scene_0001.jsonl", "tracklets/tracklets_0000.jsonl",
                    "trajectories/trajectories_0000.jsonl", "model.ckpt",
                    "train_log.csv", "refined/refined_0000.jsonl",
                    "report.csv", "recall_curve.csv"):
            assert (work / rel).exists(), rel


class TestWorkerPool:
    def test_gen_and_refine_with_jobs(self, tmp_path):
        scenes = tmp_path / "scenes"
        assert run(["gen", "--out", str(scenes), "--scenes", "2", "--actors", "2",
                    "--frames-min", "5", "--frames-max", "6", "--seed", "4",
                    "--jobs", "2"]) == 0
        serial = tmp_path / "serial"
        assert run(["gen", "--out", str(serial), "--scenes", "2", "--actors", "2",
                    "--frames-min", "5", "--frames-max", "6", "--seed", "4"]) == 0
        assert dir_bytes(scenes) == dir_bytes(serial)
        tracks, trajs = tmp_path / "t", tmp_path / "j"
        assert run(["track", "--scenes", str(scenes), "--out", str(tracks), "--jobs", "2"]) == 0
        assert run(["extract", "--scenes", str(scenes), "--tracklets", str(tracks),
                    "--out", str(trajs)]) == 0
        net = RefinerNet(ModelConfig.preset("tiny"), seed=0)
        ckpt = tmp_path / "m.ckpt"
        save_model(net, ckpt)
        par, ser = tmp_path / "rp", tmp_path / "rs"
        assert run(["refine", "--trajectories", str(trajs), "--ckpt", str(ckpt),
                    "--out", str(par), "--jobs", "2"]) == 0
        assert run(["refine", "--trajectories", str(trajs), "--ckpt", str(ckpt),
                    "--out", str(ser)]) == 0
        # wall_time differs between runs; compare refined content fields only
        for name in sorted(os.listdir(par)):
            a = read_refined(par / name)
            b = read_refined(ser / name)
            assert [(r["tracklet_id"], r["refined"].poses, r["refined"].size) for r in a] == \
                   [(r["tracklet_id"], r["refined"].poses, r["refined"].size) for r in b]
