import math

import numpy as np
import pytest

from bevrefine.datagen import (
    MotionProfile,
    NoiseModel,
    Scene,
    SceneConfig,
    SceneFrame,
    SceneParseError,
    generate_scene,
    integrate_motion,
    perturb_detections,
    read_scene,
    sample_surface_points,
    write_scene,
)
from bevrefine.geometry import BevBox


class TestMotionProfile:
    def test_static_requires_zero_speed(self):
        with pytest.raises(ValueError):
            MotionProfile("static", speed=2.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            MotionProfile("teleporting")

    def test_negative_speed(self):
        with pytest.raises(ValueError):
            MotionProfile("constant_velocity", speed=-1.0)


class TestIntegrateMotion:
    def test_static_identical_poses(self):
        start = BevBox(3, 4, 4.5, 2, 0.3)
        boxes = integrate_motion(start, MotionProfile("static", speed=0.0), 6, 0.1)
        for b in boxes:
            assert (b.x, b.y, b.theta) == (3, 4, pytest.approx(0.3))

    def test_constant_velocity_spacing(self):
        start = BevBox(0, 0, 4.5, 2, 0.7)
        boxes = integrate_motion(start, MotionProfile("constant_velocity", speed=10.0), 5, 0.1)
        for a, b in zip(boxes, boxes[1:]):
            assert math.hypot(b.x - a.x, b.y - a.y) == pytest.approx(1.0, abs=1e-12)

    def test_turning_heading_law(self):
        omega = 0.3
        start = BevBox(0, 0, 4.5, 2, 0.1)
        boxes = integrate_motion(start, MotionProfile("turning", speed=5.0, yaw_rate=omega), 8, 0.1)
        for i, b in enumerate(boxes):
            assert b.theta == pytest.approx(0.1 + i * omega * 0.1, abs=1e-12)

    def test_size_constant(self):
        boxes = integrate_motion(BevBox(0, 0, 4.2, 1.9, 0),
                                 MotionProfile("accelerating", speed=3.0, accel=1.0), 10, 0.1)
        assert all((b.l, b.w) == (4.2, 1.9) for b in boxes)


class TestSampleSurfacePoints:
    def test_zero_density_empty(self):
        rng = np.random.default_rng(0)
        out = sample_surface_points(BevBox(10, 0, 4, 2, 0), 1.5, (0, 0), 0, rng)
        assert out.shape == (0, 4)

    def test_expected_count_at_reference_range(self):
        rng = np.random.default_rng(1)
        counts = [sample_surface_points(BevBox(10, 0, 4, 2, 0), 1.5, (0, 0), 40, rng).shape[0]
                  for _ in range(300)]
        assert np.mean(counts) == pytest.approx(40, rel=0.1)

    def test_inverse_square_at_double_range(self):
        rng = np.random.default_rng(2)
        counts = [sample_surface_points(BevBox(20, 0, 4, 2, 0), 1.5, (0, 0), 40, rng).shape[0]
                  for _ in range(300)]
        assert np.mean(counts) == pytest.approx(10, rel=0.15)

    def test_only_visible_faces_sampled(self):
        # Box ahead of the sensor along +x, heading 0: only the near-x face
        # (x = 8) and near-y face (y = -1) can be hit.
        rng = np.random.default_rng(3)
        box = BevBox(10, 0, 4, 2, 0)
        pts = sample_surface_points(box, 1.5, (0, -5), 500, rng)
        assert pts.shape[0] > 100
        near_back = np.abs(pts[:, 0] - 8.0) < 0.2
        near_right = np.abs(pts[:, 1] + 1.0) < 0.2
        assert np.all(near_back | near_right)
        # interiors of the hidden far faces never sampled (corners are shared)
        on_front_interior = (np.abs(pts[:, 0] - 12.0) < 0.1) & ~near_right
        on_left_interior = (np.abs(pts[:, 1] - 1.0) < 0.1) & ~near_back
        assert not np.any(on_front_interior)
        assert not np.any(on_left_interior)

    def test_z_within_height(self):
        rng = np.random.default_rng(4)
        pts = sample_surface_points(BevBox(10, 0, 4, 2, 0), 1.7, (0, 0), 100, rng)
        assert (pts[:, 2] >= 0).all() and (pts[:, 2] <= 1.7).all()

    def test_timestamps_within_range(self):
        rng = np.random.default_rng(5)
        pts = sample_surface_points(BevBox(10, 0, 4, 2, 0), 1.5, (0, 0), 80, rng,
                                    t_range=(0.4, 0.5))
        assert (pts[:, 3] >= 0.4).all() and (pts[:, 3] <= 0.5).all()


class TestGenerateScene:
    def test_gt_size_constant_per_actor(self):
        scene = generate_scene(SceneConfig(num_actors=3, num_frames=8, rng_seed=5))
        for aid in scene.actor_ids():
            track = scene.gt_track(aid)
            sizes = {(b.l, b.w) for _, b in track}
            assert len(sizes) == 1
            assert len(track) == 8

    def test_profile_count_mismatch(self):
        with pytest.raises(ValueError):
            generate_scene(SceneConfig(num_actors=2, rng_seed=0), profiles=[MotionProfile()])

    def test_static_profile_gives_identical_poses(self):
        profiles = [MotionProfile("static", speed=0.0)]
        scene = generate_scene(SceneConfig(num_actors=1, num_frames=5, rng_seed=3), profiles)
        track = scene.gt_track(0)
        first = track[0][1]
        for _, b in track:
            assert (b.x, b.y, b.theta) == (first.x, first.y, first.theta)

    def test_spawn_conflict_rejected(self):
        with pytest.raises(RuntimeError, match="place actor"):
            generate_scene(SceneConfig(num_actors=40, num_frames=1, rng_seed=1),
                           min_spawn_separation=40.0)

    def test_determinism_same_seed(self, tmp_path):
        cfg = SceneConfig(num_actors=3, num_frames=6, rng_seed=9)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_scene(generate_scene(cfg), a)
        write_scene(generate_scene(cfg), b)
        assert a.read_bytes() == b.read_bytes()


class TestPerturbDetections:
    def test_identity_noise_copies_gt(self):
        scene = generate_scene(SceneConfig(num_actors=2, num_frames=4, rng_seed=2),
                               noise=NoiseModel.noiseless())
        for frame in scene.frames:
            assert len(frame.detections) == len(frame.gt)
            for (_, gt_box), (det_box, score) in zip(frame.gt, frame.detections):
                assert det_box.to_list() == gt_box.to_list()
                rng_to_center = math.hypot(det_box.x, det_box.y)
                expect = max(0.3, 1.0 - rng_to_center / 300.0)
                assert score == pytest.approx(expect, abs=0.05)
                assert 0.0 < score <= 1.0

    def test_drop_prob_one_drops_all(self):
        noise = NoiseModel(drop_prob=1.0)
        scene = generate_scene(SceneConfig(num_actors=3, num_frames=4, rng_seed=4), noise=noise)
        assert all(len(f.detections) == 0 for f in scene.frames)

    def test_sigma_xy_empirical_std(self):
        noise = NoiseModel(sigma_xy=0.25, sigma_theta=0.0, sigma_lw=0.0,
                           heading_flip_prob=0.0, drop_prob=0.0)
        scene = generate_scene(SceneConfig(num_actors=1, num_frames=1, rng_seed=6),
                               profiles=[MotionProfile("static", speed=0.0)], noise=noise)
        rng = np.random.default_rng(10)
        errs = []
        for _ in range(10_000):
            perturb_detections(scene, noise, rng)
            (det, _), (_, gt) = scene.frames[0].detections[0], scene.frames[0].gt[0]
            errs.append(det.x - gt.x)
        assert np.std(errs) == pytest.approx(0.25, rel=0.05)

    def test_probability_validation(self):
        with pytest.raises(ValueError):
            NoiseModel(drop_prob=1.5)
        with pytest.raises(ValueError):
            NoiseModel(sigma_xy=-0.1)


class TestSceneFile:
    def test_empty_scene_round_trip(self, tmp_path):
        cfg = SceneConfig(num_actors=0, num_frames=1, rng_seed=0)
        scene = generate_scene(cfg, profiles=[])
        path = tmp_path / "s.jsonl"
        write_scene(scene, path)
        back = read_scene(path)
        assert back.config == cfg
        assert back.frames[0].points.shape == (0, 4)

    def test_round_trip_values_and_bytes(self, tmp_path):
        # 9 significant digits carry a worst-case relative error of 5e-9; once
        # canonically formatted, further round trips are bit-identical.
        scene = generate_scene(SceneConfig(num_actors=2, num_frames=5, rng_seed=8))
        p1, p2 = tmp_path / "one.jsonl", tmp_path / "two.jsonl"
        write_scene(scene, p1)
        back = read_scene(p1)
        write_scene(back, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for f0, f1 in zip(scene.frames, back.frames):
            assert f1.points.shape == f0.points.shape
            if f0.points.size:
                assert np.allclose(f1.points, f0.points, rtol=5e-9, atol=1e-9)
            for (aid0, b0), (aid1, b1) in zip(f0.gt, f1.gt):
                assert aid0 == aid1
                assert np.allclose(b1.to_list(), b0.to_list(), rtol=5e-9, atol=1e-9)
        assert read_scene(p2).frames[0].points.tolist() == back.frames[0].points.tolist()

    def test_truncated_file_names_line(self, tmp_path):
        scene = generate_scene(SceneConfig(num_actors=1, num_frames=3, rng_seed=1))
        path = tmp_path / "s.jsonl"
        write_scene(scene, path)
        text = path.read_text()
        lines = text.splitlines()
        broken = "\n".join(lines[:2] + [lines[2][: len(lines[2]) // 2]]) + "\n"
        path.write_text(broken)
        with pytest.raises(SceneParseError, match="line 3"):
            read_scene(path)

    def test_missing_frames_reported(self, tmp_path):
        scene = generate_scene(SceneConfig(num_actors=1, num_frames=3, rng_seed=1))
        path = tmp_path / "s.jsonl"
        write_scene(scene, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:2]) + "\n")
        with pytest.raises(SceneParseError, match="expected 3 frame records"):
            read_scene(path)

    def test_missing_key_names_line(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_text('{"version":1,"config":{}}\n')
        with pytest.raises(SceneParseError, match="line 1"):
            read_scene(path)

    def test_nine_significant_digits(self, tmp_path):
        frame = SceneFrame(0, 0.0, 0.1, np.array([[1.23456789123456, 0, 0, 0]]),
                           [(0, BevBox(0.123456789123, 0, 4, 2, 0))], [])
        scene = Scene(SceneConfig(num_actors=1, num_frames=1, rng_seed=0), NoiseModel(), [frame])
        path = tmp_path / "s.jsonl"
        write_scene(scene, path)
        text = path.read_text()
        assert "1.23456789," in text          # point x at 9 significant digits
        assert "0.123456789," in text         # box x at 9 significant digits
        assert "1.23456789123456" not in text
