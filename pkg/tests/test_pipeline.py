import json

import numpy as np
import pytest

from pmslam.camera import FeatureMap, match_pointmaps
from pmslam.eval import Trajectory, ate_rmse, read_tum
from pmslam.pipeline import (PAIR_MAGIC, PredictorError, RecordingPredictor, Slam, SlamConfig, StreamPredictor,
                             SyntheticPredictor, read_meta, read_pair, record, run, synthetic_predictor,
                             write_meta, write_pair)
from pmslam.synth import NoiseModel, PredictionPair, intrinsics_for, make_scene, make_trajectory, render

from helpers import pose_errors


def test_config_defaults():
    c = SlamConfig()
    assert (c.omega_k, c.omega_r, c.omega_l, c.reloc_fraction) == (0.333, 0.005, 0.1, 0.3)
    assert c.mode == "ray" and not c.calibrated


def test_config_text_roundtrip():
    text = """
    # comment
    omega_k = 0.4
    loop_closure = false
    seed = 7
    resolution = 80x60
    huber = 2.0
    intrinsics = 50,50,39.5,29.5
    calibrated = true
    """
    c = SlamConfig.from_text(text)
    assert c.omega_k == 0.4 and not c.loop_closure and c.seed == 7 and c.resolution == (80, 60)
    assert c.robust.huber == 2.0 and c.intrinsics.fx == 50 and c.mode == "pixel"
    again = SlamConfig.from_text(c.to_text())
    assert again == c


@pytest.mark.parametrize("text", ["omega_k = 2", "nonsense = 1", "just words", "loop_closure = maybe",
                                  "calibrated = true"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        SlamConfig.from_text(text)


def test_pair_record_roundtrip(tmp_path):
    pred = synthetic_predictor("orbit", 5, SlamConfig(noise_depth=0.01, noise_scale=0.1))
    pair = pred.predict(2, 0)
    path = tmp_path / "p.bin"
    write_pair(path, 2, 0, pair)
    raw = path.read_bytes()
    assert raw[:8] == PAIR_MAGIC
    back = read_pair(path, 48, 64, 16)
    for a, b in ((pair.X_ii, back.X_ii), (pair.X_ji, back.X_ji), (pair.C_j, back.C_j),
                 (pair.F_i.desc, back.F_i.desc), (pair.F_j.conf, back.F_j.conf)):
        assert np.array_equal(a, b)
    path.write_bytes(raw[:100])
    with pytest.raises(PredictorError):
        read_pair(path, 48, 64, 16)
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(PredictorError):
        read_pair(path, 48, 64, 16)


def test_meta_roundtrip(tmp_path):
    write_meta(tmp_path, 48, 64, 16, [0.0, 0.5, 1.25])
    m = read_meta(tmp_path)
    assert (m["height"], m["width"], m["descriptor_dim"], m["frames"]) == (48, 64, 16, 3)
    assert m["timestamps"].tolist() == [0.0, 0.5, 1.25]


def test_synthetic_predictor_is_deterministic_and_float32():
    cfg = SlamConfig(noise_depth=0.02, noise_outliers=0.05, noise_scale=0.1, seed=3)
    a = synthetic_predictor("loop", 10, cfg).predict(4, 2)
    b = synthetic_predictor("loop", 10, cfg).predict(4, 2)
    assert np.array_equal(a.X_ii, b.X_ii) and np.array_equal(a.X_ji, b.X_ji)
    assert np.array_equal(a.X_ii, a.X_ii.astype(np.float32).astype(np.float64))


@pytest.fixture(scope="module")
def orbit_run():
    cfg = SlamConfig(seed=0)
    pred = synthetic_predictor("orbit", 12, cfg)
    traj, cloud, report, slam = run(cfg, pred)
    return cfg, pred, traj, cloud, report, slam


def test_initialize(orbit_run):
    cfg, pred, *_ = orbit_run
    slam = Slam(cfg, pred)
    kf = slam.initialize(0)
    P, _ = render(pred.scene, pred.poses[0], cfg.resolution)
    assert np.abs(kf.X - P).max() <= 1e-6 * np.abs(P).max()
    assert np.array_equal(kf.T_wc.matrix(), np.eye(4)) and slam.graph.anchor == kf.id
    assert len(slam.index) == 1


def test_second_frame_matches_ground_truth(orbit_run):
    _, pred, traj, *_ = orbit_run
    rel_est = traj.poses[0].inverse() @ traj.poses[1]
    rel_true = pred.poses[0].inverse() @ pred.poses[1]
    assert max(pose_errors(rel_est, rel_true)) <= 1e-6


def test_outputs_are_complete_and_finite(orbit_run):
    _, pred, traj, cloud, report, slam = orbit_run
    assert np.array_equal(traj.timestamps, pred.timestamps())
    assert all(np.all(np.isfinite(T.matrix())) for T in traj.poses)
    assert np.all(np.isfinite(cloud)) and len(cloud) > 0
    assert report["frames"] == 12 and report["keyframes"] == len(slam.graph)
    assert report["edges"] == len(slam.graph.edges) >= report["keyframes"] - 1
    assert set(report["timings_ms"]) >= {"predict_ms", "match_ms", "track_ms", "total_ms"}
    assert len(report["tracking_gn_iterations"]) == report["tracked_frames"] - 1
    ate = ate_rmse(traj, Trajectory(pred.timestamps(), pred.poses))
    assert ate <= 1e-4


def test_map_drops_low_confidence(orbit_run):
    *_, slam = orbit_run
    total = sum(kf.C.size for kf in slam.graph.keyframes)
    n = len(slam.point_cloud())
    assert 0.85 * total <= n <= total
    slam.config.map_conf_percentile = 0.0
    assert len(slam.point_cloud()) == total
    slam.config.map_conf_percentile = 10.0


def test_identical_frame_does_not_spawn_keyframe():
    scene = make_scene(0)
    T = make_trajectory("orbit", 5, 0)[0]
    slam = Slam(SlamConfig(), SyntheticPredictor(scene, [T, T, T]))
    slam.run()
    assert len(slam.graph) == 1 and slam.stats["tracked"] == 3


def test_loop_sequence_closes_loop_and_runs_backend():
    cfg = SlamConfig(seed=1)
    pred = synthetic_predictor("loop", 24, cfg)
    _, _, report, slam = run(cfg, pred)
    assert len(report["loop_edges"]) >= 1 and any(e.loop for e in slam.graph.edges)
    assert report["backend_gn_iterations"] and max(report["backend_gn_iterations"]) <= 10


def test_backend_runs_without_loop_closure():
    cfg = SlamConfig(seed=1, loop_closure=False)
    _, _, report, slam = run(cfg, synthetic_predictor("loop", 24, cfg))
    assert report["loop_edges"] == [] and not any(e.loop for e in slam.graph.edges)
    assert len(report["backend_gn_iterations"]) == report["keyframes"] - 1


def test_calibrated_run():
    res = (64, 48)
    cfg = SlamConfig(calibrated=True, intrinsics=intrinsics_for(res))
    pred = synthetic_predictor("orbit", 8, cfg)
    traj, *_ = run(cfg, pred)
    assert ate_rmse(traj, Trajectory(pred.timestamps(), pred.poses)) <= 1e-4


class _AlienPredictor:
    """Serves a base predictor, except that one frame shows a different, larger room."""

    def __init__(self, base, alien):
        self.base, self.alien = base, alien
        self.other = make_scene(77, room_scale=3.0)
        self.other_pose = make_trajectory("orbit", 3, 77)[0]

    n_frames = property(lambda self: self.base.n_frames)

    def timestamps(self):
        return self.base.timestamps()

    def training_descriptors(self):
        return self.base.training_descriptors()

    def _alien_view(self):
        P, W = render(self.other, self.other_pose, self.base.resolution)
        return P, FeatureMap(self.other.descriptors(W), np.ones(P.shape[:2]))

    def predict(self, a, b):
        if self.alien not in (a, b):
            return self.base.predict(a, b)
        P, F = self._alien_view()
        if a == b:
            return PredictionPair(P, P, F.conf, F.conf, F, F)
        own = self.base.predict(b, b)
        if a == self.alien:
            return PredictionPair(P, own.X_ii, F.conf, own.C_i, F, own.F_i)
        return PredictionPair(own.X_ii, P, own.C_i, F.conf, own.F_i, F)

    def encode(self, a):
        return self.predict(a, a).F_i


def _revisit_predictor():
    scene = make_scene(2)
    poses = make_trajectory("orbit", 30, 2)[:10]
    return SyntheticPredictor(scene, poses + [poses[0]])


def test_relocalises_on_revisit():
    pred = _revisit_predictor()
    slam = Slam(SlamConfig(), pred)
    for f in range(10):
        slam.process_frame(f)
    n_kf = len(slam.graph)
    slam.lost = True
    slam.process_frame(10)
    assert not slam.lost and slam.stats["relocalisations"] == 1
    assert len(slam.graph) == n_kf + 1 and slam.graph.edges[-1].i == 0
    T = slam.trajectory().poses[-1]
    assert max(pose_errors(T, slam.graph.keyframe(0).T_wc)) <= 1e-6


def test_relocalisation_threshold_is_strict():
    pred = _revisit_predictor()
    pair = pred.predict(10, 0)
    fraction = match_pointmaps(pair.X_ii, pair.X_ji, pair.F_i, pair.F_j).valid_fraction
    for thr, expect_lost in ((fraction, True), (np.nextafter(fraction, 0), False)):
        slam = Slam(SlamConfig(reloc_fraction=thr), pred)
        for f in range(10):
            slam.process_frame(f)
        slam.lost = True
        slam.process_frame(10)
        assert slam.lost == expect_lost


def test_disjoint_scene_stays_lost():
    scene = make_scene(3)
    poses = make_trajectory("orbit", 30, 3)[:8]
    pred = _AlienPredictor(SyntheticPredictor(scene, poses), alien=7)
    slam = Slam(SlamConfig(), pred)
    for f in range(7):
        slam.process_frame(f)
    n_kf = len(slam.graph)
    slam.lost = True
    slam.process_frame(7)
    assert slam.lost and slam.stats["lost_frames"] == [7] and len(slam.graph) == n_kf
    assert 7 not in [int(round(t * 30)) for t in slam.trajectory().timestamps]


def test_stream_replay_matches_live_run(tmp_path):
    cfg = SlamConfig(seed=4, noise_depth=0.01, noise_scale=0.05)
    live = record(cfg, synthetic_predictor("loop", 16, cfg), tmp_path)
    replay = Slam(cfg, StreamPredictor(tmp_path))
    replay.run()
    assert [kf.frame for kf in live.graph.keyframes] == [kf.frame for kf in replay.graph.keyframes]
    assert [(e.i, e.j, e.loop) for e in live.graph.edges] == [(e.i, e.j, e.loop) for e in replay.graph.edges]
    a, b = live.trajectory(), replay.trajectory()
    assert all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(a.poses, b.poses))
    with pytest.raises(PredictorError):
        StreamPredictor(tmp_path).predict(0, 15)


def test_run_writes_outputs(tmp_path):
    cfg = SlamConfig()
    traj, cloud, report, _ = run(cfg, synthetic_predictor("orbit", 4, cfg), tmp_path)
    assert len(read_tum(tmp_path / "trajectory.txt")) == len(traj)
    assert json.loads((tmp_path / "report.json").read_text())["frames"] == 4
    assert (tmp_path / "map.ply").read_bytes().startswith(b"ply")


def test_recording_predictor_writes_stream(tmp_path):
    pred = synthetic_predictor("orbit", 3, SlamConfig())
    rec = RecordingPredictor(pred, tmp_path)
    rec.predict(1, 0)
    assert (tmp_path / "pair_000001_000000.bin").exists() and read_meta(tmp_path)["frames"] == 3
    assert np.array_equal(StreamPredictor(tmp_path).predict(1, 0).X_ii, pred.predict(1, 0).X_ii)


def test_noise_model_from_config():
    assert SlamConfig(noise_depth=0.1).noise == NoiseModel(depth_sigma=0.1)
