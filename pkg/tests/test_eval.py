import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmslam import lie
from pmslam.eval import (AlignmentError, Trajectory, align_sim3, associate, ate_rmse, cloud_metrics, read_ply,
                         read_tum, umeyama, write_ply, write_tum)
from pmslam.lie import Sim3


def brute_metrics(est, ref, max_dist=0.5):
    """Accuracy, completion and Chamfer by an explicit double loop."""
    def one_way(a, b):
        d = [min(max_dist, min(float(np.sqrt(np.sum((p - q) ** 2))) for q in b)) for p in a]
        return float(np.sqrt(np.mean(np.square(d))))
    acc, comp = one_way(est, ref), one_way(ref, est)
    return acc, comp, 0.5 * (acc + comp)


def random_traj(rng, n=50):
    poses = [Sim3(lie.so3_exp(rng.normal(size=3)), rng.normal(size=3)) for _ in range(n)]
    return Trajectory(np.arange(n) * 0.1, poses)


def test_associate_window():
    i, j = associate([0.0, 1.0, 2.0, 3.05], [0.01, 1.019, 2.5, 3.0])
    assert i.tolist() == [0, 1] and j.tolist() == [0, 1]


def test_alignment_recovers_known_transform():
    rng = np.random.default_rng(0)
    ref = random_traj(rng)
    G = lie.random_sim3(rng)
    est = ref.transformed(G)
    A = align_sim3(est, ref)
    assert np.abs(A.matrix() - G.inverse().matrix()).max() <= 1e-9
    assert np.abs(align_sim3(ref, ref).matrix() - np.eye(4)).max() <= 1e-12


def test_umeyama_reflection_guard():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(20, 3))
    dst = src * [1, 1, -1]
    assert np.linalg.det(umeyama(src, dst).R) == pytest.approx(1.0)


def test_alignment_errors():
    line = Trajectory(np.arange(10.0), [Sim3(t=[k, 2 * k, 0]) for k in range(10)])
    with pytest.raises(AlignmentError):
        align_sim3(line, line)
    rng = np.random.default_rng(2)
    ref = random_traj(rng)
    shifted = Trajectory(ref.timestamps + 5.0, ref.poses)
    with pytest.raises(AlignmentError):
        ate_rmse(shifted, ref)


def test_ate_trivial_cases():
    rng = np.random.default_rng(3)
    ref = random_traj(rng)
    assert ate_rmse(ref, ref) <= 1e-12
    scaled = Trajectory(ref.timestamps, [Sim3(T.R, 5 * T.t) for T in ref.poses])
    assert ate_rmse(scaled, ref) <= 1e-12


def test_ate_monte_carlo():
    rng = np.random.default_rng(4)
    ref = random_traj(rng, 1000)
    # sigma is the RMS 3D displacement, so each axis gets sigma / sqrt(3)
    sigma = 0.01 / np.sqrt(3)
    noisy = Trajectory(ref.timestamps, [Sim3(T.R, T.t + rng.normal(scale=sigma, size=3)) for T in ref.poses])
    assert 0.008 <= ate_rmse(noisy, ref) <= 0.012


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ate_invariant_to_pretransform(seed):
    rng = np.random.default_rng(seed)
    ref = random_traj(rng, 30)
    est = Trajectory(ref.timestamps, [Sim3(T.R, T.t + rng.normal(scale=0.05, size=3)) for T in ref.poses])
    G = lie.random_sim3(rng)
    assert abs(ate_rmse(est.transformed(G), ref) - ate_rmse(est, ref)) <= 1e-9


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [Sim3(), Sim3()])
    with pytest.raises(ValueError):
        Trajectory([0.0], [Sim3(), Sim3()])


def test_cloud_metrics_examples():
    g = np.stack(np.meshgrid(*[np.arange(5) * 0.5] * 3, indexing="ij"), -1).reshape(-1, 3)
    m = cloud_metrics(g, g)
    assert (m.accuracy, m.completion, m.chamfer) == (0.0, 0.0, 0.0)
    m = cloud_metrics(g + [0.1, 0, 0], g)
    assert m.accuracy == pytest.approx(0.1, abs=1e-12) and m.completion == pytest.approx(0.1, abs=1e-12)
    m = cloud_metrics(g + 10.0, g)
    assert m.accuracy == 0.5 and m.completion == 0.5
    with pytest.raises(ValueError):
        cloud_metrics(np.zeros((0, 3)), g)


def test_cloud_metrics_brute_force_and_symmetry():
    rng = np.random.default_rng(5)
    a = rng.uniform(-1, 1, (500, 3))
    b = a[:400] + rng.normal(scale=0.2, size=(400, 3))
    m = cloud_metrics(a, b)
    acc, comp, ch = brute_metrics(a, b)
    assert abs(m.accuracy - acc) <= 1e-9 and abs(m.completion - comp) <= 1e-9 and abs(m.chamfer - ch) <= 1e-9
    s = cloud_metrics(b, a)
    assert s.accuracy == m.completion and s.completion == m.accuracy
    kd, bf = cloud_metrics(a, b), cloud_metrics(a, b, method="brute")
    assert abs(kd.chamfer - bf.chamfer) <= 1e-12


def test_tum_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    traj = random_traj(rng, 20)
    path = tmp_path / "t.txt"
    write_tum(path, traj)
    back = read_tum(path)
    assert np.allclose(back.timestamps, traj.timestamps, atol=1e-6)
    for a, b in zip(back.poses, traj.poses):
        assert np.abs(a.R - b.R).max() < 1e-8 and np.abs(a.t - b.t).max() < 1e-8
    (tmp_path / "c.txt").write_text("# comment\n\n0.0 0 0 0 0 0 0 1\n1.0,1,0,0,0,0,0,1\n")
    assert len(read_tum(tmp_path / "c.txt")) == 2
    (tmp_path / "bad.txt").write_text("0.0 1 2 3\n")
    with pytest.raises(ValueError):
        read_tum(tmp_path / "bad.txt")


@pytest.mark.parametrize("binary", [True, False])
@pytest.mark.parametrize("with_color", [True, False])
def test_ply_roundtrip(tmp_path, binary, with_color):
    rng = np.random.default_rng(7)
    P = rng.normal(size=(50, 3)).astype(np.float32)
    C = rng.integers(0, 256, (50, 3)) if with_color else None
    write_ply(tmp_path / "m.ply", P, C, binary=binary)
    Q, D = read_ply(tmp_path / "m.ply")
    assert np.array_equal(Q, P.astype(np.float64))
    assert (D is None) == (not with_color)
    if with_color:
        assert np.array_equal(D, C.astype(np.uint8))
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    with pytest.raises(ValueError):
        read_ply(tmp_path / "x.ply")
