"""Shared oracles and fixtures for the test suite."""

import numpy as np
from scipy.linalg import expm

from pmslam import lie
from pmslam.backend import Graph, _term_residuals, _terms
from pmslam.camera import match_pointmaps
from pmslam.synth import make_scene, make_trajectory, predict_pair
from pmslam.tracking import Keyframe, huber_weights


def sim3_generator(tau):
    """4x4 Lie-algebra matrix of a tangent (rho, omega, sigma)."""
    tau = np.asarray(tau, dtype=float)
    G = np.zeros((4, 4))
    G[:3, :3] = lie.hat(tau[3:6]) + tau[6] * np.eye(3)
    G[:3, 3] = tau[:3]
    return G


def expm_oracle(tau):
    """Group element by the matrix exponential, independent of the closed form."""
    return lie.Sim3.from_matrix(expm(sim3_generator(tau)))


def rodrigues(w):
    th = np.linalg.norm(w)
    if th == 0:
        return np.eye(3)
    k = w / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * Kx @ Kx


def pose_close(A, B):
    return max(np.abs(A.matrix() - B.matrix()).max(), 0.0)


def numeric_jacobian(f, x0, eps=1e-6):
    """Central differences of a vector function of a vector argument."""
    x0 = np.asarray(x0, dtype=float)
    f0 = np.asarray(f(x0), dtype=float)
    J = np.zeros(f0.shape + x0.shape)
    for k in range(x0.size):
        d = np.zeros_like(x0)
        d.flat[k] = eps
        J[..., k] = (np.asarray(f(x0 + d)) - np.asarray(f(x0 - d))) / (2 * eps)
    return J


def left_jacobian(residual, T, eps=1e-6):
    """d residual(Exp(tau) T) / d tau at tau = 0."""
    return numeric_jacobian(lambda tau: residual(lie.exp(tau) @ T), np.zeros(7), eps)


def rel_err(A, B):
    return np.abs(A - B).max() / max(np.abs(B).max(), 1e-12)


def pose_errors(T_est, T_true):
    """(rotation rad, translation, relative scale) errors."""
    E = T_est.inverse() @ T_true
    return (float(np.linalg.norm(lie.so3_log(E.R))), float(np.linalg.norm(T_est.t - T_true.t)),
            abs(T_est.s / T_true.s - 1.0))


def self_keyframe(scene, T, kf_id=0, resolution=(64, 48), noise=None, seed=0):
    kw = {} if noise is None else {"noise": noise, "seed": seed}
    p = predict_pair(scene, T, T, resolution=resolution, **kw)
    return Keyframe(kf_id, p.X_ii.copy(), p.C_i.copy(), p.F_i, T)


def pair_matches(scene, T_a, T_b, resolution=(64, 48)):
    p = predict_pair(scene, T_a, T_b, resolution=resolution)
    return match_pointmaps(p.X_ii, p.X_ji, p.F_i, p.F_j)


def chain_graph(scene, poses, resolution=(64, 48), loops=()):
    """Keyframes at exact poses, sequential edges plus the given loop edges."""
    g = Graph()
    for k, T in enumerate(poses):
        kf = self_keyframe(scene, T, k, resolution)
        if k == 0:
            g.add_keyframe(kf)
        else:
            g.add_keyframe(kf, pair_matches(scene, poses[k - 1], T, resolution),
                           pair_matches(scene, T, poses[k - 1], resolution))
    for i, j in loops:
        g.add_edge(i, j, pair_matches(scene, poses[i], poses[j], resolution),
                   pair_matches(scene, poses[j], poses[i], resolution), loop=True)
    return g


def loop_setup(n=20, seed=0, obstacles=0):
    scene = make_scene(seed, n_obstacles=obstacles)
    poses = make_trajectory("loop", n + 1, seed)[:n]
    return scene, poses


def drifted(poses, rng, sigma=0.01):
    """Chain the true relative motions with multiplicative noise (about 1% per step)."""
    est = [poses[0]]
    for k in range(1, len(poses)):
        rel = poses[k - 1].inverse() @ poses[k]
        n = rng.normal(size=7) * sigma
        n[:3] *= np.linalg.norm(rel.t)
        est.append(est[-1] @ (rel @ lie.exp(n)))
    return est


def position_rmse(g, poses):
    return float(np.sqrt(np.mean([np.sum((kf.T_wc.t - poses[kf.id].t) ** 2) for kf in g.keyframes])))


def dense_oracle(g, mode, P, K=None):
    """J^T W J and J^T W r from explicitly stacked full-width Jacobian rows."""
    N = len(g)
    pos = {kf.id: k for k, kf in enumerate(g.keyframes)}
    poses = g.poses()
    rows_J, rows_w, rows_r = [], [], []
    for term in _terms(g, mode, P, K):
        T_s, T_t = poses[term.src], poses[term.tgt]
        r, J, info = _term_residuals(term, T_t.inverse() @ T_s, mode, P, K, None)
        A = lie.adjoint(T_t.inverse())
        full = np.zeros(J.shape[:2] + (7 * N,))
        a, b = pos[term.src], pos[term.tgt]
        full[..., 7 * a:7 * a + 7] += J @ A
        full[..., 7 * b:7 * b + 7] -= J @ A
        w = info * huber_weights(r * np.sqrt(info), P.huber)
        rows_J.append(full.reshape(-1, 7 * N))
        rows_w.append(w.ravel())
        rows_r.append(r.ravel())
    J, w, r = np.concatenate(rows_J), np.concatenate(rows_w), np.concatenate(rows_r)
    return J.T @ (w[:, None] * J), J.T @ (w * r)


# status lines collected by the acceptance suite and echoed in the terminal summary
ACCEPTANCE_LINES = []
