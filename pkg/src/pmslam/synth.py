"""Synthetic scenes, trajectories and two-view predictions.

The renderer ray-casts a closed box room containing a few box obstacles, so
every pixel hits a surface and occlusion is exact. Cameras are pinhole with
``x`` right, ``y`` down, ``z`` forward. A prediction pair mimics the output
convention of a two-view network: both pointmaps are expressed in the first
camera's frame and share one global scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import FeatureMap, MatchSet, PinholeIntrinsics
from .lie import Sim3, so3_exp

DEFAULT_RESOLUTION = (64, 48)
MATCHING_RESOLUTION = (128, 96)


class EmptyViewError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple


@dataclass
class SyntheticScene:
    room: Box
    obstacles: list
    freqs: np.ndarray  # (d, 3) descriptor field frequencies
    phases: np.ndarray  # (d,)
    seed: int = 0

    @property
    def desc_dim(self) -> int:
        return len(self.phases)

    def descriptors(self, P):
        """Unit descriptors of world points, shape (..., d)."""
        D = np.cos(np.asarray(P) @ self.freqs.T + self.phases)
        return D / np.linalg.norm(D, axis=-1, keepdims=True)

    def cast(self, origin, dirs):
        """Ray parameter of the first surface hit along ``origin + t * dirs``."""
        o = np.asarray(origin, dtype=float)
        d = np.asarray(dirs, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            lo = np.asarray(self.room.lo)
            hi = np.asarray(self.room.hi)
            t_room = np.where(d > 0, (hi - o) * inv, np.where(d < 0, (lo - o) * inv, np.inf)).min(axis=-1)
            # the room is seen from inside only
            inside = np.all((o > lo) & (o < hi))
            t = t_room if inside else np.full(d.shape[:-1], np.inf)
            for box in self.obstacles:
                t1 = (np.asarray(box.lo) - o) * inv
                t2 = (np.asarray(box.hi) - o) * inv
                near = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf).max(axis=-1)
                far = np.nan_to_num(np.maximum(t1, t2), nan=np.inf).min(axis=-1)
                hit = (near > 0) & (near <= far)
                t = np.where(hit & (near < t), near, t)
        return t


def make_scene(seed: int = 0, desc_dim: int = 16, room_scale: float = 1.0, wavelength: float = 0.8,
               n_obstacles: int = 3) -> SyntheticScene:
    """Box room with ``n_obstacles`` floor-standing boxes (none: a convex, occlusion-free scene)."""
    rng = np.random.default_rng(seed)
    half = np.array([2.5, 1.5, 2.5]) * room_scale
    room = Box(tuple(-half), tuple(half))
    obstacles = []
    for k in range(n_obstacles):
        ang = 2 * np.pi * (k + rng.uniform(0.1, 0.9)) / n_obstacles
        r = rng.uniform(1.7, 2.0) * room_scale
        a, b = rng.uniform(0.2, 0.35, size=2) * room_scale
        h = rng.uniform(0.8, 1.6) * room_scale
        cx, cz = r * np.cos(ang), r * np.sin(ang)
        # stands on the floor (y points down)
        obstacles.append(Box((cx - a, half[1] - h, cz - b), (cx + a, half[1], cz + b)))
    freqs = rng.normal(scale=2 * np.pi / (wavelength * room_scale), size=(desc_dim, 3))
    phases = rng.uniform(0, 2 * np.pi, size=desc_dim)
    return SyntheticScene(room, obstacles, freqs, phases, seed)


def intrinsics_for(resolution) -> PinholeIntrinsics:
    W, H = resolution
    f = 0.8 * W
    return PinholeIntrinsics(f, f, (W - 1) / 2.0, (H - 1) / 2.0)


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> Sim3:
    """Camera-to-world pose looking from ``center`` towards ``target``."""
    z = np.asarray(target, dtype=float) - np.asarray(center, dtype=float)
    z /= np.linalg.norm(z)
    x = np.cross(down, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Sim3(np.stack([x, y, z], axis=1), center, 1.0)


def make_trajectory(kind: str, n_frames: int, seed: int = 0) -> list:
    """Ground-truth camera-to-world poses for a synthetic sequence."""
    if n_frames < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    radius = rng.uniform(0.7, 0.9)
    height = rng.uniform(-0.15, 0.15)
    s = np.linspace(0.0, 1.0, n_frames)
    poses = []
    if kind in ("orbit", "loop"):
        sweep = 2 * np.pi if kind == "loop" else 2 * np.pi / 3
        wobble = rng.uniform(0.05, 0.1)
        for a in phase + sweep * s:
            c = np.array([radius * np.cos(a), height + wobble * np.sin(2 * a), radius * np.sin(a)])
            # look across the room, slightly ahead of the radial direction
            tgt = -2.0 * np.array([np.cos(a + 0.3), 0.0, np.sin(a + 0.3)])
            poses.append(look_at(c, tgt))
    elif kind == "pure_rotation":
        c = rng.uniform(-0.3, 0.3, size=3)
        for a in phase + (np.pi / 2) * s:
            poses.append(look_at(c, c + np.array([np.cos(a), 0.1, np.sin(a)])))
    elif kind == "zoom_like":
        direction = np.array([np.cos(phase), 0.0, np.sin(phase)])
        for k in s:
            c = direction * (-0.6 + 1.2 * k) + np.array([0.0, height, 0.0])
            poses.append(look_at(c, c + direction))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return poses


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0  # relative
    outlier_frac: float = 0.0
    outlier_mag: float = 1.0  # outlier depth factor is 1 +/- mag * U(0.5, 1)
    scale_sigma: float = 0.0  # log-scale jitter per pair
    conf_from_error: bool = True

    def __post_init__(self):
        if min(self.depth_sigma, self.outlier_frac, self.outlier_mag, self.scale_sigma) < 0:
            raise ValueError("noise parameters must be non-negative")


@dataclass
class PredictionPair:
    X_ii: np.ndarray
    X_ji: np.ndarray
    C_i: np.ndarray
    C_j: np.ndarray
    F_i: FeatureMap
    F_j: FeatureMap
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.X_ii.shape[:2]


def render(scene: SyntheticScene, T_wc: Sim3, resolution=DEFAULT_RESOLUTION):
    """Camera-frame surface points (H, W, 3) and the matching world points."""
    W, H = resolution
    K = intrinsics_for(resolution)
    v, u = np.mgrid[0:H, 0:W].astype(float)
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    d_w = d_cam @ T_wc.R.T
    t = scene.cast(T_wc.t, d_w)
    if not np.isfinite(t).any():
        raise EmptyViewError("view sees no surface")
    P_c = d_cam * t[..., None]
    return P_c, T_wc.act(P_c)


def _perturb(P, rng, noise: NoiseModel):
    """Multiplicative depth noise along camera rays; returns noisy points and relative error."""
    H, W = P.shape[:2]
    factor = np.ones((H, W))
    if noise.depth_sigma > 0:
        factor = factor + rng.normal(scale=noise.depth_sigma, size=(H, W))
    if noise.outlier_frac > 0:
        mask = rng.random((H, W)) < noise.outlier_frac
        sign = np.where(rng.random((H, W)) < 0.5, -0.5, 1.0)
        gross = 1.0 + sign * noise.outlier_mag * rng.uniform(0.5, 1.0, size=(H, W))
        factor = np.where(mask, gross, factor)
    factor = np.maximum(factor, 0.05)
    return P * factor[..., None], np.abs(factor - 1.0)


def predict_pair(scene: SyntheticScene, T_wi: Sim3, T_wj: Sim3, noise: NoiseModel = NoiseModel(),
                 resolution=DEFAULT_RESOLUTION, seed=0) -> PredictionPair:
    """Simulated two-view prediction with both pointmaps in frame i."""
    rng = np.random.default_rng(seed)
    P_i, W_i = render(scene, T_wi, resolution)
    P_j, W_j = render(scene, T_wj, resolution)
    scale = float(np.exp(rng.normal(scale=noise.scale_sigma))) if noise.scale_sigma > 0 else 1.0
    N_i, e_i = _perturb(P_i, rng, noise)
    N_j, e_j = _perturb(P_j, rng, noise)
    same = np.array_equal(T_wi.matrix(), T_wj.matrix())
    X_ii = scale * N_i
    X_ji = scale * (N_j if same else (T_wi.inverse() @ T_wj).act(N_j))
    if noise.conf_from_error:
        C_i, C_j = 1.0 / (1.0 + e_i), 1.0 / (1.0 + e_j)
    else:
        C_i, C_j = np.ones(e_i.shape), np.ones(e_j.shape)
    F_i = FeatureMap(scene.descriptors(W_i), C_i.copy())
    F_j = FeatureMap(scene.descriptors(W_j), C_j.copy())
    return PredictionPair(X_ii, X_ji, C_i, C_j, F_i, F_j, scale)


def project_to_view(scene: SyntheticScene, T_wi: Sim3, P_w, resolution=DEFAULT_RESOLUTION):
    """Continuous pixels of world points in view i and their visibility (in front, in bounds, unoccluded)."""
    W, H = resolution
    K = intrinsics_for(resolution)
    q = T_wi.inverse().act(P_w)
    z = q[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    p = np.stack([K.fx * q[..., 0] / zs + K.cx, K.fy * q[..., 1] / zs + K.cy], axis=-1)
    inside = front & (p[..., 0] > -0.5) & (p[..., 0] < W - 0.5) & (p[..., 1] > -0.5) & (p[..., 1] < H - 0.5)
    d_w = (q / zs[..., None]) @ T_wi.R.T
    t = scene.cast(T_wi.t, d_w)
    unoccluded = t >= z * (1.0 - 1e-6)
    return p, inside & unoccluded


def ground_truth_matches(scene: SyntheticScene, T_wi: Sim3, T_wj: Sim3, resolution=DEFAULT_RESOLUTION) -> MatchSet:
    """Exact correspondences of every pixel of view j into view i, occluded pixels invalid."""
    W, H = resolution
    _, P_w = render(scene, T_wj, resolution)
    p, vis = project_to_view(scene, T_wi, P_w.reshape(-1, 3), resolution)
    u = np.clip(np.rint(p[:, 0]).astype(int), 0, W - 1)
    v = np.clip(np.rint(p[:, 1]).astype(int), 0, H - 1)
    n = H * W
    return MatchSet(v * W + u, np.arange(n), np.ones(n), vis, (H, W), (H, W))


def random_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    return so3_exp(axis / np.linalg.norm(axis) * rng.uniform(0, max_angle))


def training_descriptors(scene: SyntheticScene, n_views=8, resolution=DEFAULT_RESOLUTION, seed=0) -> np.ndarray:
    """Descriptors seen from random viewpoints inside the room, for codebook training."""
    rng = np.random.default_rng(seed)
    half = np.asarray(scene.room.hi)
    out = []
    for _ in range(n_views):
        c = rng.uniform(-0.3, 0.3, size=3) * half
        a = rng.uniform(0, 2 * np.pi)
        T = look_at(c, c + np.array([np.cos(a), rng.uniform(-0.3, 0.3), np.sin(a)]))
        _, P = render(scene, T, resolution)
        out.append(scene.descriptors(P).reshape(-1, scene.desc_dim))
    return np.concatenate(out)
