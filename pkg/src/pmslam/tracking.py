"""Frame-to-keyframe Sim(3) tracking and canonical pointmap fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie
from .camera import (FeatureMap, MatchSet, PinholeIntrinsics, _project, backproject_depth, match_pointmaps,
                     normalize_jacobian, sample_pointmap, smooth_patches, valid_points)
from .lie import Sim3

MIN_MATCHES = 12
MAX_ITERS = 20
STEP_TOL = 1e-6
COST_RTOL = 1e-12

MODES = ("ray", "point", "pixel")


class TrackingLost(RuntimeError):
    """Too few valid matches to estimate a pose."""


@dataclass
class RobustWeightParams:
    sigma2_ray: float = 1e-3
    sigma2_point: float = 1e-2
    sigma2_pixel: float = 4.0
    q_min: float | None = None  # None: q_min_frac times the median match confidence
    q_min_frac: float = 0.1
    huber: float = 1.345
    dist_weight: float = 0.01

    def __post_init__(self):
        if min(self.sigma2_ray, self.sigma2_point, self.sigma2_pixel, self.huber) <= 0:
            raise ValueError("variances and huber delta must be positive")
        if self.q_min is not None and self.q_min < 0:
            raise ValueError("q_min must be non-negative")

    def sigma2(self, mode):
        return {"ray": self.sigma2_ray, "point": self.sigma2_point, "pixel": self.sigma2_pixel}[mode]

    def resolve_q_min(self, q):
        if self.q_min is not None:
            return self.q_min
        q = np.asarray(q)
        return self.q_min_frac * float(np.median(q)) if q.size else 0.0


@dataclass
class Keyframe:
    id: int
    X: np.ndarray  # canonical pointmap (H, W, 3)
    C: np.ndarray  # canonical confidence (H, W)
    features: FeatureMap
    T_wc: Sim3
    frame: int = 0
    timestamp: float = 0.0
    signature: object = field(default=None, repr=False)

    @property
    def shape(self):
        return self.C.shape


def robust_weight(q, sigma2, q_min):
    """Weight denominator ``sigma2 / q`` for ``q > q_min``, otherwise ``inf``."""
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(q > q_min, sigma2 / np.where(q > 0, q, 1.0), np.inf)


def huber_weights(e, delta):
    a = np.abs(e)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def huber_cost(e, delta):
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def _information(q, sigma2, q_min, rel):
    """Per-row information (1 / weight denominator); excluded matches give exactly zero."""
    w = robust_weight(q, sigma2, q_min)
    info = np.where(np.isfinite(w), 1.0 / np.where(np.isfinite(w), w, 1.0), 0.0)
    return info[:, None] * np.asarray(rel, dtype=float)[None, :]


def ray_distance_residuals(T: Sim3, X_target, X_source, q, params: RobustWeightParams, q_min, dist_weight=None):
    """Ray and distance residuals of ``T * X_source`` against ``X_target`` (matched rows).

    Residuals are ``psi(T x) - psi(y)`` and ``|T x| - |y|``; Jacobians are with
    respect to a left perturbation of ``T``. Rows whose transformed point is at
    the origin get zero information.
    """
    dist_weight = params.dist_weight if dist_weight is None else dist_weight
    x = T.act(X_source)
    dx = np.linalg.norm(x, axis=-1)
    dy = np.linalg.norm(X_target, axis=-1)
    ok = (dx > 1e-12) & (dy > 1e-12)
    dxs = np.where(ok, dx, 1.0)
    dys = np.where(ok, dy, 1.0)
    r = np.zeros((len(x), 4))
    r[:, :3] = x / dxs[:, None] - X_target / dys[:, None]
    r[:, 3] = dx - dy
    J = np.zeros((len(x), 4, 7))
    J[:, :3, :3] = normalize_jacobian(np.where(ok[:, None], x, 1.0))
    J[:, :3, 3:6] = -lie.hat(x) / dxs[:, None, None]
    J[:, 3, :3] = x / dxs[:, None]
    J[:, 3, 6] = dx
    info = _information(q, params.sigma2_ray, q_min, [1.0, 1.0, 1.0, dist_weight])
    info[~ok] = 0.0
    r[~ok] = 0.0
    J[~ok] = 0.0
    return r, J, info


def point_residuals(T: Sim3, X_target, X_source, q, params: RobustWeightParams, q_min):
    x = T.act(X_source)
    r = x - X_target
    J = lie.point_jacobian(x)
    info = _information(q, params.sigma2_point, q_min, [1.0, 1.0, 1.0])
    return r, J, info


def pixel_depth_residuals(T: Sim3, pix_target, z_target, X_source, q, K: PinholeIntrinsics,
                          params: RobustWeightParams, q_min, dist_weight=None):
    """Pixel residual ``Pi(T x) - p`` and depth residual ``z(T x) - z``; points behind the camera are skipped."""
    dist_weight = params.dist_weight if dist_weight is None else dist_weight
    x = T.act(X_source)
    ok = x[:, 2] > 1e-9
    xs = np.where(ok[:, None], x, [0.0, 0.0, 1.0])
    p, Jp = _project(xs, K)
    Jx = lie.point_jacobian(xs)
    r = np.zeros((len(x), 3))
    r[:, :2] = p - pix_target
    r[:, 2] = xs[:, 2] - z_target
    J = np.zeros((len(x), 3, 7))
    J[:, :2] = Jp @ Jx
    J[:, 2] = Jx[:, 2]
    info = _information(q, params.sigma2_pixel, q_min, [1.0, 1.0, dist_weight])
    info[~ok] = 0.0
    r[~ok] = 0.0
    J[~ok] = 0.0
    return r, J, info


def normal_equations(r, J, info, delta):
    """Huber-reweighted ``(J^T W J, J^T W r)`` and the robust cost, summed over rows."""
    e = r * np.sqrt(info)
    w = info * huber_weights(e, delta)
    H = np.einsum("nki,nk,nkj->ij", J, w, J)
    g = np.einsum("nki,nk,nk->i", J, w, r)
    return H, g, float(huber_cost(e, delta).sum())


def robust_cost(r, info, delta):
    return float(huber_cost(r * np.sqrt(info), delta).sum())


def _solve(H, g):
    try:
        return np.linalg.solve(H, -g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, -g, rcond=None)[0]


def gauss_newton(residual_fn, T0: Sim3, delta, max_iters=MAX_ITERS, tol=STEP_TOL):
    """IRLS Gauss-Newton over one Sim(3) pose with left-plus updates.

    A step that raises the robust cost is retried at half length; a second
    consecutive increase rejects it and ends the solve.
    """
    T = T0
    r, J, info = residual_fn(T)
    H, g, cost = normal_equations(r, J, info, delta)
    trace = [cost]
    iters = 0
    converged = False
    for _ in range(max_iters):
        tau = _solve(H, g)
        iters += 1
        if np.linalg.norm(tau) < tol:
            # below tolerance: take it without a cost check, rounding noise could reject it
            T = lie.exp(tau) @ T
            trace.append(normal_equations(*residual_fn(T), delta)[2])
            converged = True
            break
        accepted = False
        for step in (tau, 0.5 * tau):
            T_new = lie.exp(step) @ T
            r_n, J_n, info_n = residual_fn(T_new)
            H_n, g_n, cost_n = normal_equations(r_n, J_n, info_n, delta)
            if cost_n <= cost * (1 + COST_RTOL) + 1e-300:
                accepted = True
                break
        if not accepted:
            break
        T, H, g, cost = T_new, H_n, g_n, cost_n
        trace.append(cost)
        if np.linalg.norm(step) < tol:
            converged = True
            break
    return T, {"iterations": iters, "cost_trace": trace, "converged": converged}


def calibrate_pointmap(X, K: PinholeIntrinsics):
    """Keep only the depth of a pointmap and backproject it along the known camera rays."""
    return backproject_depth(np.asarray(X)[..., 2], K)


def solve_pose(keyframe: Keyframe, prediction, init: Sim3 | None = None, mode: str = "ray",
               params: RobustWeightParams | None = None, K: PinholeIntrinsics | None = None,
               init_matches: MatchSet | None = None, matches: MatchSet | None = None, subpixel: bool = True):
    """Estimate ``T_kf`` (frame to keyframe) from a frame/keyframe prediction.

    ``prediction`` holds ``X_ii = X^f_f``, ``X_ji = X^k_f`` and the feature maps
    of the frame (``F_i``) and keyframe (``F_j``). Frame points are matched
    explicitly against the keyframe's canonical pointmap; with ``subpixel`` the
    frame point is read at the continuous matched pixel rather than the rounded one,
    and matches whose interpolation patch straddles a depth edge are left out.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "pixel" and K is None:
        raise ValueError("pixel mode needs intrinsics")
    params = params or RobustWeightParams()
    init = init or Sim3.identity()
    if matches is None:
        matches = match_pointmaps(prediction.X_ii, prediction.X_ji, prediction.F_i, prediction.F_j, init=init_matches)

    X_canon = keyframe.X if mode != "pixel" else calibrate_pointmap(keyframe.X, K)
    canon_ok = valid_points(X_canon).ravel()
    frame_ok = valid_points(prediction.X_ii).ravel()
    use = matches.valid & canon_ok[matches.idx_b] & frame_ok[matches.idx_a]
    if subpixel:
        # interpolating across a depth edge mixes two surfaces
        use &= smooth_patches(prediction.X_ii, matches.pixels_a())
    if np.count_nonzero(use) < MIN_MATCHES:
        raise TrackingLost(f"only {int(np.count_nonzero(use))} valid matches")

    m, n = matches.idx_a[use], matches.idx_b[use]
    q = matches.conf[use]
    q_min = params.resolve_q_min(q)
    if subpixel:
        X_src = sample_pointmap(prediction.X_ii, matches.pixels_a()[use])
    else:
        X_src = prediction.X_ii.reshape(-1, 3)[m]
    X_tgt = X_canon.reshape(-1, 3)[n]

    if mode == "ray":
        fn = lambda T: ray_distance_residuals(T, X_tgt, X_src, q, params, q_min)  # noqa: E731
    elif mode == "point":
        fn = lambda T: point_residuals(T, X_tgt, X_src, q, params, q_min)  # noqa: E731
    else:
        W = keyframe.shape[1]
        pix = np.stack([n % W, n // W], axis=-1).astype(float)
        z = X_tgt[:, 2]
        fn = lambda T: pixel_depth_residuals(T, pix, z, X_src, q, K, params, q_min)  # noqa: E731

    T, stats = gauss_newton(fn, init, params.huber)
    stats["n_valid"] = int(np.count_nonzero(use))
    stats["q_min"] = q_min
    return T, matches, stats


def fuse_canonical(keyframe: Keyframe, X_k_f, C, T_kf: Sim3) -> Keyframe:
    """Confidence-weighted running average of the keyframe pointmap (in place)."""
    X_k_f = np.asarray(X_k_f, dtype=float)
    C = np.where(valid_points(X_k_f), np.asarray(C, dtype=float), 0.0)
    obs = T_kf.act(X_k_f)
    total = keyframe.C + C
    upd = total > 0
    w_old = np.where(upd, keyframe.C / np.where(upd, total, 1.0), 1.0)
    w_new = np.where(upd, C / np.where(upd, total, 1.0), 0.0)
    keyframe.X = np.where(upd[..., None], w_old[..., None] * keyframe.X + w_new[..., None] * obs, keyframe.X)
    keyframe.C = total
    return keyframe


def keyframe_decision(matches: MatchSet, omega_k: float = 0.333) -> bool:
    """True when valid-match or distinct-pixel coverage falls below ``omega_k``."""
    return matches.valid_fraction < omega_k or matches.unique_fraction < omega_k
