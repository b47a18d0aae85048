"""Generic central-camera geometry and projective pointmap matching.

Pointmaps are ``(H, W, 3)`` float arrays; a pixel whose point is (numerically)
the camera centre is invalid, and invalid pixels are stored as zeros.
Pixel coordinates are ``(u, v) = (column, row)``; flat pixel indices are
``v * W + u``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_NORM = 1e-12

# Levenberg-Marquardt settings for iterative projection.
LM_LAMBDA0 = 1e-4
LM_UP = 10.0
LM_DOWN = 0.3
LM_TOL = 1e-5
LM_MAX_ITERS = 10
POLISH_STEPS = 2

INVALID_DIST_FRAC = 0.1
EDGE_FACTOR = 4.0
REFINE_LEVELS = ((2, 2), (1, 2))  # (stride, radius) per level, coarse to fine


class BehindCameraError(ValueError):
    pass


@dataclass
class RayMap:
    rays: np.ndarray  # (H, W, 3) unit vectors, zero where invalid
    dist: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.dist.shape


@dataclass
class FeatureMap:
    desc: np.ndarray  # (H, W, d)
    conf: np.ndarray  # (H, W)

    @property
    def shape(self):
        return self.conf.shape


@dataclass
class MatchSet:
    """One candidate match per pixel ``n`` of frame b into pixel ``idx_a[n]`` of frame a."""

    idx_a: np.ndarray  # (N,) int flat pixel index in frame a
    idx_b: np.ndarray  # (N,) int flat pixel index in frame b
    conf: np.ndarray  # (N,) q_mn
    valid: np.ndarray  # (N,) bool
    shape_a: tuple
    shape_b: tuple
    iterations: np.ndarray | None = field(default=None, repr=False)
    pix_a: np.ndarray | None = field(default=None, repr=False)  # (N, 2) continuous (u, v) in frame a

    def __len__(self):
        return len(self.idx_b)

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    @property
    def valid_fraction(self) -> float:
        return self.n_valid / (self.shape_b[0] * self.shape_b[1])

    @property
    def unique_fraction(self) -> float:
        """Distinct frame-a pixels hit by valid matches, over the pixel count."""
        return len(np.unique(self.idx_a[self.valid])) / (self.shape_b[0] * self.shape_b[1])

    def pixels_a(self, subpixel=True) -> np.ndarray:
        """Matched frame-a pixels as float (u, v)."""
        if subpixel and self.pix_a is not None:
            return self.pix_a.copy()
        W = self.shape_a[1]
        return np.stack([self.idx_a % W, self.idx_a // W], axis=-1).astype(float)

    @classmethod
    def identity(cls, shape, conf=None) -> "MatchSet":
        n = shape[0] * shape[1]
        idx = np.arange(n)
        conf = np.ones(n) if conf is None else np.asarray(conf, dtype=float).ravel()
        return cls(idx.copy(), idx, conf, np.ones(n, dtype=bool), tuple(shape), tuple(shape))


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def parse(cls, text: str) -> "PinholeIntrinsics":
        fx, fy, cx, cy = (float(v) for v in text.split(","))
        return cls(fx, fy, cx, cy)


def valid_points(pm) -> np.ndarray:
    pm = np.asarray(pm)
    return np.all(np.isfinite(pm), axis=-1) & (np.linalg.norm(np.nan_to_num(pm), axis=-1) >= MIN_NORM)


def normalize_rays(pm) -> RayMap:
    pm = np.asarray(pm, dtype=float)
    valid = valid_points(pm)
    safe = np.where(valid[..., None], pm, 0.0)
    dist = np.linalg.norm(safe, axis=-1)
    rays = np.zeros_like(safe)
    rays[valid] = safe[valid] / dist[valid][:, None]
    return RayMap(rays, np.where(valid, dist, 0.0), valid)


def ray_error(psi1, psi2):
    """Squared distance between unit rays, equal to ``2 (1 - cos theta)``."""
    d = np.asarray(psi1) - np.asarray(psi2)
    return np.sum(d * d, axis=-1)


def normalize_jacobian(x):
    """d(x/|x|)/dx = (I - x x^T / |x|^2) / |x| for points of shape (..., 3)."""
    x = np.asarray(x, dtype=float)
    d = np.linalg.norm(x, axis=-1)[..., None, None]
    return (np.eye(3) - x[..., :, None] * x[..., None, :] / d**2) / d


def _sample_rays(rays, p):
    """Bilinearly interpolated, renormalized rays at pixels p and their pixel Jacobians."""
    H, W = rays.shape[:2]
    u, v = p[:, 0], p[:, 1]
    u0 = np.clip(np.floor(u), 0, W - 2).astype(int)
    v0 = np.clip(np.floor(v), 0, H - 2).astype(int)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    r00 = rays[v0, u0]
    r01 = rays[v0, u0 + 1]
    r10 = rays[v0 + 1, u0]
    r11 = rays[v0 + 1, u0 + 1]
    r = (1 - fu) * (1 - fv) * r00 + fu * (1 - fv) * r01 + (1 - fu) * fv * r10 + fu * fv * r11
    dr_du = (1 - fv) * (r01 - r00) + fv * (r11 - r10)
    dr_dv = (1 - fu) * (r10 - r00) + fu * (r11 - r01)
    n = np.linalg.norm(r, axis=-1)
    ok = n > MIN_NORM
    n_safe = np.where(ok, n, 1.0)[:, None]
    psi = r / n_safe
    proj = (np.eye(3) - psi[:, :, None] * psi[:, None, :]) / n_safe[:, :, None]
    J = proj @ np.stack([dr_du, dr_dv], axis=-1)
    return psi, J, ok


def iterative_project(rays: RayMap | np.ndarray, x, p0, max_iters=LM_MAX_ITERS, tol=LM_TOL):
    """Project points into a generic camera given by its ray field.

    Each point is handled independently: Levenberg-Marquardt over continuous
    pixel coordinates minimises ``|psi(rays at p) - psi(x)|^2``. Iterates are
    clamped to the image. Returns ``(p, converged, iterations)``.
    """
    R = rays.rays if isinstance(rays, RayMap) else np.asarray(rays, dtype=float)
    H, W = R.shape[:2]
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_2d(np.asarray(p0, dtype=float)).copy()
    lo = np.zeros(2)
    hi = np.array([W - 1.0, H - 1.0])
    p = np.clip(p, lo, hi)

    xn = np.linalg.norm(x, axis=-1)
    ok_x = xn > MIN_NORM
    target = x / np.where(ok_x, xn, 1.0)[:, None]

    n = len(x)
    lam = np.full(n, LM_LAMBDA0)
    iters = np.zeros(n, dtype=int)
    psi, J, ok = _sample_rays(R, p)
    err = psi - target
    cost = np.sum(err * err, axis=-1)
    active = ok_x & ok & (np.sqrt(cost) >= tol)
    converged = ok_x & ok & ~active

    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ja, ea = J[idx], err[idx]
        JtJ = np.einsum("nki,nkj->nij", Ja, Ja)
        g = np.einsum("nki,nk->ni", Ja, ea)
        A = JtJ + lam[idx, None, None] * (JtJ * np.eye(2)) + 1e-18 * np.eye(2)
        delta = -np.linalg.solve(A, g[..., None])[..., 0]
        p_new = np.clip(p[idx] + delta, lo, hi)
        psi_n, J_n, ok_n = _sample_rays(R, p_new)
        err_n = psi_n - target[idx]
        cost_n = np.sum(err_n * err_n, axis=-1)
        better = ok_n & (cost_n < cost[idx])
        iters[idx] += 1

        acc = idx[better]
        p[acc] = p_new[better]
        J[acc] = J_n[better]
        err[acc] = err_n[better]
        cost[acc] = cost_n[better]
        lam[acc] *= LM_DOWN
        lam[idx[~better]] *= LM_UP

        done = acc[np.sqrt(cost[acc]) < tol]
        converged[done] = True
        active[done] = False

    # Polish converged points past the tolerance; these steps are not counted.
    for _ in range(POLISH_STEPS):
        idx = np.flatnonzero(converged & (cost > 0))
        if idx.size == 0:
            break
        Ja, ea = J[idx], err[idx]
        JtJ = np.einsum("nki,nkj->nij", Ja, Ja) + 1e-18 * np.eye(2)
        delta = -np.linalg.solve(JtJ, np.einsum("nki,nk->ni", Ja, ea)[..., None])[..., 0]
        p_new = np.clip(p[idx] + delta, lo, hi)
        psi_n, J_n, ok_n = _sample_rays(R, p_new)
        err_n = psi_n - target[idx]
        cost_n = np.sum(err_n * err_n, axis=-1)
        better = ok_n & (cost_n < cost[idx])
        acc = idx[better]
        p[acc], J[acc], err[acc], cost[acc] = p_new[better], J_n[better], err_n[better], cost_n[better]
    return p, converged, iters


def _pixel_grid(shape):
    H, W = shape
    v, u = np.mgrid[0:H, 0:W]
    return np.stack([u.ravel(), v.ravel()], axis=-1).astype(float)


def _rounded_index(p, shape):
    H, W = shape
    u = np.clip(np.rint(p[:, 0]).astype(int), 0, W - 1)
    v = np.clip(np.rint(p[:, 1]).astype(int), 0, H - 1)
    return v * W + u


def match_confidence(Q_a, Q_b, idx_a, idx_b):
    return np.sqrt(np.ravel(Q_a)[idx_a] * np.ravel(Q_b)[idx_b])


def sample_pointmap(X, p):
    """Points at float pixels.

    The direction is the interpolated, renormalized unit ray; the distance puts
    the point on the plane of the local bilinear patch (exact for planar
    surfaces), falling back to the patch point's norm when that is ill-posed.
    Integer pixels return the stored points.
    """
    X = np.asarray(X, dtype=float)
    rm = normalize_rays(X)
    p = np.asarray(p, dtype=float)
    exact = np.all(p == np.rint(p), axis=-1)
    psi, _, ok = _sample_rays(rm.rays, p)
    H, W = rm.shape
    u0 = np.clip(np.floor(p[:, 0]), 0, W - 2).astype(int)
    v0 = np.clip(np.floor(p[:, 1]), 0, H - 2).astype(int)
    fu = np.clip(p[:, 0] - u0, 0, 1)[:, None]
    fv = np.clip(p[:, 1] - v0, 0, 1)[:, None]
    x00, x01, x10, x11 = X[v0, u0], X[v0, u0 + 1], X[v0 + 1, u0], X[v0 + 1, u0 + 1]
    P = (1 - fu) * (1 - fv) * x00 + fu * (1 - fv) * x01 + (1 - fu) * fv * x10 + fu * fv * x11
    n = np.cross((1 - fv) * (x01 - x00) + fv * (x11 - x10), (1 - fu) * (x10 - x00) + fu * (x11 - x01))
    denom = np.einsum("ij,ij->i", n, psi)
    d_patch = np.linalg.norm(P, axis=-1)
    well = np.abs(denom) > 1e-6 * np.linalg.norm(n, axis=-1) * np.maximum(d_patch, MIN_NORM)
    d = np.where(well, np.einsum("ij,ij->i", n, P) / np.where(well, denom, 1.0), d_patch)
    d = np.where((d > 0.5 * d_patch) & (d < 2.0 * d_patch), d, d_patch)
    out = psi * d[:, None]
    out[~ok] = 0.0
    if exact.any():
        H, W = rm.shape
        pi = np.rint(p[exact]).astype(int)
        out[exact] = np.asarray(X, dtype=float)[np.clip(pi[:, 1], 0, H - 1), np.clip(pi[:, 0], 0, W - 1)]
    return out


def smooth_patches(X, p, factor=EDGE_FACTOR):
    """True where the bilinear patch around each float pixel lies on a smooth surface.

    A pixel is an edge pixel when the relative second difference of distance
    along either image axis exceeds ``factor`` times its median over the map
    (so the test adapts to the noise level); a patch is smooth when none of its
    four corners is an edge pixel.
    """
    rm = normalize_rays(X)
    d = np.where(rm.valid, rm.dist, np.nan)
    H, W = d.shape
    r_u = np.full((H, W), np.nan)
    r_v = np.full((H, W), np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        if W >= 3:
            r_u[:, 1:-1] = np.abs(d[:, :-2] - 2 * d[:, 1:-1] + d[:, 2:]) / d[:, 1:-1]
        if H >= 3:
            r_v[1:-1, :] = np.abs(d[:-2, :] - 2 * d[1:-1, :] + d[2:, :]) / d[1:-1, :]
        both = np.concatenate([r_u.ravel(), r_v.ravel()])
        both = both[np.isfinite(both)]
        kappa = factor * max(float(np.median(both)), 1e-12) if both.size else np.inf
        edge = ~rm.valid | (r_u > kappa) | (r_v > kappa)
    p = np.asarray(p, dtype=float)
    u0 = np.clip(np.floor(p[:, 0]), 0, max(W - 2, 0)).astype(int)
    v0 = np.clip(np.floor(p[:, 1]), 0, max(H - 2, 0)).astype(int)
    u1, v1 = np.minimum(u0 + 1, W - 1), np.minimum(v0 + 1, H - 1)
    return ~(edge[v0, u0] | edge[v0, u1] | edge[v1, u0] | edge[v1, u1])


def match_pointmaps(X_a, X_b_in_a, F_a: FeatureMap | None = None, F_b: FeatureMap | None = None,
                    init: MatchSet | None = None, refine: bool = True,
                    dist_frac: float = INVALID_DIST_FRAC) -> MatchSet:
    """Match every pixel of frame b into frame a by iterative projection.

    Both pointmaps must be expressed in frame a's coordinates. Matches whose 3D
    endpoints are further apart than ``dist_frac`` times the median scene
    distance of ``X_a`` are flagged invalid. With feature maps given, ``conf``
    holds ``sqrt(Q_a[m] Q_b[n])`` and (optionally) matches are feature-refined.
    """
    X_a = np.asarray(X_a, dtype=float)
    X_b = np.asarray(X_b_in_a, dtype=float)
    shape_a, shape_b = X_a.shape[:2], X_b.shape[:2]
    rays_a = normalize_rays(X_a)
    x = X_b.reshape(-1, 3)
    valid_b = valid_points(X_b).ravel()

    if init is None:
        p0 = _pixel_grid(shape_b)
        if shape_a != shape_b:
            p0 = p0 * [(shape_a[1] - 1) / max(shape_b[1] - 1, 1), (shape_a[0] - 1) / max(shape_b[0] - 1, 1)]
    else:
        p0 = init.pixels_a()

    p, converged, iters = iterative_project(rays_a, x, p0)
    d_scene = np.median(rays_a.dist[rays_a.valid]) if rays_a.valid.any() else 0.0
    limit = dist_frac * d_scene

    def close(pix):
        gap = np.linalg.norm(sample_pointmap(X_a, pix) - x, axis=-1)
        return rays_a.valid.ravel()[_rounded_index(pix, shape_a)] & (gap <= limit)

    # refinement may move a match but never revives one the geometry rejected
    valid = valid_b & converged & close(p)
    idx_b = np.arange(x.shape[0])
    matches = MatchSet(_rounded_index(p, shape_a), idx_b, np.ones(len(idx_b)), valid, shape_a, shape_b, iters, p)

    if F_a is not None and F_b is not None:
        if refine:
            matches = feature_refine(matches, F_a, F_b)
            matches.valid &= close(matches.pix_a)
        matches.conf = match_confidence(F_a.conf, F_b.conf, matches.idx_a, matches.idx_b)
    return matches


def _refine_offsets(stride, radius):
    r = np.arange(-radius, radius + 1) * stride
    dv, du = np.meshgrid(r, r, indexing="ij")
    off = np.stack([du.ravel(), dv.ravel()], axis=-1)
    # Centre first, then by distance: np.argmax keeps the earliest of tied maxima.
    order = np.lexsort((np.arange(len(off)), np.abs(off).sum(-1)))
    return off[order]


def _corner_weights(p, shape):
    """Top-left bilinear corner index and the four corner weights of float pixels (..., 2)."""
    H, W = shape
    u = np.clip(p[..., 0], 0, W - 1)
    v = np.clip(p[..., 1], 0, H - 1)
    u0 = np.clip(np.floor(u), 0, W - 2).astype(np.intp)
    v0 = np.clip(np.floor(v), 0, H - 2).astype(np.intp)
    fu, fv = u - u0, v - v0
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1)
    return v0 * W + u0, w


# corner pairs (00, 01, 10, 11 order) of the 2x2 Gram terms; off-diagonal terms count twice
_GRAM_PAIRS = np.array([(0, 0), (1, 1), (2, 2), (3, 3), (0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
_GRAM_MULT = np.array([1.0, 1, 1, 1, 2, 2, 2, 2, 2, 2])


def _neighbour_gram(desc):
    """Per pixel: dot products among the four descriptors of the 2x2 block whose top-left it is."""
    H, W, d = desc.shape
    D = np.concatenate([desc.reshape(-1, d), np.zeros((W + 1, d))])
    n = H * W
    c = [D[:n], D[1:n + 1], D[W:n + W], D[W + 1:n + W + 1]]
    return np.stack([np.einsum("nd,nd->n", c[a], c[b]) for a, b in _GRAM_PAIRS], axis=-1)


def _refine_scores(S, gram, cand, shape, rows):
    """Cosine of interpolated, renormalized frame-a descriptors at ``cand`` (n, K, 2) with each row's query.

    ``S`` holds dot products of every frame-a pixel with the row queries (H*W, n).
    """
    W = shape[1]
    i00, w = _corner_weights(cand, shape)
    corners = i00[..., None] + np.array([0, 1, W, W + 1])
    num = np.einsum("nkc,nkc->nk", w, S[corners, rows[:, None, None]])
    ww = w[..., _GRAM_PAIRS[:, 0]] * w[..., _GRAM_PAIRS[:, 1]] * _GRAM_MULT
    sq = np.einsum("nkg,nkg->nk", ww, gram[i00])
    return num / np.maximum(np.sqrt(np.maximum(sq, 0.0)), MIN_NORM)


def feature_refine(matches: MatchSet, F_a: FeatureMap, F_b: FeatureMap, levels=REFINE_LEVELS,
                   chunk=256) -> MatchSet:
    """Move each match in frame a to the best descriptor response in a local window, coarse to fine.

    Candidates sit at whole-pixel offsets from the continuous match, scored with
    interpolated, renormalized descriptors. The geometric match is the incumbent
    and must be strictly beaten for the match to move, so ties keep it.
    """
    H, W = F_a.shape
    d = F_a.desc.shape[-1]
    Da = F_a.desc.reshape(-1, d)
    Db = F_b.desc.reshape(-1, d)[matches.idx_b]
    gram = _neighbour_gram(F_a.desc)
    offsets = [_refine_offsets(stride, radius).astype(float) for stride, radius in levels]
    pix = matches.pixels_a().copy()
    for a in range(0, len(pix), chunk):
        p = pix[a:a + chunk]
        S = Da @ Db[a:a + chunk].T
        rows = np.arange(len(p))
        incumbent = _refine_scores(S, gram, p[:, None, :], (H, W), rows)[:, 0]
        for off in offsets:
            cand = p[:, None, :] + off[None]
            inside = (cand[..., 0] >= 0) & (cand[..., 0] <= W - 1) & (cand[..., 1] >= 0) & (cand[..., 1] <= H - 1)
            score = np.where(inside, _refine_scores(S, gram, cand, (H, W), rows), -np.inf)
            best = np.argmax(score, axis=1)
            top = score[rows, best]
            step = top > incumbent
            p = np.where(step[:, None], cand[rows, best], p)
            incumbent = np.where(step, top, incumbent)
        pix[a:a + chunk] = p
    idx_a = _rounded_index(pix, (H, W))
    conf = match_confidence(F_a.conf, F_b.conf, idx_a, matches.idx_b)
    return MatchSet(idx_a, matches.idx_b.copy(), conf, matches.valid.copy(), matches.shape_a, matches.shape_b,
                    matches.iterations, pix)


def backproject_depth(depth, K: PinholeIntrinsics):
    """Points ``depth * K^-1 (u, v, 1)``; non-positive depth gives an invalid (zero) point."""
    depth = np.asarray(depth, dtype=float)
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W].astype(float)
    ok = np.isfinite(depth) & (depth > 0)
    d = np.where(ok, depth, 0.0)
    return np.stack([d * (u - K.cx) / K.fx, d * (v - K.cy) / K.fy, d], axis=-1)


def pinhole_project(x, K: PinholeIntrinsics):
    """Pixel coordinates and 2x3 Jacobians of points in front of the camera."""
    x = np.asarray(x, dtype=float)
    z = x[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point behind camera (z <= 0)")
    return _project(x, K)


def _project(x, K):
    X, Y, z = x[..., 0], x[..., 1], x[..., 2]
    p = np.stack([K.fx * X / z + K.cx, K.fy * Y / z + K.cy], axis=-1)
    J = np.zeros(x.shape[:-1] + (2, 3))
    J[..., 0, 0] = K.fx / z
    J[..., 0, 2] = -K.fx * X / z**2
    J[..., 1, 1] = K.fy / z
    J[..., 1, 2] = -K.fy * Y / z**2
    return p, J
