"""Trajectory and point-cloud evaluation, TUM trajectory and PLY file I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .lie import Sim3

ASSOC_WINDOW = 0.02  # seconds
MAX_DIST = 0.5
COLLINEAR_RTOL = 1e-9


class AlignmentError(ValueError):
    """Too few associated poses, or a degenerate (collinear) trajectory."""


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list  # camera-to-world Sim3

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("one timestamp per pose")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([T.t for T in self.poses]).reshape(-1, 3)

    def transformed(self, G: Sim3) -> "Trajectory":
        """Every pose pre-multiplied by ``G``."""
        return Trajectory(self.timestamps.copy(), [G @ T for T in self.poses])


@dataclass(frozen=True)
class PointCloudMetrics:
    accuracy: float
    completion: float
    chamfer: float


def associate(t_est, t_ref, window=ASSOC_WINDOW):
    """Index pairs ``(i_est, i_ref)`` matching each estimate to the nearest reference time within ``window``."""
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if len(t_ref) == 0 or len(t_est) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pos = np.clip(np.searchsorted(t_ref, t_est), 1, max(len(t_ref) - 1, 1))
    left = np.clip(pos - 1, 0, len(t_ref) - 1)
    right = np.clip(pos, 0, len(t_ref) - 1)
    nearest = np.where(np.abs(t_ref[left] - t_est) <= np.abs(t_ref[right] - t_est), left, right)
    ok = np.abs(t_ref[nearest] - t_est) <= window
    return np.flatnonzero(ok), nearest[ok]


def umeyama(src, dst) -> Sim3:
    """Similarity ``G`` minimizing ``sum |dst - G src|^2`` in closed form."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if len(src) < 3 or sv[1] <= COLLINEAR_RTOL * max(sv[0], 1e-300):
        raise AlignmentError("positions are collinear or too few to align")
    U, D, Vt = np.linalg.svd(xd.T @ xs / len(src))
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var)
    return Sim3(R, mu_d - s * R @ mu_s, s)


def _associated_positions(est: Trajectory, ref: Trajectory, window=ASSOC_WINDOW):
    i_est, i_ref = associate(est.timestamps, ref.timestamps, window)
    if len(i_est) < 3:
        raise AlignmentError(f"only {len(i_est)} associated poses (need 3)")
    return est.positions[i_est], ref.positions[i_ref]


def align_sim3(est: Trajectory, ref: Trajectory, window=ASSOC_WINDOW) -> Sim3:
    """Similarity mapping estimated positions onto the reference."""
    p_est, p_ref = _associated_positions(est, ref, window)
    return umeyama(p_est, p_ref)


def ate_rmse(est: Trajectory, ref: Trajectory, window=ASSOC_WINDOW) -> float:
    """RMSE of position residuals after similarity alignment."""
    p_est, p_ref = _associated_positions(est, ref, window)
    G = umeyama(p_est, p_ref)
    res = p_ref - G.act(p_est)
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def nearest_distances(src, dst, method="kdtree") -> np.ndarray:
    """Distance from each ``src`` point to its nearest ``dst`` point."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if method == "kdtree":
        return cKDTree(dst).query(src, k=1)[0]
    if method == "brute":
        out = np.empty(len(src))
        for a in range(0, len(src), 256):
            diff = src[a:a + 256, None, :] - dst[None, :, :]
            out[a:a + 256] = np.sqrt(np.einsum("nkd,nkd->nk", diff, diff).min(axis=1))
        return out
    raise ValueError(f"unknown method {method!r}")


def cloud_metrics(est_cloud, ref_cloud, max_dist=MAX_DIST, method="kdtree") -> PointCloudMetrics:
    """Accuracy, completion and Chamfer distance as clamped nearest-neighbour RMSEs."""
    est = np.asarray(est_cloud, dtype=float).reshape(-1, 3)
    ref = np.asarray(ref_cloud, dtype=float).reshape(-1, 3)
    if len(est) == 0 or len(ref) == 0:
        raise ValueError("both clouds must be nonempty")
    d_acc = np.minimum(nearest_distances(est, ref, method), max_dist)
    d_comp = np.minimum(nearest_distances(ref, est, method), max_dist)
    acc = float(np.sqrt(np.mean(d_acc**2)))
    comp = float(np.sqrt(np.mean(d_comp**2)))
    return PointCloudMetrics(acc, comp, 0.5 * (acc + comp))


# ---------------------------------------------------------------------------
# TUM trajectories


def write_tum(path, traj: Trajectory):
    """``timestamp tx ty tz qx qy qz qw`` per line (scale is not part of the format)."""
    with open(path, "w") as fh:
        for ts, T in zip(traj.timestamps, traj.poses):
            q = Rotation.from_matrix(T.R).as_quat()
            if q[3] < 0:
                q = -q
            vals = " ".join(f"{v:.9f}" for v in (*T.t, *q))
            fh.write(f"{ts:.6f} {vals}\n")


def read_tum(path) -> Trajectory:
    stamps, poses = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
            v = np.array([float(p) for p in parts])
            stamps.append(v[0])
            poses.append(Sim3(Rotation.from_quat(v[4:8]).as_matrix(), v[1:4], 1.0))
    return Trajectory(np.array(stamps), poses)


# ---------------------------------------------------------------------------
# PLY point clouds


def write_ply(path, points, colors=None, binary=True):
    """Write x, y, z as float32 and optional red, green, blue as uint8."""
    P = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    C = None if colors is None else np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if C is not None and len(C) != len(P):
        raise ValueError("one colour per point")
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(P)}",
              "property float x", "property float y", "property float z"]
    if C is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if C is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.zeros(len(P), dtype=fields)
            rec["x"], rec["y"], rec["z"] = P[:, 0], P[:, 1], P[:, 2]
            if C is not None:
                rec["red"], rec["green"], rec["blue"] = C[:, 0], C[:, 1], C[:, 2]
            fh.write(rec.tobytes())
        else:
            for k in range(len(P)):
                row = " ".join(repr(float(v)) for v in P[k])
                if C is not None:
                    row += " " + " ".join(str(int(c)) for c in C[k])
                fh.write((row + "\n").encode("ascii"))


_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uchar": "u1", "uint8": "u1",
              "char": "i1", "int8": "i1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4"}


def read_ply(path):
    """Return ``(points float64 (N, 3), colors uint8 (N, 3) or None)`` from a vertex-only PLY."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError("not a PLY file")
    body = data[data.index(b"\n", end) + 1:]
    fmt, n, props = None, 0, []
    for line in data[:end].decode("ascii").splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] != "vertex" and props:
                break
            n = int(tok[2])
        elif tok[0] == "property":
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    names = [p[0] for p in props]
    if fmt == "ascii":
        rows = np.array(body.decode("ascii").split(), dtype=float)[: n * len(props)].reshape(n, len(props))
        col = {name: rows[:, k] for k, name in enumerate(names)}
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        order = "<" if fmt.endswith("little_endian") else ">"
        dt = np.dtype([(name, order + t) for name, t in props])
        rec = np.frombuffer(body, dtype=dt, count=n)
        col = {name: rec[name] for name in names}
    else:
        raise ValueError(f"unsupported PLY format {fmt!r}")
    points = np.stack([col["x"], col["y"], col["z"]], axis=-1).astype(np.float64)
    colors = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=-1).astype(np.uint8)
    return points, colors
