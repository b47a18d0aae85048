"""Keyframe graph and global Sim(3) optimization.

Every edge holds two frozen match sets, one per direction. A direction with
source keyframe ``s`` and target ``t`` compares ``T_t^-1 T_s`` applied to the
source canonical pointmap (read at the continuous matched pixels) against the
target canonical pointmap at integer pixels, using the same residuals as
tracking. The first keyframe is the gauge anchor and its 7 variables are
eliminated from the normal equations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular

from . import lie
from .camera import FeatureMap, MatchSet, PinholeIntrinsics, sample_pointmap, smooth_patches, valid_points
from .lie import Sim3
from .tracking import (Keyframe, RobustWeightParams, calibrate_pointmap, normal_equations, pixel_depth_residuals,
                       ray_distance_residuals)

BLOCK = 7
MAX_ITERS = 10
STEP_TOL = 1e-6
DAMPING = (1e-6, 1e-5, 1e-4)
COST_RTOL = 1e-12
SNAPSHOT_MAGIC = b"PGSLAM01"
SNAPSHOT_VERSION = 1


class GraphError(ValueError):
    pass


@dataclass
class Edge:
    """Bidirectional edge. ``m_ij`` matches pixels of ``i`` (side a) with pixels of ``j`` (side b); ``m_ji`` the reverse."""

    i: int
    j: int
    m_ij: MatchSet
    m_ji: MatchSet
    loop: bool = False

    def directions(self):
        """``(source, target, matches)`` for both directions."""
        return ((self.i, self.j, self.m_ij), (self.j, self.i, self.m_ji))


@dataclass
class Graph:
    keyframes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    anchor: int | None = None

    def __len__(self):
        return len(self.keyframes)

    def index(self, kf_id) -> int:
        for k, kf in enumerate(self.keyframes):
            if kf.id == kf_id:
                return k
        raise KeyError(kf_id)

    def keyframe(self, kf_id) -> Keyframe:
        return self.keyframes[self.index(kf_id)]

    @property
    def ids(self):
        return [kf.id for kf in self.keyframes]

    def has_edge(self, i, j) -> bool:
        return any({e.i, e.j} == {i, j} for e in self.edges)

    def poses(self):
        return {kf.id: kf.T_wc for kf in self.keyframes}

    def add_edge(self, i, j, m_ij: MatchSet, m_ji: MatchSet, loop=False) -> Edge:
        if i == j:
            raise GraphError("edge endpoints must differ")
        ids = set(self.ids)
        if i not in ids or j not in ids:
            raise GraphError(f"edge ({i}, {j}) references a missing keyframe")
        if m_ij.n_valid + m_ji.n_valid == 0:
            raise GraphError(f"edge ({i}, {j}) has no valid match")
        edge = Edge(i, j, m_ij, m_ji, loop)
        self.edges.append(edge)
        return edge

    def add_keyframe(self, kf: Keyframe, m_ij: MatchSet | None = None, m_ji: MatchSet | None = None,
                     parent: int | None = None) -> "Graph":
        """Append ``kf``; every keyframe after the first is linked to ``parent`` (default: its predecessor).

        ``m_ij`` has the parent on side a and ``kf`` on side b; ``m_ji`` the reverse.
        """
        if kf.id in self.ids:
            raise GraphError(f"duplicate keyframe id {kf.id}")
        if not self.keyframes:
            self.keyframes.append(kf)
            self.anchor = kf.id
            return self
        if m_ij is None or m_ji is None:
            raise GraphError("a non-initial keyframe needs the match sets of its edge")
        parent = self.keyframes[-1].id if parent is None else parent
        self.keyframes.append(kf)
        try:
            self.add_edge(parent, kf.id, m_ij, m_ji)
        except GraphError:
            self.keyframes.pop()
            raise
        return self


def add_keyframe(graph: Graph, kf: Keyframe, m_ij=None, m_ji=None, parent=None) -> Graph:
    return graph.add_keyframe(kf, m_ij, m_ji, parent)


# ---------------------------------------------------------------------------
# residual terms


@dataclass
class _Term:
    src: int
    tgt: int
    X_src: np.ndarray
    X_tgt: np.ndarray
    q: np.ndarray
    q_min: float
    pix: np.ndarray | None = None
    z: np.ndarray | None = None


def _terms(graph: Graph, mode, params: RobustWeightParams, K: PinholeIntrinsics | None, subpixel=True):
    if mode not in ("ray", "pixel"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "pixel" and K is None:
        raise ValueError("pixel mode needs intrinsics")
    canon = {}
    for kf in graph.keyframes:
        canon[kf.id] = calibrate_pointmap(kf.X, K) if mode == "pixel" else np.asarray(kf.X, dtype=float)
    terms = []
    for edge in graph.edges:
        for s, t, m in edge.directions():
            Xs, Xt = canon[s], canon[t]
            use = m.valid & valid_points(Xs).ravel()[m.idx_a] & valid_points(Xt).ravel()[m.idx_b]
            if subpixel:
                use &= smooth_patches(Xs, m.pixels_a())
            if not use.any():
                continue
            if subpixel:
                X_src = sample_pointmap(Xs, m.pixels_a()[use])
            else:
                X_src = Xs.reshape(-1, 3)[m.idx_a[use]]
            n = m.idx_b[use]
            q = m.conf[use]
            term = _Term(s, t, X_src, Xt.reshape(-1, 3)[n], q, params.resolve_q_min(q))
            if mode == "pixel":
                W = Xt.shape[1]
                term.pix = np.stack([n % W, n // W], axis=-1).astype(float)
                term.z = term.X_tgt[:, 2]
            terms.append(term)
    return terms


def _term_residuals(term: _Term, T_rel: Sim3, mode, params, K, dist_weight):
    if mode == "ray":
        return ray_distance_residuals(T_rel, term.X_tgt, term.X_src, term.q, params, term.q_min, dist_weight)
    return pixel_depth_residuals(T_rel, term.pix, term.z, term.X_src, term.q, K, params, term.q_min, dist_weight)


def global_jacobians(J_rel, T_wt: Sim3):
    """Jacobians of a residual of ``T_wt^-1 T_ws`` w.r.t. left perturbations of ``(T_ws, T_wt)``."""
    A = lie.adjoint(T_wt.inverse())
    J_s = J_rel @ A
    return J_s, -J_s


def _assemble(graph: Graph, terms, mode, params, K, dist_weight):
    """Block Hessian ``{(a, b): 7x7}`` over keyframe positions, gradient (N, 7) and robust cost."""
    pos = {kf.id: k for k, kf in enumerate(graph.keyframes)}
    poses = graph.poses()
    N = len(graph)
    blocks = {(k, k): np.zeros((BLOCK, BLOCK)) for k in range(N)}
    grad = np.zeros((N, BLOCK))
    cost = 0.0
    for term in terms:
        T_t, T_s = poses[term.tgt], poses[term.src]
        r, J, info = _term_residuals(term, T_t.inverse() @ T_s, mode, params, K, dist_weight)
        H_rel, g_rel, c = normal_equations(r, J, info, params.huber)
        A = lie.adjoint(T_t.inverse())
        Hs = A.T @ H_rel @ A
        Hs = 0.5 * (Hs + Hs.T)
        gs = A.T @ g_rel
        a, b = pos[term.src], pos[term.tgt]
        blocks[(a, a)] += Hs
        blocks[(b, b)] += Hs
        for key, sign in (((a, b), -1.0), ((b, a), -1.0)):
            blocks[key] = blocks.get(key, np.zeros((BLOCK, BLOCK))) + sign * Hs
        grad[a] += gs
        grad[b] -= gs
        cost += c
    return blocks, grad, cost


def _blocks_to_sparse(blocks, N):
    rows, cols, vals = [], [], []
    ii, jj = np.meshgrid(np.arange(BLOCK), np.arange(BLOCK), indexing="ij")
    for (a, b), B in blocks.items():
        rows.append((a * BLOCK + ii).ravel())
        cols.append((b * BLOCK + jj).ravel())
        vals.append(B.ravel())
    if not rows:
        return sp.csr_matrix((N * BLOCK, N * BLOCK))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N * BLOCK, N * BLOCK))


def assemble_system(graph: Graph, mode="ray", params: RobustWeightParams | None = None,
                    K: PinholeIntrinsics | None = None, dist_weight=None, fix_anchor=True, subpixel=True):
    """Sparse ``7N x 7N`` Gauss-Newton Hessian and gradient over all keyframe poses.

    With ``fix_anchor`` the anchor's rows and columns are replaced by the
    identity (and its gradient by zero), so any solve leaves it untouched.
    """
    params = params or RobustWeightParams()
    terms = _terms(graph, mode, params, K, subpixel)
    blocks, grad, _ = _assemble(graph, terms, mode, params, K, dist_weight)
    N = len(graph)
    if fix_anchor and graph.anchor is not None:
        k = graph.index(graph.anchor)
        blocks = {key: B for key, B in blocks.items() if k not in key}
        blocks[(k, k)] = np.eye(BLOCK)
        grad[k] = 0.0
    return _blocks_to_sparse(blocks, N), grad.ravel()


def robust_cost(graph: Graph, mode="ray", params: RobustWeightParams | None = None, K=None, dist_weight=None,
                subpixel=True) -> float:
    params = params or RobustWeightParams()
    terms = _terms(graph, mode, params, K, subpixel)
    return _assemble(graph, terms, mode, params, K, dist_weight)[2]


# ---------------------------------------------------------------------------
# block-sparse Cholesky (natural order)


def block_cholesky(blocks, n, b=BLOCK):
    """Lower block Cholesky factor of a symmetric positive definite block matrix.

    ``blocks`` maps ``(row, col)`` block indices to ``b x b`` arrays; only the
    lower triangle (row >= col) is read. Returns ``L`` as a list of columns,
    ``L[k] = {row: block}``. Raises ``np.linalg.LinAlgError`` if not positive definite.
    """
    cols = [dict() for _ in range(n)]
    for (i, j), B in blocks.items():
        if i >= j:
            cols[j][i] = np.array(B, dtype=float)
    L = []
    for k in range(n):
        col = cols[k]
        diag = col.get(k)
        if diag is None or not np.all(np.isfinite(diag)):
            raise np.linalg.LinAlgError(f"missing or non-finite diagonal block {k}")
        Lkk = np.linalg.cholesky(0.5 * (diag + diag.T))
        Lk = {k: Lkk}
        below = sorted(i for i in col if i > k)
        for i in below:
            Lk[i] = solve_triangular(Lkk, col[i].T, lower=True).T
        for a, j in enumerate(below):
            for i in below[a:]:
                upd = Lk[i] @ Lk[j].T
                cols[j][i] = cols[j][i] - upd if i in cols[j] else -upd
        L.append(Lk)
    return L


def block_cholesky_solve(L, rhs, b=BLOCK):
    n = len(L)
    y = np.array(rhs, dtype=float).reshape(n, b)
    for k in range(n):
        y[k] = solve_triangular(L[k][k], y[k], lower=True)
        for i, B in L[k].items():
            if i > k:
                y[i] -= B @ y[k]
    x = y
    for k in reversed(range(n)):
        acc = x[k].copy()
        for i, B in L[k].items():
            if i > k:
                acc -= B.T @ x[i]
        x[k] = solve_triangular(L[k][k], acc, lower=True, trans="T")
    return x.ravel()


def _reduce(blocks, grad, keep):
    """Restrict to the keyframe positions in ``keep`` (anchor elimination)."""
    where = {k: r for r, k in enumerate(keep)}
    red = {(where[a], where[b]): B for (a, b), B in blocks.items() if a in where and b in where}
    return red, grad[keep].ravel()


def _solve_step(blocks, g, n):
    """Cholesky solve of ``H tau = -g`` with damped retries; returns ``(tau, damping)`` or ``(None, None)``."""
    for lam in (0.0,) + DAMPING:
        damped = {key: (B + lam * np.eye(BLOCK) if key[0] == key[1] else B) for key, B in blocks.items()}
        try:
            L = block_cholesky(damped, n)
        except np.linalg.LinAlgError:
            continue
        tau = block_cholesky_solve(L, -g)
        if np.all(np.isfinite(tau)):
            return tau, lam
    return None, None


def information_rank(graph: Graph, mode="ray", params: RobustWeightParams | None = None, K=None, dist_weight=None,
                     rtol=1e-9):
    """Numerical rank of the anchor-reduced Hessian and its dimension."""
    params = params or RobustWeightParams()
    terms = _terms(graph, mode, params, K)
    blocks, grad, _ = _assemble(graph, terms, mode, params, K, dist_weight)
    keep = [k for k in range(len(graph)) if graph.keyframes[k].id != graph.anchor]
    red, _ = _reduce(blocks, grad, keep)
    H = _blocks_to_sparse(red, len(keep)).toarray()
    if H.size == 0:
        return 0, 0
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    return int(np.count_nonzero(ev > rtol * max(ev.max(), 1e-300))), H.shape[0]


def _apply(graph: Graph, keep, tau):
    for r, k in enumerate(keep):
        kf = graph.keyframes[k]
        kf.T_wc = lie.exp(tau[r * BLOCK:(r + 1) * BLOCK]) @ kf.T_wc


def global_optimize(graph: Graph, mode="ray", params: RobustWeightParams | None = None,
                    K: PinholeIntrinsics | None = None, dist_weight=None, max_iters=MAX_ITERS, tol=STEP_TOL,
                    subpixel=True):
    """IRLS Gauss-Newton over all non-anchor keyframe poses (in place).

    Weights are recomputed every iteration. A step that raises the robust cost
    is retried at half length; if that also fails the solve stops. When the
    Cholesky factorization fails even after damping, poses are left as they are
    and the result reports non-convergence.
    """
    params = params or RobustWeightParams()
    stats = {"iterations": 0, "cost_trace": [], "converged": False, "damping": [], "step_norms": []}
    if len(graph) < 2 or not graph.edges:
        stats["converged"] = True
        return graph, stats
    terms = _terms(graph, mode, params, K, subpixel)
    keep = [k for k in range(len(graph)) if graph.keyframes[k].id != graph.anchor]
    blocks, grad, cost = _assemble(graph, terms, mode, params, K, dist_weight)
    stats["cost_trace"].append(cost)
    for _ in range(max_iters):
        red, g = _reduce(blocks, grad, keep)
        tau, lam = _solve_step(red, g, len(keep))
        stats["iterations"] += 1
        if tau is None:
            stats["failed"] = True
            break
        stats["damping"].append(lam)
        if np.linalg.norm(tau) < tol:
            # below tolerance: take it without a cost check, rounding noise could reject it
            _apply(graph, keep, tau)
            stats["cost_trace"].append(_assemble(graph, terms, mode, params, K, dist_weight)[2])
            stats["step_norms"].append(float(np.linalg.norm(tau)))
            stats["converged"] = True
            break
        saved = [graph.keyframes[k].T_wc for k in keep]
        accepted = False
        for step in (tau, 0.5 * tau):
            _apply(graph, keep, step)
            new = _assemble(graph, terms, mode, params, K, dist_weight)
            if new[2] <= cost * (1 + COST_RTOL) + 1e-300:
                accepted = True
                break
            for k, T in zip(keep, saved):
                graph.keyframes[k].T_wc = T
        if not accepted:
            break
        blocks, grad, cost = new
        stats["cost_trace"].append(cost)
        stats["step_norms"].append(float(np.linalg.norm(step)))
        if np.linalg.norm(step) < tol:
            stats["converged"] = True
            break
    return graph, stats


# ---------------------------------------------------------------------------
# binary snapshot


def _put(buf, arr, dtype):
    buf.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def struct(self, fmt):
        out = struct.unpack_from("<" + fmt, self.data, self.off)
        self.off += struct.calcsize("<" + fmt)
        return out

    def array(self, dtype, shape):
        dt = np.dtype(dtype).newbyteorder("<")
        n = int(np.prod(shape))
        out = np.frombuffer(self.data, dtype=dt, count=n, offset=self.off).reshape(shape)
        self.off += n * dt.itemsize
        return out.astype(np.dtype(dtype))


def _pose_array(T: Sim3):
    return np.concatenate([T.R.ravel(), T.t, [T.s]])


def _write_matches(buf, m: MatchSet):
    n = len(m.idx_b)
    has_pix = m.pix_a is not None
    has_it = m.iterations is not None
    buf.append(struct.pack("<Q4IBB", n, *m.shape_a, *m.shape_b, has_pix, has_it))
    _put(buf, m.idx_a, "i8")
    _put(buf, m.idx_b, "i8")
    _put(buf, m.conf, "f8")
    _put(buf, m.valid, "u1")
    if has_pix:
        _put(buf, m.pix_a, "f8")
    if has_it:
        _put(buf, m.iterations, "i8")


def _read_matches(rd: _Reader) -> MatchSet:
    n, ha, wa, hb, wb, has_pix, has_it = rd.struct("Q4IBB")
    idx_a = rd.array("i8", (n,))
    idx_b = rd.array("i8", (n,))
    conf = rd.array("f8", (n,))
    valid = rd.array("u1", (n,)).astype(bool)
    pix = rd.array("f8", (n, 2)) if has_pix else None
    it = rd.array("i8", (n,)) if has_it else None
    return MatchSet(idx_a, idx_b, conf, valid, (ha, wa), (hb, wb), it, pix)


def save_snapshot(graph: Graph, path):
    """Write the graph as a versioned little-endian binary snapshot."""
    buf = [SNAPSHOT_MAGIC, struct.pack("<IIIq", SNAPSHOT_VERSION, len(graph.keyframes), len(graph.edges),
                                       -1 if graph.anchor is None else graph.anchor)]
    for kf in graph.keyframes:
        H, W = kf.C.shape
        d = kf.features.desc.shape[-1]
        buf.append(struct.pack("<qqd3I", kf.id, kf.frame, kf.timestamp, H, W, d))
        _put(buf, _pose_array(kf.T_wc), "f8")
        _put(buf, kf.X, "f8")
        _put(buf, kf.C, "f8")
        _put(buf, kf.features.desc, "f8")
        _put(buf, kf.features.conf, "f8")
    for e in graph.edges:
        buf.append(struct.pack("<qqB", e.i, e.j, e.loop))
        _write_matches(buf, e.m_ij)
        _write_matches(buf, e.m_ji)
    with open(path, "wb") as fh:
        fh.write(b"".join(buf))


def load_snapshot(path) -> Graph:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != SNAPSHOT_MAGIC:
        raise GraphError("not a graph snapshot (bad magic)")
    rd = _Reader(data)
    rd.off = 8
    version, n_kf, n_edges, anchor = rd.struct("IIIq")
    if version != SNAPSHOT_VERSION:
        raise GraphError(f"unsupported snapshot version {version}")
    graph = Graph(anchor=None if anchor < 0 else anchor)
    for _ in range(n_kf):
        kf_id, frame, ts, H, W, d = rd.struct("qqd3I")
        p = rd.array("f8", (13,))
        T = Sim3(p[:9].reshape(3, 3), p[9:12], p[12])
        X = rd.array("f8", (H, W, 3))
        C = rd.array("f8", (H, W))
        F = FeatureMap(rd.array("f8", (H, W, d)), rd.array("f8", (H, W)))
        graph.keyframes.append(Keyframe(kf_id, X, C, F, T, frame, ts))
    for _ in range(n_edges):
        i, j, loop = rd.struct("qqB")
        graph.edges.append(Edge(i, j, _read_matches(rd), _read_matches(rd), bool(loop)))
    return graph
