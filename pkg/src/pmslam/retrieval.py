"""ASMK-style keyframe retrieval and loop-edge acceptance.

Each keyframe's descriptors are quantized to a codebook; per visual word the
residuals to the centroid are summed, normalized and binarized by sign. Two
keyframes are compared word by word with the selective function
``sign(u) |u|^alpha`` of the normalized binary dot product, and the total is
normalized by both self-similarities so that a self-query scores 1.
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .backend import Edge
from .camera import FeatureMap, match_pointmaps

CODEBOOK_MAGIC = b"ASMKCB01"
DEFAULT_WORDS = 4096
ALPHA = 3.0
SUBSAMPLE = 1024
OMEGA_R = 0.005
OMEGA_L = 0.1
ZERO_RESIDUAL = 1e-12


@dataclass(eq=False)
class Codebook:
    """Visual-word centroids (K, d), held at float32 precision so files round-trip exactly."""

    centroids: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids)
        if c.ndim != 2 or len(c) == 0:
            raise ValueError("codebook needs a nonempty (K, d) centroid array")
        self.centroids = c.astype(np.float32).astype(np.float64)
        self.centroids.flags.writeable = False

    @property
    def size(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @classmethod
    def train(cls, descriptors, k=DEFAULT_WORDS, seed=0, iters=20) -> "Codebook":
        """k-means (seeded from random sample points) on a descriptor sample; ``k`` is capped by the sample size."""
        X = np.asarray(descriptors, dtype=float).reshape(-1, np.shape(descriptors)[-1])
        k = int(min(k, len(X)))
        if k < 1:
            raise ValueError("no training descriptors")
        centroids, _ = kmeans2(X, k, iter=iters, minit="points", seed=np.random.default_rng(seed))
        return cls(centroids)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(CODEBOOK_MAGIC)
            fh.write(struct.pack("<II", self.dim, self.size))
            fh.write(self.centroids.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != CODEBOOK_MAGIC:
            raise ValueError("not a codebook file (bad magic)")
        d, k = struct.unpack_from("<II", data, 8)
        return cls(np.frombuffer(data, dtype="<f4", count=d * k, offset=16).reshape(k, d))


def quantize(descriptors, codebook: Codebook, chunk=64) -> np.ndarray:
    """Nearest centroid under L2 by dense evaluation; ties go to the lowest word id."""
    X = np.asarray(descriptors, dtype=float)
    if X.ndim != 2 or X.shape[1] != codebook.dim:
        raise ValueError(f"descriptors must be (N, {codebook.dim})")
    C = codebook.centroids
    out = np.empty(len(X), dtype=np.int64)
    for a in range(0, len(X), chunk):
        diff = X[a:a + chunk, None, :] - C[None, :, :]
        out[a:a + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out


def sample_descriptors(features, limit=SUBSAMPLE, seed=0) -> np.ndarray:
    """Flatten a FeatureMap (or array) and keep a deterministic subsample of at most ``limit`` rows."""
    if isinstance(features, FeatureMap):
        D = features.desc.reshape(-1, features.desc.shape[-1])
    else:
        D = np.asarray(features, dtype=float)
        D = D.reshape(-1, D.shape[-1])
    if len(D) <= limit:
        return D
    keep = np.sort(np.random.default_rng(seed).choice(len(D), size=limit, replace=False))
    return D[keep]


@dataclass
class Signature:
    """Per-word binarized aggregated residuals of one descriptor set."""

    words: np.ndarray  # (W,) sorted word ids
    bits: np.ndarray  # (W, d) int8 in {-1, 0, 1}; all-zero rows are degenerate residuals

    @property
    def self_similarity(self) -> float:
        return float(np.count_nonzero(np.any(self.bits != 0, axis=1)))


def encode(descriptors, codebook: Codebook) -> Signature:
    X = np.asarray(descriptors, dtype=float)
    words = quantize(X, codebook)
    uniq, inv = np.unique(words, return_inverse=True)
    agg = np.zeros((len(uniq), codebook.dim))
    np.add.at(agg, inv, X - codebook.centroids[words])
    norm = np.linalg.norm(agg, axis=1)
    bits = np.where(norm[:, None] > ZERO_RESIDUAL, np.sign(agg), 0.0)
    return Signature(uniq, bits.astype(np.int8))


def selective(u, alpha=ALPHA):
    return np.sign(u) * np.abs(u) ** alpha


def raw_similarity(a: Signature, b: Signature, alpha=ALPHA) -> float:
    common, ia, ib = np.intersect1d(a.words, b.words, assume_unique=True, return_indices=True)
    if len(common) == 0:
        return 0.0
    d = a.bits.shape[1]
    u = np.einsum("wd,wd->w", a.bits[ia].astype(float), b.bits[ib].astype(float)) / d
    return float(selective(u, alpha).sum())


def similarity(a: Signature, b: Signature, alpha=ALPHA) -> float:
    """Normalized ASMK score; 0 when either side has no usable word."""
    den = np.sqrt(a.self_similarity * b.self_similarity)
    return raw_similarity(a, b, alpha) / den if den > 0 else 0.0


@dataclass
class RetrievalIndex:
    """Append-only inverted file over keyframe signatures."""

    codebook: Codebook
    alpha: float = ALPHA
    subsample: int = SUBSAMPLE
    inverted: dict = field(default_factory=lambda: defaultdict(list))
    norms: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.norms)

    @property
    def n_entries(self) -> int:
        return sum(len(v) for v in self.inverted.values())

    def signature(self, features) -> Signature:
        return encode(sample_descriptors(features, self.subsample), self.codebook)

    def add(self, kf_id, features) -> Signature:
        if kf_id in self.norms:
            raise KeyError(f"keyframe {kf_id} already indexed")
        sig = features if isinstance(features, Signature) else self.signature(features)
        for w, b in zip(sig.words, sig.bits):
            self.inverted[int(w)].append((kf_id, b))
        self.norms[kf_id] = sig.self_similarity
        return sig

    def scores(self, features) -> dict:
        """Normalized score against every indexed keyframe."""
        sig = features if isinstance(features, Signature) else self.signature(features)
        d = self.codebook.dim
        raw = {k: 0.0 for k in self.norms}
        for w, b in zip(sig.words, sig.bits):
            if not b.any():
                continue
            bf = b.astype(float)
            for kf_id, other in self.inverted.get(int(w), ()):
                raw[kf_id] += float(selective(bf @ other / d, self.alpha))
        q = sig.self_similarity
        out = {}
        for k, r in raw.items():
            den = np.sqrt(q * self.norms[k])
            out[k] = r / den if den > 0 else 0.0
        return out

    def query(self, features, top_k=3, omega_r=OMEGA_R, exclude=()) -> list:
        """Top-``top_k`` ``(kf_id, score)`` with score >= ``omega_r``, best first (ties by id)."""
        if not self.norms:
            raise ValueError("query on an empty index")
        excl = set(np.atleast_1d(exclude).tolist()) if exclude is not None else set()
        hits = [(k, s) for k, s in self.scores(features).items() if k not in excl and s >= omega_r]
        hits.sort(key=lambda ks: (-ks[1], ks[0]))
        return hits[:top_k]


def add_to_index(index: RetrievalIndex, kf_id, features) -> RetrievalIndex:
    index.add(kf_id, features)
    return index


def query(index: RetrievalIndex, features, top_k=3, omega_r=OMEGA_R, exclude=()) -> list:
    return index.query(features, top_k, omega_r, exclude)


def loop_fraction_accepted(fraction, omega_l=OMEGA_L) -> bool:
    """Loop edges need a valid-match fraction of at least ``omega_l`` (inclusive)."""
    return bool(fraction >= omega_l)


def accept_loop_edge(i, j, pred_ij, pred_ji, omega_l=OMEGA_L):
    """Match a candidate pair both ways; return a loop Edge when both directions pass ``omega_l``.

    ``pred_ij`` is the prediction for the ordered pair (i, j), ``pred_ji`` for (j, i).
    Returns ``(edge or None, fraction)`` where fraction is the smaller of the two.
    """
    m_ij = match_pointmaps(pred_ij.X_ii, pred_ij.X_ji, pred_ij.F_i, pred_ij.F_j)
    m_ji = match_pointmaps(pred_ji.X_ii, pred_ji.X_ji, pred_ji.F_i, pred_ji.F_j)
    fraction = min(m_ij.valid_fraction, m_ji.valid_fraction)
    if not loop_fraction_accepted(fraction, omega_l):
        return None, fraction
    return Edge(i, j, m_ij, m_ji, loop=True), fraction
