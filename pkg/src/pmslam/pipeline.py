"""Incremental SLAM loop: predictors, tracking, keyframing, loop closure, relocalisation and outputs."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .backend import Graph, global_optimize
from .camera import FeatureMap, MatchSet, PinholeIntrinsics, match_pointmaps
from .eval import Trajectory, write_ply, write_tum
from .lie import Sim3
from .retrieval import Codebook, RetrievalIndex, accept_loop_edge
from .synth import (DEFAULT_RESOLUTION, NoiseModel, PredictionPair, SyntheticScene, make_scene,
                    make_trajectory, predict_pair, training_descriptors)
from .tracking import (Keyframe, RobustWeightParams, TrackingLost, calibrate_pointmap, fuse_canonical,
                       keyframe_decision, solve_pose)

PAIR_MAGIC = b"PMPAIR01"
CODEBOOK_FILE = "codebook.bin"
STREAM_VERSION = 1
FRAME_RATE = 30.0


class PredictorError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SlamConfig:
    omega_k: float = 0.333
    omega_r: float = 0.005
    omega_l: float = 0.1
    reloc_fraction: float = 0.3
    reloc_score_factor: float = 4.0
    calibrated: bool = False
    intrinsics: PinholeIntrinsics | None = None
    robust: RobustWeightParams = field(default_factory=RobustWeightParams)
    top_k: int = 3
    seed: int = 0
    resolution: tuple = DEFAULT_RESOLUTION
    loop_closure: bool = True
    backend_iters: int = 10
    codebook: str | None = None
    codebook_words: int = 256
    map_conf_percentile: float = 10.0
    refine_matches: bool = True
    noise_depth: float = 0.0
    noise_outliers: float = 0.0
    noise_scale: float = 0.0

    def __post_init__(self):
        for name in ("omega_k", "omega_r", "omega_l", "reloc_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.calibrated and self.intrinsics is None:
            raise ValueError("calibrated mode needs intrinsics")
        self.resolution = tuple(int(v) for v in self.resolution)

    @property
    def mode(self) -> str:
        return "pixel" if self.calibrated else "ray"

    @property
    def noise(self) -> NoiseModel:
        return NoiseModel(depth_sigma=self.noise_depth, outlier_frac=self.noise_outliers, scale_sigma=self.noise_scale)

    _ROBUST = tuple(f.name for f in dataclasses.fields(RobustWeightParams))

    @classmethod
    def from_text(cls, text: str) -> "SlamConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        kw, robust = {}, {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in cls._ROBUST:
                robust[key] = None if value.lower() == "none" else float(value)
            elif key == "intrinsics":
                kw[key] = None if value.lower() == "none" else PinholeIntrinsics.parse(value)
            elif key == "resolution":
                w, h = value.lower().split("x")
                kw[key] = (int(w), int(h))
            elif key == "codebook":
                kw[key] = None if value.lower() == "none" else value
            elif key in types:
                default = types[key].default
                if isinstance(default, bool):
                    if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(f"line {n}: {key} expects a boolean")
                    kw[key] = value.lower() in ("true", "1", "yes")
                elif isinstance(default, int):
                    kw[key] = int(value)
                else:
                    kw[key] = float(value)
            else:
                raise ValueError(f"line {n}: unknown key {key!r}")
        if robust:
            kw["robust"] = RobustWeightParams(**robust)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "SlamConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "robust":
                lines += [f"{k} = {getattr(v, k)}" for k in self._ROBUST]
            elif f.name == "intrinsics":
                lines.append(f"intrinsics = {'none' if v is None else f'{v.fx},{v.fy},{v.cx},{v.cy}'}")
            elif f.name == "resolution":
                lines.append(f"resolution = {v[0]}x{v[1]}")
            else:
                lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# predictors


class Predictor(Protocol):
    n_frames: int

    def predict(self, a: int, b: int) -> PredictionPair: ...

    def encode(self, a: int) -> FeatureMap: ...

    def timestamps(self) -> np.ndarray: ...


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _rounded(pair: PredictionPair) -> PredictionPair:
    """Round every array to float32 so predictions survive the stream format bit for bit."""
    return PredictionPair(_f32(pair.X_ii), _f32(pair.X_ji), _f32(pair.C_i), _f32(pair.C_j),
                          FeatureMap(_f32(pair.F_i.desc), _f32(pair.F_i.conf)),
                          FeatureMap(_f32(pair.F_j.desc), _f32(pair.F_j.conf)), pair.scale, dict(pair.meta))


class SyntheticPredictor:
    """Renders predictions for frames of a ground-truth trajectory through a synthetic scene."""

    def __init__(self, scene: SyntheticScene, poses, noise: NoiseModel = NoiseModel(),
                 resolution=DEFAULT_RESOLUTION, seed=0, rate=FRAME_RATE):
        self.scene = scene
        self.poses = list(poses)
        self.noise = noise
        self.resolution = tuple(resolution)
        self.seed = int(seed)
        self.rate = rate

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.rate

    def pair_seed(self, a, b) -> int:
        return int(np.random.SeedSequence([self.seed, int(a), int(b)]).generate_state(1)[0])

    def predict(self, a, b) -> PredictionPair:
        pair = predict_pair(self.scene, self.poses[a], self.poses[b], self.noise, self.resolution,
                            seed=self.pair_seed(a, b))
        return _rounded(pair)

    def encode(self, a) -> FeatureMap:
        return self.predict(a, a).F_i

    def training_descriptors(self) -> np.ndarray:
        return training_descriptors(self.scene, resolution=self.resolution, seed=self.seed + 7919)


def _pair_name(a, b):
    return f"pair_{a:06d}_{b:06d}.bin"


def write_pair(path, a, b, pair: PredictionPair):
    with open(path, "wb") as fh:
        fh.write(PAIR_MAGIC)
        fh.write(struct.pack("<qq", a, b))
        for arr in (pair.X_ii, pair.X_ji, pair.C_i, pair.C_j, pair.F_i.desc, pair.F_j.desc, pair.F_i.conf,
                    pair.F_j.conf):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_pair(path, H, W, d) -> PredictionPair:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != PAIR_MAGIC:
        raise PredictorError(f"{path}: bad pair record magic")
    off = 24
    out = []
    for shape in ((H, W, 3), (H, W, 3), (H, W), (H, W), (H, W, d), (H, W, d), (H, W), (H, W)):
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise PredictorError(f"{path}: truncated pair record")
        out.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 4 * n
    X_ii, X_ji, C_i, C_j, D_i, D_j, Q_i, Q_j = out
    return PredictionPair(X_ii, X_ji, C_i, C_j, FeatureMap(D_i, Q_i), FeatureMap(D_j, Q_j))


def write_meta(directory, H, W, d, timestamps):
    with open(os.path.join(directory, "meta"), "w") as fh:
        fh.write(f"version {STREAM_VERSION}\nheight {H}\nwidth {W}\ndescriptor_dim {d}\nframes {len(timestamps)}\n")
        fh.write("timestamps " + " ".join(repr(float(t)) for t in timestamps) + "\n")


def read_meta(directory) -> dict:
    meta = {}
    with open(os.path.join(directory, "meta")) as fh:
        for line in fh:
            tok = line.split()
            if tok:
                meta[tok[0]] = tok[1:]
    if int(meta["version"][0]) != STREAM_VERSION:
        raise PredictorError(f"unsupported stream version {meta['version'][0]}")
    out = {k: int(meta[k][0]) for k in ("height", "width", "descriptor_dim", "frames")}
    ts = [float(t) for t in meta.get("timestamps", [])]
    out["timestamps"] = np.array(ts) if ts else np.arange(out["frames"]) / FRAME_RATE
    return out


class StreamPredictor:
    """Replays predictions from a pointmap-stream directory."""

    def __init__(self, directory):
        self.directory = directory
        self.meta = read_meta(directory)

    @property
    def n_frames(self) -> int:
        return self.meta["frames"]

    def timestamps(self) -> np.ndarray:
        return self.meta["timestamps"]

    def predict(self, a, b) -> PredictionPair:
        path = os.path.join(self.directory, _pair_name(a, b))
        if not os.path.exists(path):
            raise PredictorError(f"stream has no prediction for pair ({a}, {b})")
        m = self.meta
        return read_pair(path, m["height"], m["width"], m["descriptor_dim"])

    def encode(self, a) -> FeatureMap:
        return self.predict(a, a).F_i

    def codebook(self) -> Codebook | None:
        """The codebook recorded alongside the stream, if any."""
        path = os.path.join(self.directory, CODEBOOK_FILE)
        return Codebook.load(path) if os.path.exists(path) else None

    def training_descriptors(self, limit=8) -> np.ndarray:
        """Second-view descriptors of the first few recorded cross pairs."""
        names = sorted(n for n in os.listdir(self.directory) if n.startswith("pair_"))
        out = []
        for name in names:
            a, b = (int(x) for x in name[5:-4].split("_"))
            if a != b:
                out.append(self.predict(a, b).F_j.desc.reshape(-1, self.meta["descriptor_dim"]))
            if len(out) >= limit:
                break
        if not out:
            out = [self.encode(0).desc.reshape(-1, self.meta["descriptor_dim"])]
        return np.concatenate(out)


class RecordingPredictor:
    """Wraps a predictor and stores every prediction it serves as a stream directory."""

    def __init__(self, inner, directory):
        self.inner = inner
        self.directory = directory
        os.makedirs(directory, exist_ok=True)
        self._meta_written = False

    @property
    def n_frames(self) -> int:
        return self.inner.n_frames

    def timestamps(self):
        return self.inner.timestamps()

    def predict(self, a, b):
        pair = self.inner.predict(a, b)
        if not self._meta_written:
            H, W = pair.shape
            write_meta(self.directory, H, W, pair.F_i.desc.shape[-1], self.inner.timestamps())
            self._meta_written = True
        write_pair(os.path.join(self.directory, _pair_name(a, b)), a, b, pair)
        return pair

    def encode(self, a):
        return self.predict(a, a).F_i

    def training_descriptors(self):
        return self.inner.training_descriptors()

    def save_codebook(self, codebook: Codebook):
        codebook.save(os.path.join(self.directory, CODEBOOK_FILE))


# ---------------------------------------------------------------------------
# SLAM state machine


class Slam:
    """Single-threaded incremental SLAM over a predictor."""

    def __init__(self, config: SlamConfig, predictor):
        self.config = config
        self.predictor = predictor
        self.graph = Graph()
        self.index: RetrievalIndex | None = None
        self.current: int | None = None  # current keyframe id
        self.frame_poses: dict = {}  # frame -> (keyframe id, T_kf)
        self.lost = False
        self._last_matches: MatchSet | None = None
        self._last_T: Sim3 | None = None
        self.timings = defaultdict(float)
        self.stats = {"frames": 0, "tracked": 0, "lost_frames": [], "relocalisations": 0, "loop_edges": [],
                      "tracking_iterations": [], "backend_iterations": [], "keyframe_frames": []}

    # -- helpers -----------------------------------------------------------

    def _timed(self, stage, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        finally:
            self.timings[stage] += 1000.0 * (time.perf_counter() - t0)

    def _predict(self, a, b):
        return self._timed("predict_ms", self.predictor.predict, a, b)

    def _match(self, pair: PredictionPair, init=None):
        return self._timed("match_ms", match_pointmaps, pair.X_ii, pair.X_ji, pair.F_i, pair.F_j, init=init,
                           refine=self.config.refine_matches)

    def _build_index(self, first_frame):
        cfg = self.config
        stored = getattr(self.predictor, "codebook", None)
        stored = stored() if callable(stored) else None
        if cfg.codebook:
            cb = Codebook.load(cfg.codebook)
        elif stored is not None:
            cb = stored
        else:
            train = getattr(self.predictor, "training_descriptors", None)
            X = train() if train is not None else self.predictor.encode(first_frame).desc
            X = np.asarray(X).reshape(-1, np.shape(X)[-1])
            cb = Codebook.train(X, k=min(cfg.codebook_words, max(len(X) // 8, 1)), seed=cfg.seed)
        self.index = RetrievalIndex(cb)

    def _index_keyframe(self, kf: Keyframe):
        kf.signature = self._timed("retrieval_ms", self.index.add, kf.id, self.predictor.encode(kf.frame))

    def _optimize(self):
        cfg = self.config
        _, st = self._timed("backend_ms", global_optimize, self.graph, cfg.mode, cfg.robust, cfg.intrinsics,
                            max_iters=cfg.backend_iters)
        self.stats["backend_iterations"].append(st["iterations"])

    def _new_keyframe(self, frame, pair: PredictionPair, T_wc: Sim3) -> Keyframe:
        ts = float(self.predictor.timestamps()[frame])
        kf = Keyframe(len(self.graph), pair.X_ii.copy(), pair.C_i.copy(),
                      FeatureMap(pair.F_i.desc.copy(), pair.F_i.conf.copy()), T_wc, frame, ts)
        self.stats["keyframe_frames"].append(int(frame))
        return kf

    def _attach(self, kf: Keyframe, parent: Keyframe, m_fk: MatchSet):
        """Add ``kf`` linked to ``parent``; ``m_fk`` has ``kf`` on side a and ``parent`` on side b."""
        m_pk = self._match(self._predict(parent.frame, kf.frame))
        self.graph.add_keyframe(kf, m_pk, m_fk, parent=parent.id)
        self.frame_poses[kf.frame] = (kf.id, Sim3.identity())

    def _close_loops(self, kf: Keyframe, exclude):
        cfg = self.config
        hits = self._timed("retrieval_ms", self.index.query, kf.signature, cfg.top_k, cfg.omega_r, exclude)
        for cand_id, _score in hits:
            if self.graph.has_edge(cand_id, kf.id):
                continue
            cand = self.graph.keyframe(cand_id)
            edge, _ = self._timed("loop_ms", accept_loop_edge, cand_id, kf.id, self._predict(cand.frame, kf.frame),
                                  self._predict(kf.frame, cand.frame), cfg.omega_l)
            if edge is not None:
                self.graph.edges.append(edge)
                self.stats["loop_edges"].append((int(cand_id), int(kf.id)))

    # -- operations --------------------------------------------------------

    def initialize(self, frame) -> Keyframe:
        pair = self._predict(frame, frame)
        kf = self._new_keyframe(frame, pair, Sim3.identity())
        self.graph.add_keyframe(kf)
        self.frame_poses[frame] = (kf.id, Sim3.identity())
        self._build_index(frame)
        self._index_keyframe(kf)
        self.current = kf.id
        self.stats["frames"] += 1
        self.stats["tracked"] += 1
        return kf

    def process_frame(self, frame):
        if self.current is None:
            return self.initialize(frame)
        self.stats["frames"] += 1
        if self.lost:
            self.relocalize(frame)
            return None
        cfg = self.config
        kf = self.graph.keyframe(self.current)
        pair = self._predict(frame, kf.frame)
        matches = self._match(pair, init=self._last_matches)
        try:
            T_kf, matches, st = self._timed("track_ms", solve_pose, kf, pair, self._last_T, cfg.mode, cfg.robust,
                                            cfg.intrinsics, matches=matches)
        except TrackingLost:
            self.lost = True
            self.relocalize(frame)
            return None
        self.stats["tracked"] += 1
        self.stats["tracking_iterations"].append(st["iterations"])
        self._timed("fuse_ms", fuse_canonical, kf, pair.X_ji, pair.C_j, T_kf)
        self.frame_poses[frame] = (kf.id, T_kf)
        if not keyframe_decision(matches, cfg.omega_k):
            self._last_matches, self._last_T = matches, T_kf
            return None
        new = self._new_keyframe(frame, pair, kf.T_wc @ T_kf)
        self._attach(new, kf, matches)
        self._index_and_close(new, exclude=[kf.id])
        self._optimize()
        self.current = new.id
        self._last_matches, self._last_T = None, None
        return new

    def _index_and_close(self, kf: Keyframe, exclude):
        kf.signature = self._timed("retrieval_ms", self.index.signature, self.predictor.encode(kf.frame))
        if self.config.loop_closure:
            self._close_loops(kf, exclude)
        self._timed("retrieval_ms", self.index.add, kf.id, kf.signature)

    def relocalize(self, frame) -> bool:
        """Try to re-attach ``frame`` to a retrieved keyframe; stays lost on failure."""
        cfg = self.config
        sig = self._timed("retrieval_ms", self.index.signature, self.predictor.encode(frame))
        hits = self._timed("retrieval_ms", self.index.query, sig, cfg.top_k, cfg.reloc_score_factor * cfg.omega_r)
        for cand_id, _score in hits:
            cand = self.graph.keyframe(cand_id)
            pair = self._predict(frame, cand.frame)
            matches = self._match(pair)
            if not matches.valid_fraction > cfg.reloc_fraction:
                continue
            try:
                T_kf, matches, _ = self._timed("track_ms", solve_pose, cand, pair, None, cfg.mode, cfg.robust,
                                               cfg.intrinsics, matches=matches)
            except TrackingLost:
                continue
            new = self._new_keyframe(frame, pair, cand.T_wc @ T_kf)
            self._attach(new, cand, matches)
            new.signature = sig
            self.index.add(new.id, sig)
            self._optimize()
            self.current = new.id
            self.lost = False
            self._last_matches, self._last_T = None, None
            self.stats["relocalisations"] += 1
            self.stats["tracked"] += 1
            return True
        self.stats["lost_frames"].append(int(frame))
        return False

    # -- outputs -----------------------------------------------------------

    def trajectory(self) -> Trajectory:
        ts = self.predictor.timestamps()
        frames = sorted(self.frame_poses)
        poses = []
        for f in frames:
            kf_id, T_kf = self.frame_poses[f]
            poses.append(self.graph.keyframe(kf_id).T_wc @ T_kf)
        return Trajectory(np.asarray(ts)[frames], poses)

    def point_cloud(self) -> np.ndarray:
        """Union of canonical pointmaps in world coordinates, low-confidence pixels dropped."""
        if not self.graph.keyframes:
            return np.zeros((0, 3))
        cfg = self.config
        maps = []
        for kf in self.graph.keyframes:
            X = calibrate_pointmap(kf.X, cfg.intrinsics) if cfg.calibrated else kf.X
            maps.append((kf, X.reshape(-1, 3), kf.C.ravel()))
        conf = np.concatenate([c for _, _, c in maps])
        thr = np.percentile(conf, cfg.map_conf_percentile) if cfg.map_conf_percentile > 0 else -np.inf
        out = [kf.T_wc.act(X[(c >= thr) & (np.linalg.norm(X, axis=1) > 1e-12)]) for kf, X, c in maps]
        return np.concatenate(out)

    def report(self) -> dict:
        st = self.stats
        return {
            "frames": st["frames"],
            "tracked_frames": st["tracked"],
            "lost_frames": st["lost_frames"],
            "keyframes": len(self.graph),
            "keyframe_frames": st["keyframe_frames"],
            "edges": len(self.graph.edges),
            "loop_edges": [list(e) for e in st["loop_edges"]],
            "relocalisations": st["relocalisations"],
            "tracking_gn_iterations": st["tracking_iterations"],
            "backend_gn_iterations": st["backend_iterations"],
            "timings_ms": {k: round(v, 3) for k, v in sorted(self.timings.items())},
        }

    def run(self, frames=None):
        frames = range(self.predictor.n_frames) if frames is None else frames
        t0 = time.perf_counter()
        for f in frames:
            self.process_frame(f)
        self.timings["total_ms"] += 1000.0 * (time.perf_counter() - t0)
        return self.trajectory(), self.point_cloud(), self.report()


def synthetic_predictor(kind, n_frames, config: SlamConfig, scene_seed=None) -> SyntheticPredictor:
    seed = config.seed if scene_seed is None else scene_seed
    scene = make_scene(seed)
    poses = make_trajectory(kind, n_frames, seed)
    return SyntheticPredictor(scene, poses, config.noise, config.resolution, seed=config.seed)


def run(config: SlamConfig, predictor, out_dir=None):
    """Run the full loop; with ``out_dir`` write trajectory.txt, map.ply, report.json and config.txt."""
    slam = Slam(config, predictor)
    traj, cloud, report = slam.run()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_tum(os.path.join(out_dir, "trajectory.txt"), traj)
        write_ply(os.path.join(out_dir, "map.ply"), cloud)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2)
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(config.to_text())
    return traj, cloud, report, slam


def record(config: SlamConfig, predictor, stream_dir):
    """Run once while saving every served prediction and the codebook as a replayable stream."""
    rec = RecordingPredictor(predictor, stream_dir)
    slam = Slam(config, rec)
    slam.run()
    rec.save_codebook(slam.index.codebook)
    return slam


__all__ = ["record", "SlamConfig", "Predictor", "SyntheticPredictor", "StreamPredictor", "RecordingPredictor", "Slam",
           "run", "synthetic_predictor", "read_pair", "write_pair", "read_meta", "write_meta", "PredictorError"]
