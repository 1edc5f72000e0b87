"""Datasets, the synthetic descriptor source, and on-disk formats.

Formats
-------
Pose table
    Comma-delimited text, header ``image_id,tx,ty,tz,qx,qy,qz,qw``.
Descriptor file
    Little-endian binary: magic ``IMPD``, uint32 version (1), uint32 count,
    uint32 dim, then ``count*dim`` float32 values row-major.  A sidecar
    ``<path>.ids.csv`` with header ``image_id,row`` maps ids to rows.
Checkpoint
    Little-endian binary: magic ``IMPC``, uint32 version (1), uint64 length of
    a UTF-8 JSON metadata block, the block itself, then float64 parameter
    blocks row-major in the order listed under ``"blocks"`` in the metadata.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .encoders import ModelConfig, MultiSceneModel, PoseEncoder, SceneModel, model_config_of
from .errors import (
    DimensionError,
    FormatError,
    InvalidArgumentError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .geometry import Frame, Pose, SceneFrame, yaw_quaternion
from .nn import DenseLayer, FourierConfig, Mlp

POSE_COLUMNS = ("image_id", "tx", "ty", "tz", "qx", "qy", "qz", "qw")
DESCRIPTOR_MAGIC = b"IMPD"
DESCRIPTOR_VERSION = 1
CHECKPOINT_MAGIC = b"IMPC"
CHECKPOINT_VERSION = 1
QUAT_REPAIR_TOL = 1e-3


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


@dataclass
class SceneDataset:
    """Posed descriptors of one scene.  Poses are in the world frame."""

    scene_id: str
    frame: SceneFrame
    image_ids: list[str]
    t: np.ndarray
    q: np.ndarray
    features: np.ndarray
    split: np.ndarray  # "train" / "test" per sample
    runs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.split = np.asarray(self.split, dtype=object)
        n = len(self.image_ids)
        if not (self.t.shape[0] == self.q.shape[0] == self.features.shape[0] == self.split.shape[0] == n):
            raise DimensionError("dataset arrays differ in length")
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        if len(set(self.image_ids)) != n:
            raise InvalidArgumentError("duplicate image ids in dataset")
        if self.runs is None:
            self.runs = np.zeros(n, dtype=np.int64)
        tr = self.split_indices("train")
        if tr.size:
            p = self.frame.to_normalized(self.t[tr])
            if np.abs(p).max() > 0.5 + 1e-9:
                raise InvalidArgumentError("scene frame does not map train positions into [-0.5, 0.5]")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def split_indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == name)

    def normalized_poses(self, name: str = "train") -> tuple[np.ndarray, np.ndarray]:
        idx = self.split_indices(name)
        return self.frame.to_normalized(self.t[idx]), self.q[idx]


def make_dataset(scene_id, image_ids, t, q, features, split, runs=None, meta=None) -> SceneDataset:
    """Build a dataset whose frame is computed from its train split."""
    split = np.asarray(split, dtype=object)
    t = np.asarray(t, dtype=np.float64)
    tr = split == "train"
    frame = SceneFrame.from_positions(t[tr] if tr.any() else t)
    return SceneDataset(scene_id, frame, list(image_ids), t, q, features, split, runs, meta or {})


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------

TRAJECTORIES = ("loop", "grid", "figure8")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    trajectory: str = "loop"
    extent_m: float = 1000.0
    n_train: int = 2000
    n_test: int = 500
    runs: int = 2
    feature_dim: int = 64
    oracle_seed: int = 0
    sigma_obs: float = 0.02
    sigma_run: float = 0.05
    lateral_std_m: float = 0.5
    altitude_std_m: float = 0.05
    min_wavelength_m: float = 40.0
    max_wavelength_m: float = 8000.0
    heading_frequency: float = 0.3
    coarse_fraction: float = 0.25
    scene_id: str = "toy"

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise InvalidArgumentError(f"unknown trajectory {self.trajectory!r}")
        if not self.extent_m > 0 or self.runs < 1:
            raise InvalidArgumentError("extent_m must be positive and runs >= 1")
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise InvalidArgumentError("feature_dim must be a positive even number")
        if self.n_train < 1 or self.n_test < 0:
            raise InvalidArgumentError("need n_train >= 1 and n_test >= 0")


def _polyline(cfg: SyntheticSceneConfig, resolution: int = 20000):
    """Dense points along the trajectory, plus whether it closes on itself."""
    e = cfg.extent_m
    s = np.linspace(0.0, 1.0, resolution + 1)
    if cfg.trajectory == "loop":
        a = 2 * np.pi * s
        pts = np.column_stack([0.5 * e * np.cos(a), np.zeros_like(a), 0.5 * e * np.sin(a)])
        return pts, True
    if cfg.trajectory == "figure8":
        a = 2 * np.pi * s
        pts = np.column_stack([0.5 * e * np.sin(a), np.zeros_like(a), 0.25 * e * np.sin(2 * a)])
        return pts, True
    # serpentine through a 3x3 block street grid
    h = 0.5 * e
    way = np.array(
        [[-h, -h], [h, -h], [h, 0], [-h, 0], [-h, h], [h, h], [0, h], [0, -h]], dtype=np.float64
    )
    seg = np.linalg.norm(np.diff(way, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    d = s * cum[-1]
    x = np.interp(d, cum, way[:, 0])
    z = np.interp(d, cum, way[:, 1])
    return np.column_stack([x, np.zeros_like(x), z]), False


def _sample_trajectory(cfg: SyntheticSceneConfig, n: int, phase: float, rng):
    pts, closed = _polyline(cfg)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    length = cum[-1]
    if closed:
        d = ((np.arange(n) + phase) / n) * length
    else:
        d = ((np.arange(n) + phase) / max(n, 1)) * length
    d = np.clip(d, 0.0, length)
    pos = np.column_stack([np.interp(d, cum, pts[:, j]) for j in range(3)])
    k = np.clip(np.searchsorted(cum, d, side="right") - 1, 0, len(seg) - 1)
    tangent = (pts[k + 1] - pts[k]) / seg[k][:, None]
    yaw = np.arctan2(tangent[:, 0], tangent[:, 2])
    left = np.column_stack([tangent[:, 2], np.zeros(n), -tangent[:, 0]])
    pos = pos + left * rng.normal(0.0, cfg.lateral_std_m, size=(n, 1))
    pos[:, 1] += rng.normal(0.0, cfg.altitude_std_m, size=n)
    return pos, yaw


@dataclass
class DescriptorOracle:
    """Smooth pose-to-descriptor map: paired sin/cos of seeded random projections of
    (position / extent, heading unit vector), scaled to unit norm."""

    weights: np.ndarray  # (F/2, 5)
    phases: np.ndarray  # (F/2,)
    extent_m: float

    @classmethod
    def from_config(cls, cfg: SyntheticSceneConfig) -> "DescriptorOracle":
        rng = np.random.default_rng([cfg.oracle_seed, 7])
        m = cfg.feature_dim // 2
        direction = rng.normal(size=(m, 3))
        direction[:, 1] *= 0.1  # little sensitivity to altitude
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        lo = 2 * np.pi * cfg.extent_m / cfg.max_wavelength_m
        hi = 2 * np.pi * cfg.extent_m / cfg.min_wavelength_m
        omega = np.exp(rng.uniform(np.log(lo), np.log(hi), size=m))
        # a coarse band of wavelengths 2-8x the extent keeps similarity monotone across the map
        n_coarse = int(round(cfg.coarse_fraction * m))
        omega[:n_coarse] = 2 * np.pi / rng.uniform(2.0, 8.0, size=n_coarse)
        w = np.zeros((m, 5))
        w[:, :3] = direction * omega[:, None]
        w[:, 3:] = rng.normal(size=(m, 2)) * cfg.heading_frequency
        return cls(w, rng.uniform(0, 2 * np.pi, size=m), float(cfg.extent_m))

    def __call__(self, t_world: np.ndarray, yaw: np.ndarray) -> np.ndarray:
        u = np.column_stack([np.asarray(t_world) / self.extent_m, np.cos(yaw), np.sin(yaw)])
        arg = u @ self.weights.T + self.phases
        e = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
        return e / np.linalg.norm(e, axis=1, keepdims=True)


def generate_synthetic_scene(cfg: SyntheticSceneConfig = SyntheticSceneConfig()) -> SceneDataset:
    """Posed descriptors along a trajectory, one appearance bias per run.

    Train samples are split evenly over ``cfg.runs`` traversals; test samples come
    from one extra held-out traversal.  Each traversal starts at its own random
    offset along the path.  Features are rounded to float32 so the dataset is
    identical after a round trip through the descriptor file format.
    """
    rng = np.random.default_rng([cfg.oracle_seed, 11])
    oracle = DescriptorOracle.from_config(cfg)
    counts = [cfg.n_train // cfg.runs + (1 if r < cfg.n_train % cfg.runs else 0) for r in range(cfg.runs)]
    counts.append(cfg.n_test)
    ids, ts, yaws, feats, split, runs = [], [], [], [], [], []
    for r, n in enumerate(counts):
        if n == 0:
            continue
        pos, yaw = _sample_trajectory(cfg, n, rng.uniform(0.0, 1.0), rng)
        bias = rng.normal(0.0, cfg.sigma_run, size=cfg.feature_dim)
        noise = rng.normal(0.0, cfg.sigma_obs, size=(n, cfg.feature_dim))
        f = oracle(pos, yaw) + bias + noise
        held_out = r == cfg.runs
        ids += [f"{'test' if held_out else 'train'}_r{r}_{i:05d}" for i in range(n)]
        ts.append(pos)
        yaws.append(yaw)
        feats.append(f)
        split += ["test" if held_out else "train"] * n
        runs += [r] * n
    t = np.concatenate(ts)
    q = yaw_quaternion(np.concatenate(yaws))
    features = np.concatenate(feats).astype(np.float32).astype(np.float64)
    return make_dataset(cfg.scene_id, ids, t, q, features, split, np.asarray(runs),
                        {"synthetic": asdict(cfg)})


def dataset_stats(ds: SceneDataset) -> dict:
    """Median nearest-neighbour spacing of train poses, map diameter, and counts."""
    tr = ds.split_indices("train")
    if tr.size == 0:
        raise InvalidArgumentError("dataset has no train samples")
    p = ds.t[tr]
    spacing = None
    if tr.size >= 2:
        spacing = float(np.median(kernels.nearest_neighbor_distances(p)))
    diameter = 0.0
    for s in range(0, p.shape[0], 512):
        d = np.sqrt(((p[s : s + 512, None, :] - p[None, :, :]) ** 2).sum(axis=2))
        diameter = max(diameter, float(d.max()))
    return {
        "median_nn_spacing_m": spacing,
        "map_diameter_m": diameter,
        "n_train": int(tr.size),
        "n_test": int(ds.split_indices("test").size),
        "runs": int(len(np.unique(ds.runs[tr]))),
    }


# --------------------------------------------------------------------------
# Pose tables
# --------------------------------------------------------------------------


class PoseTableError(FormatError, InvalidArgumentError):
    pass


def write_pose_table(path, image_ids: Sequence[str], t: np.ndarray, q: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_COLUMNS)
        for i, name in enumerate(image_ids):
            w.writerow([name] + [repr(float(v)) for v in t[i]] + [repr(float(v)) for v in q[i]])


def read_pose_table(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Parse and validate a pose table; quaternions within 1e-3 of unit norm are renormalized.

    Rows already unit to rounding are kept exactly as written so that tables round-trip bit for bit.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PoseTableError(f"{path}: empty pose table")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in POSE_COLUMNS if c not in header]
    if missing:
        raise PoseTableError(f"{path}: missing columns {missing}")
    col = [header.index(c) for c in POSE_COLUMNS]
    ids, vals, seen = [], [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) < len(header):
            raise PoseTableError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        name = row[col[0]].strip()
        if name in seen:
            raise PoseTableError(f"{path}:{lineno}: duplicate image_id {name!r}")
        try:
            v = np.array([float(row[c]) for c in col[1:]])
        except ValueError as exc:
            raise PoseTableError(f"{path}:{lineno}: {exc}") from None
        if not np.isfinite(v).all():
            raise PoseTableError(f"{path}:{lineno}: non-finite value")
        n = np.linalg.norm(v[3:])
        if abs(n - 1.0) > QUAT_REPAIR_TOL:
            raise PoseTableError(f"{path}:{lineno}: quaternion norm {n:.6g} is not unit")
        if abs(n - 1.0) > 1e-12:
            v[3:] /= n
        seen.add(name)
        ids.append(name)
        vals.append(v)
    arr = np.array(vals).reshape(-1, 7)
    return ids, arr[:, :3], arr[:, 3:]


def load_poses(path) -> list[tuple[str, Pose]]:
    ids, t, q = read_pose_table(path)
    return [(name, Pose(t[i], q[i], Frame.WORLD)) for i, name in enumerate(ids)]


# --------------------------------------------------------------------------
# Descriptor files
# --------------------------------------------------------------------------

_DESC_HEADER = struct.Struct("<4sIII")


def _sidecar(path) -> str:
    return f"{path}.ids.csv"


def save_descriptors(path, image_ids: Sequence[str], matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(np.asarray(matrix), dtype="<f4")
    if m.ndim != 2:
        m = m.reshape(len(image_ids), -1) if len(image_ids) else m.reshape(0, 0)
    if m.shape[0] != len(image_ids):
        raise DimensionError("descriptor rows and ids differ in count")
    with open(path, "wb") as fh:
        fh.write(_DESC_HEADER.pack(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())
    with open(_sidecar(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "row"])
        for i, name in enumerate(image_ids):
            w.writerow([name, i])


def load_descriptors(path) -> tuple[np.ndarray, list[str]]:
    """Returns the float32 matrix and the image id of every row."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _DESC_HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the descriptor header")
    magic, version, count, dim = _DESC_HEADER.unpack_from(blob)
    if magic != DESCRIPTOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DESCRIPTOR_VERSION:
        raise VersionMismatchError(f"{path}: descriptor version {version}, expected {DESCRIPTOR_VERSION}")
    need = _DESC_HEADER.size + 4 * count * dim
    if len(blob) < need:
        raise TruncatedPayloadError(f"{path}: expected {need} bytes, found {len(blob)}")
    if len(blob) > need:
        raise FormatError(f"{path}: {len(blob) - need} trailing bytes after {count}x{dim} payload")
    m = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=_DESC_HEADER.size).reshape(count, dim)
    ids = [None] * count
    with open(_sidecar(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["image_id", "row"]:
        raise FormatError(f"{_sidecar(path)}: expected header image_id,row")
    for row in rows[1:]:
        if not row:
            continue
        r = int(row[1])
        if not 0 <= r < count or ids[r] is not None:
            raise FormatError(f"{_sidecar(path)}: bad or repeated row index {r}")
        ids[r] = row[0]
    if any(i is None for i in ids):
        raise FormatError(f"{_sidecar(path)}: {sum(i is None for i in ids)} rows without an image id")
    if len(set(ids)) != count:
        raise FormatError(f"{_sidecar(path)}: duplicate image ids")
    return m.copy(), ids


# --------------------------------------------------------------------------
# Scene directories (used by the command line)
# --------------------------------------------------------------------------


def save_scene_dir(ds: SceneDataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for name in ("train", "test"):
        idx = ds.split_indices(name)
        ids = [ds.image_ids[i] for i in idx]
        write_pose_table(os.path.join(directory, f"{name}_poses.csv"), ids, ds.t[idx], ds.q[idx])
        save_descriptors(os.path.join(directory, f"{name}.impd"), ids, ds.features[idx])
    meta = {
        "scene_id": ds.scene_id,
        "frame": {"center": [float(c) for c in ds.frame.center], "scale": ds.frame.scale},
        "runs": {ds.image_ids[i]: int(ds.runs[i]) for i in range(len(ds.image_ids))},
        "meta": ds.meta,
    }
    with open(os.path.join(directory, "scene.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_scene_dir(directory) -> SceneDataset:
    with open(os.path.join(directory, "scene.json")) as fh:
        meta = json.load(fh)
    ids, ts, qs, fs, split = [], [], [], [], []
    for name in ("train", "test"):
        pid, t, q = read_pose_table(os.path.join(directory, f"{name}_poses.csv"))
        m, did = load_descriptors(os.path.join(directory, f"{name}.impd"))
        row = {d: i for i, d in enumerate(did)}
        missing = [p for p in pid if p not in row]
        if missing:
            raise FormatError(f"{directory}: {len(missing)} {name} poses without descriptors")
        fs.append(m[[row[p] for p in pid]].astype(np.float64).reshape(len(pid), -1 if m.size else 0))
        ids += pid
        ts.append(t)
        qs.append(q)
        split += [name] * len(pid)
    dims = {f.shape[1] for f in fs if f.shape[0]}
    if len(dims) > 1:
        raise DimensionError(f"{directory}: train and test descriptors differ in dimension")
    dim = dims.pop() if dims else 0
    fs = [f.reshape(-1, dim) for f in fs]
    frame = SceneFrame(meta["frame"]["center"], meta["frame"]["scale"])
    runs = np.array([meta.get("runs", {}).get(i, 0) for i in ids], dtype=np.int64)
    return SceneDataset(meta["scene_id"], frame, ids, np.concatenate(ts), np.concatenate(qs),
                        np.concatenate(fs), split, runs, meta.get("meta", {}))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sIQ")


def _mlp_meta(mlp: Mlp) -> list[str]:
    return [l.activation for l in mlp.layers]


def _blocks(model: MultiSceneModel) -> list[tuple[str, np.ndarray]]:
    out = list(model.trunk_parameters())
    for sid in sorted(model.scenes):
        s = model.scenes[sid]
        out += s.named_parameters()
        out += [(f"scenes.{sid}.initial_t", s.initial_t), (f"scenes.{sid}.initial_q", s.initial_q)]
    return out


def checkpoint_bytes(model: MultiSceneModel, extra: dict | None = None) -> bytes:
    """Serialize every parameter, the scene frames, initial poses and configuration."""
    cfg = model_config_of(model)
    scenes = []
    for sid in sorted(model.scenes):
        s = model.scenes[sid]
        scenes.append(
            {
                "scene_id": sid,
                "frame": {"center": [float(c) for c in s.frame.center], "scale": s.frame.scale},
                "fourier": {"num_frequencies": s.pose_encoder.fourier.num_frequencies,
                            "schedule": s.pose_encoder.fourier.schedule},
                "score_fn": s.score_fn,
                "pose_activations": _mlp_meta(s.pose_encoder.mlp),
                "score_head_activations": _mlp_meta(s.score_head) if s.score_head is not None else None,
            }
        )
    blocks = _blocks(model)
    meta = {
        "format": "latentloc-checkpoint",
        "model": asdict(cfg),
        "trunk_activations": _mlp_meta(model.trunk),
        "scenes": scenes,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "extra": extra or {},
    }
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(text)))
    buf.write(text)
    for _, a in blocks:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def _mlp_from(blocks: dict, prefix: str, activations: list[str]) -> Mlp:
    layers = []
    for i, act in enumerate(activations):
        w = blocks[f"{prefix}layers.{i}.weights"]
        b = blocks[f"{prefix}layers.{i}.bias"]
        layers.append(DenseLayer(w, b, act))
    return Mlp(layers)


def model_from_bytes(blob: bytes) -> tuple[MultiSceneModel, dict]:
    """Inverse of ``checkpoint_bytes``; returns ``(model, extra metadata)``."""
    if len(blob) < _CKPT_HEADER.size:
        raise TruncatedPayloadError("checkpoint shorter than its header")
    magic, version, meta_len = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = _CKPT_HEADER.size
    if len(blob) < off + meta_len:
        raise TruncatedPayloadError("checkpoint metadata block is truncated")
    try:
        meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint metadata: {exc}") from None
    off += meta_len
    blocks = {}
    for spec in meta["blocks"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        if len(blob) < off + 8 * n:
            raise TruncatedPayloadError(f"checkpoint block {spec['name']} is truncated")
        blocks[spec["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(blob):
        raise DimensionError(f"checkpoint has {len(blob) - off} bytes beyond its declared blocks")
    try:
        cfg = ModelConfig(**meta["model"])
        trunk = _mlp_from(blocks, "trunk.", meta["trunk_activations"])
        scenes = {}
        for s in meta["scenes"]:
            sid = s["scene_id"]
            pre = f"scenes.{sid}."
            fourier = FourierConfig(**s["fourier"])
            pe = PoseEncoder(fourier, _mlp_from(blocks, pre + "pose_encoder.", s["pose_activations"]))
            proj = DenseLayer(blocks[pre + "projection.weights"], blocks[pre + "projection.bias"], "identity")
            head = None
            if s["score_head_activations"] is not None:
                head = _mlp_from(blocks, pre + "score_head.", s["score_head_activations"])
            frame = SceneFrame(s["frame"]["center"], s["frame"]["scale"])
            scenes[sid] = SceneModel(sid, pe, proj, frame, blocks[pre + "initial_t"], blocks[pre + "initial_q"],
                                     s["score_fn"], head)
        model = MultiSceneModel(trunk, scenes)
    except KeyError as exc:
        raise DimensionError(f"checkpoint lacks block {exc}") from None
    if model_config_of(model).feature_dim != cfg.feature_dim or model_config_of(model).latent_dim != cfg.latent_dim:
        raise DimensionError("checkpoint blocks disagree with the declared model configuration")
    return model, meta.get("extra", {})


def save_checkpoint(model: MultiSceneModel, path, extra: dict | None = None) -> None:
    blob = checkpoint_bytes(model, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[MultiSceneModel, dict]:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def scene_entry(ds: SceneDataset) -> tuple[SceneFrame, np.ndarray, np.ndarray]:
    """``(frame, initial_t, initial_q)`` for ``build_model``: the normalized train poses."""
    t, q = ds.normalized_poses("train")
    return ds.frame, t, q
