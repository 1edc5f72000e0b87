"""Hierarchical sample / score / resample search for the pose of one image."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import kernels
from .encoders import MultiSceneModel, SceneModel, encode_image
from .errors import DegenerateVectorError, InvalidArgumentError
from .geometry import Frame, NoiseVector, Pose, SceneFrame, average_pose_arrays, canonicalize_quats
from .nn import NORM_FLOOR, score_rows

INIT_MODES = ("reference", "grid2d")


@dataclass(frozen=True)
class LocalizerConfig:
    n_candidates: int = 4096
    iterations: int = 6
    top_b: int = 100
    avg_count: int = 256
    noise: NoiseVector = field(default_factory=NoiseVector)
    init_mode: str = "reference"
    score_fn: str | None = None  # None: the model's own score function
    seed: int = 0

    def __post_init__(self):
        if not (self.n_candidates >= self.top_b >= 1):
            raise InvalidArgumentError("need n_candidates >= top_b >= 1")
        if self.iterations < 0 or self.avg_count < 1:
            raise InvalidArgumentError("iterations must be >= 0 and avg_count >= 1")
        if self.init_mode not in INIT_MODES:
            raise InvalidArgumentError(f"unknown init mode {self.init_mode!r}")

    def with_(self, **kw) -> "LocalizerConfig":
        return replace(self, **kw)


@dataclass
class CandidateSet:
    """Candidate poses in the normalized frame; ``scores``/``raw`` are None until scored."""

    t: np.ndarray
    q: np.ndarray
    k: int = 0
    scores: np.ndarray | None = None
    raw: np.ndarray | None = None

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def poses(self) -> list[Pose]:
        return [Pose(t, q, Frame.NORMALIZED) for t, q in zip(self.t, self.q)]


def noise_at(noise: NoiseVector, k: int) -> NoiseVector:
    """Sampling variance used when proposing from the set scored at iteration ``k``."""
    return noise.at_iteration(k)


def initial_candidates(scene: SceneModel, cfg: LocalizerConfig, rng) -> CandidateSet:
    n = cfg.n_candidates
    ref_t, ref_q = scene.initial_t, scene.initial_q
    if cfg.init_mode == "reference":
        idx = rng.integers(0, ref_t.shape[0], size=n)
        return CandidateSet(ref_t[idx].copy(), ref_q[idx].copy(), 0)
    side = int(math.ceil(math.sqrt(n)))
    lo, hi = ref_t.min(axis=0), ref_t.max(axis=0)
    gx, gz = np.meshgrid(np.linspace(lo[0], hi[0], side), np.linspace(lo[2], hi[2], side), indexing="ij")
    t = np.empty((n, 3))
    t[:, 0] = gx.reshape(-1)[:n]
    t[:, 1] = np.median(ref_t[:, 1])
    t[:, 2] = gz.reshape(-1)[:n]
    idx = rng.integers(0, ref_q.shape[0], size=n)
    return CandidateSet(t, ref_q[idx].copy(), 0)


def score_candidates(scene: SceneModel, image_latent: np.ndarray, cs: CandidateSet,
                     score_fn: str | None = None) -> CandidateSet:
    a = np.asarray(image_latent, dtype=np.float64).reshape(-1)
    if np.linalg.norm(a) <= NORM_FLOOR:
        raise DegenerateVectorError("image latent is zero")
    if len(cs) == 0:
        return CandidateSet(cs.t, cs.q, cs.k, np.zeros(0), np.zeros(0))
    b = scene.pose_encoder.forward(cs.t, cs.q)[0]
    s, raw, _ = score_rows(score_fn or scene.score_fn, np.broadcast_to(a, b.shape), b, scene.score_head)
    return CandidateSet(cs.t, cs.q, cs.k, s, raw)


def top_indices(values: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest values; ties go to the lower index."""
    return np.argsort(-np.asarray(values), kind="stable")[:count]


def mixture_components(scores: np.ndarray, raw: np.ndarray, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``b`` components and their normalized mixture weights.

    Weights are proportional to score; when every score is zero the top-``b``
    by raw similarity are used with uniform weights.
    """
    if (scores > 0).any():
        idx = top_indices(scores, b)
        w = scores[idx]
        return idx, w / w.sum()
    idx = top_indices(raw, b)
    return idx, np.full(idx.shape[0], 1.0 / idx.shape[0])


def sample_mixture(t: np.ndarray, q: np.ndarray, weights: np.ndarray, n: int,
                   std_t: np.ndarray, std_r: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` poses: pick a component by weight, then perturb it with Gaussian noise."""
    comp = rng.choice(weights.shape[0], size=n, p=weights)
    dt = rng.standard_normal((n, 3)) * std_t
    de = rng.standard_normal((n, 3)) * std_r
    return kernels.perturb(t[comp], q[comp], dt, de)


def propose_next(cs: CandidateSet, cfg: LocalizerConfig, rng, frame: SceneFrame) -> CandidateSet:
    if cs.scores is None:
        raise InvalidArgumentError("propose_next needs a scored candidate set")
    idx, w = mixture_components(cs.scores, cs.raw, cfg.top_b)
    std_t, std_r = noise_at(cfg.noise, cs.k).normalized_std(frame)
    t, q = sample_mixture(cs.t[idx], cs.q[idx], w, cfg.n_candidates, std_t, std_r, rng)
    return CandidateSet(t, q, cs.k + 1)


def final_estimate(cs: CandidateSet, avg_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Score-weighted average of the ``avg_count`` best candidates (normalized frame).

    If all selected scores are zero the candidates are averaged uniformly.
    """
    idx = top_indices(cs.scores, min(avg_count, len(cs)))
    w = cs.scores[idx]
    if not (w > 0).any():
        w = np.ones_like(w)
    return average_pose_arrays(cs.t[idx], cs.q[idx], w)


@dataclass
class LocalizationResult:
    pose: Pose  # world frame
    diagnostics: list[CandidateSet]
    peak_live_candidates: int
    best_t: list  # normalized position of the top-scored candidate per iteration


def localize(model: MultiSceneModel, features, cfg: LocalizerConfig = LocalizerConfig(), rng=None,
             scene_id: str | None = None, keep_diagnostics: bool = True) -> LocalizationResult:
    """Estimate the world-frame pose of one image from its backbone features.

    With ``keep_diagnostics=False`` only the current candidate set and its
    mixture components are alive at any time, so memory does not grow with K.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    scene = model.scene(scene_id)
    latent = encode_image(model, features, scene.scene_id)
    cs = initial_candidates(scene, cfg, rng)
    diagnostics, best_t = [], []
    peak = 0
    for k in range(cfg.iterations + 1):
        cs = score_candidates(scene, latent, cs, cfg.score_fn)
        best_t.append(cs.t[top_indices(cs.scores, 1)[0]].copy())
        if keep_diagnostics:
            diagnostics.append(cs)
        if k < cfg.iterations:
            nxt = propose_next(cs, cfg, rng, scene.frame)
            peak = max(peak, len(cs) + min(cfg.top_b, len(cs)) + len(nxt))
            cs = nxt
        else:
            peak = max(peak, len(cs))
    t, q = final_estimate(cs, cfg.avg_count)
    pose = Pose(scene.frame.to_world(t), q, Frame.WORLD)
    return LocalizationResult(pose, diagnostics, peak, best_t)


# --------------------------------------------------------------------------
# Complexity accounting
# --------------------------------------------------------------------------


def _dense_flops(layers) -> int:
    return sum(2 * l.in_dim * l.out_dim for l in layers)


def score_flops(scene: SceneModel, score_fn: str | None = None) -> int:
    d = scene.latent_dim
    kind = score_fn or scene.score_fn
    if kind == "cosine":
        return 4 * d  # dot product + candidate norm
    if kind == "l2":
        return 3 * d
    return d + _dense_flops(scene.score_head.layers)


def flops_estimate(model: MultiSceneModel, cfg: LocalizerConfig = LocalizerConfig(),
                   scene_id: str | None = None) -> dict:
    """Closed-form multiply-add count (2 flops per MAC) of one localization."""
    scene = model.scene(scene_id)
    image = _dense_flops(model.trunk.layers) + _dense_flops([scene.projection])
    per_candidate = _dense_flops(scene.pose_encoder.mlp.layers) + score_flops(scene, cfg.score_fn)
    decode = cfg.iterations * cfg.n_candidates * per_candidate
    return {
        "image_head_flops": image,
        "pose_decode_flops": decode,
        "per_candidate_flops": per_candidate,
        "total": image + decode,
        "formula": "image = sum 2*in*out over trunk+projection; "
        "pose_decode = K * N * (sum 2*in*out over pose MLP + score flops); total = image + pose_decode",
    }


# --------------------------------------------------------------------------
# Tables
# --------------------------------------------------------------------------

CANDIDATE_COLUMNS = ("k", "tx", "ty", "tz", "qx", "qy", "qz", "qw", "score")


def candidate_rows(cs: CandidateSet, frame: SceneFrame) -> np.ndarray:
    t = frame.to_world(cs.t)
    scores = cs.scores if cs.scores is not None else np.full(len(cs), np.nan)
    return np.column_stack([np.full(len(cs), cs.k), t, canonicalize_quats(cs.q), scores])


def export_score_map(model: MultiSceneModel, image_latent, probe_t: np.ndarray, probe_q: np.ndarray,
                     scene_id: str | None = None) -> np.ndarray:
    """Score every probe pose (normalized frame); rows follow ``CANDIDATE_COLUMNS`` in world units."""
    scene = model.scene(scene_id)
    cs = CandidateSet(np.asarray(probe_t, dtype=np.float64).reshape(-1, 3),
                      np.asarray(probe_q, dtype=np.float64).reshape(-1, 4), 0)
    if len(cs) == 0:
        return np.zeros((0, len(CANDIDATE_COLUMNS)))
    return candidate_rows(score_candidates(scene, image_latent, cs), scene.frame)


def write_table(fh, columns: Sequence[str], rows, header_lines: Sequence[str] = ()) -> None:
    """Comma-delimited table with optional ``#`` provenance lines, reals at 9 significant digits."""
    for line in header_lines:
        fh.write(f"# {line}\n")
    fh.write(",".join(columns) + "\n")
    for row in rows:
        fh.write(",".join(format_value(v) for v in row) + "\n")


def format_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.9g}"


def table_text(columns, rows, header_lines=()) -> str:
    buf = io.StringIO()
    write_table(buf, columns, rows, header_lines)
    return buf.getvalue()
