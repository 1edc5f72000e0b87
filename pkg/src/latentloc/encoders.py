"""Pose encoder, image head, and the (multi-)scene model that ties them together."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, FrameError, InvalidArgumentError
from .geometry import Frame, Pose, SceneFrame, canonicalize_quats, stack_poses
from .nn import SCORE_FUNCTIONS, DenseLayer, FourierConfig, Mlp, fourier_encode, mlp_forward

POSE_INPUTS = 7  # tx, ty, tz, qx, qy, qz, qw


@dataclass
class ModelConfig:
    feature_dim: int = 64
    latent_dim: int = 256
    trunk_width: int = 256
    pose_width: int | None = None  # hidden width of the pose MLP; defaults to latent_dim
    pose_depth: int = 4
    num_frequencies: int = 11
    fourier_schedule: str = "linear"
    score_fn: str = "cosine"
    score_hidden: int = 64

    def __post_init__(self):
        if not 1 <= self.pose_depth <= 8:
            raise InvalidArgumentError("pose_depth must be between 1 and 8")
        if self.score_fn not in SCORE_FUNCTIONS:
            raise InvalidArgumentError(f"unknown score function {self.score_fn!r}")

    @property
    def fourier(self) -> FourierConfig:
        return FourierConfig(self.num_frequencies, self.fourier_schedule)


@dataclass
class PoseEncoder:
    fourier: FourierConfig
    mlp: Mlp

    def __post_init__(self):
        expect = self.fourier.output_dim(POSE_INPUTS)
        if self.mlp.in_dim != expect:
            raise DimensionError(f"pose MLP takes {self.mlp.in_dim} inputs, Fourier gives {expect}")

    @classmethod
    def init(cls, rng, latent_dim=256, width=None, depth=4, fourier=FourierConfig()) -> "PoseEncoder":
        width = latent_dim if width is None else width
        sizes = [fourier.output_dim(POSE_INPUTS)] + [width] * (depth - 1) + [latent_dim]
        return cls(fourier, Mlp.init(sizes, rng, hidden="relu", output="identity"))

    @property
    def latent_dim(self) -> int:
        return self.mlp.out_dim

    def features(self, t: np.ndarray, q: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.asarray(t, dtype=np.float64), canonicalize_quats(q)], axis=1)
        return fourier_encode(x, self.fourier)

    def forward(self, t: np.ndarray, q: np.ndarray):
        """Latents for normalized-frame pose arrays, plus the MLP cache for backprop."""
        return mlp_forward(self.mlp, self.features(t, q))

    def copy(self) -> "PoseEncoder":
        return PoseEncoder(self.fourier, self.mlp.copy())


def encode_poses(pe: PoseEncoder, poses) -> np.ndarray:
    """One latent row per pose.  Accepts a sequence of normalized ``Pose`` or a ``(t, q)`` pair."""
    if isinstance(poses, tuple) and len(poses) == 2 and isinstance(poses[0], np.ndarray):
        t, q = poses
    else:
        poses = list(poses)
        if any(p.frame is not Frame.NORMALIZED for p in poses):
            raise FrameError("pose encoder expects normalized-frame poses")
        t, q = stack_poses(poses)
    if t.shape[0] == 0:
        return np.zeros((0, pe.latent_dim))
    return pe.forward(t, q)[0]


@dataclass
class SceneModel:
    scene_id: str
    pose_encoder: PoseEncoder
    projection: DenseLayer
    frame: SceneFrame
    initial_t: np.ndarray  # normalized reference positions (n, 3)
    initial_q: np.ndarray  # reference orientations (n, 4)
    score_fn: str = "cosine"
    score_head: Mlp | None = None

    def __post_init__(self):
        self.initial_t = np.asarray(self.initial_t, dtype=np.float64).reshape(-1, 3)
        self.initial_q = np.asarray(self.initial_q, dtype=np.float64).reshape(-1, 4)
        if self.initial_t.shape[0] == 0 or self.initial_t.shape[0] != self.initial_q.shape[0]:
            raise InvalidArgumentError("a scene needs a non-empty, consistent set of initial poses")
        if self.projection.out_dim != self.pose_encoder.latent_dim:
            raise DimensionError("image projection and pose encoder disagree on latent size")
        if self.score_fn == "learned":
            if self.score_head is None or self.score_head.in_dim != self.latent_dim:
                raise DimensionError("learned score needs a head over the latent dimension")

    @property
    def latent_dim(self) -> int:
        return self.pose_encoder.latent_dim

    @property
    def initial_poses(self) -> list[Pose]:
        return [Pose(t, q, Frame.NORMALIZED) for t, q in zip(self.initial_t, self.initial_q)]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        p = self.pose_encoder.mlp.named_parameters(f"scenes.{self.scene_id}.pose_encoder.")
        p += [
            (f"scenes.{self.scene_id}.projection.weights", self.projection.weights),
            (f"scenes.{self.scene_id}.projection.bias", self.projection.bias),
        ]
        if self.score_head is not None:
            p += self.score_head.named_parameters(f"scenes.{self.scene_id}.score_head.")
        return p


@dataclass
class MultiSceneModel:
    """A shared image trunk plus one pose encoder and image projection per scene.

    A single-scene model is simply one with a single entry in ``scenes``.
    """

    trunk: Mlp
    scenes: dict[str, SceneModel] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.scenes.values():
            if s.projection.in_dim != self.trunk.out_dim:
                raise DimensionError(f"scene {s.scene_id}: projection does not fit trunk output")

    @property
    def feature_dim(self) -> int:
        return self.trunk.in_dim

    def scene(self, scene_id: str | None = None) -> SceneModel:
        if scene_id is None:
            if len(self.scenes) != 1:
                raise InvalidArgumentError("scene id required for a multi-scene model")
            return next(iter(self.scenes.values()))
        try:
            return self.scenes[scene_id]
        except KeyError:
            raise InvalidArgumentError(f"unknown scene {scene_id!r}") from None

    def trunk_parameters(self) -> list[tuple[str, np.ndarray]]:
        return self.trunk.named_parameters("trunk.")

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = self.trunk_parameters()
        for sid in sorted(self.scenes):
            out += self.scenes[sid].named_parameters()
        return out


def image_head_forward(model: MultiSceneModel, scene: SceneModel, features: np.ndarray):
    """Batched ``projection(trunk(features))`` with caches for both parts."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != model.feature_dim:
        raise DimensionError(f"expected {model.feature_dim}-dim features, got shape {f.shape}")
    h, trunk_cache = mlp_forward(model.trunk, f)
    proj = Mlp([scene.projection])
    z, proj_cache = mlp_forward(proj, h)
    return z, trunk_cache, proj_cache


def encode_image(model: MultiSceneModel, features, scene_id: str | None = None) -> np.ndarray:
    """Image latent for one feature vector (or a batch of them)."""
    scene = model.scene(scene_id)
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    z = image_head_forward(model, scene, f[None, :] if single else f)[0]
    return z[0] if single else z


L2_INIT_SCALE = 0.1


def build_model(
    scene_frames: dict[str, tuple[SceneFrame, np.ndarray, np.ndarray]],
    cfg: ModelConfig = ModelConfig(),
    seed: int = 0,
) -> MultiSceneModel:
    """Fresh model with one scene per entry ``scene_id -> (frame, initial_t, initial_q)``.

    Scenes are initialized in sorted id order from a single seeded stream.
    """
    rng = np.random.default_rng(seed)
    trunk = Mlp.init([cfg.feature_dim, cfg.trunk_width], rng, output="relu")
    scenes = {}
    for sid in sorted(scene_frames):
        frame, t0, q0 = scene_frames[sid]
        pe = PoseEncoder.init(rng, cfg.latent_dim, cfg.pose_width, cfg.pose_depth, cfg.fourier)
        proj = DenseLayer.init(cfg.trunk_width, cfg.latent_dim, "identity", rng)
        if cfg.score_fn == "l2":
            # 1 - distance is clamped to 0 unless latents start well inside the unit ball
            pe.mlp.layers[-1].weights *= L2_INIT_SCALE
            proj.weights *= L2_INIT_SCALE
        head = None
        if cfg.score_fn == "learned":
            head = Mlp.init([cfg.latent_dim, cfg.score_hidden, 1], rng, output="sigmoid")
        scenes[sid] = SceneModel(sid, pe, proj, frame, t0, q0, cfg.score_fn, head)
    return MultiSceneModel(trunk, scenes)


def model_config_of(model: MultiSceneModel) -> ModelConfig:
    """Recover the architecture description of an existing model."""
    s = next(iter(model.scenes.values()))
    mlp = s.pose_encoder.mlp
    return ModelConfig(
        feature_dim=model.feature_dim,
        latent_dim=s.latent_dim,
        trunk_width=model.trunk.out_dim,
        pose_width=mlp.layers[0].out_dim if len(mlp.layers) > 1 else None,
        pose_depth=len(mlp.layers),
        num_frequencies=s.pose_encoder.fourier.num_frequencies,
        fourier_schedule=s.pose_encoder.fourier.schedule,
        score_fn=s.score_fn,
        score_hidden=s.score_head.layers[0].out_dim if s.score_head is not None else 64,
    )
