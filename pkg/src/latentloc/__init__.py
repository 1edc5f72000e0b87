"""Camera localization by implicit pose encoding: image and pose encoders share a latent
space, and a sample / score / resample loop searches it for the camera pose."""

from .data import (
    SceneDataset,
    SyntheticSceneConfig,
    dataset_stats,
    generate_synthetic_scene,
    load_checkpoint,
    load_descriptors,
    load_poses,
    save_checkpoint,
    save_descriptors,
    scene_entry,
)
from .encoders import ModelConfig, MultiSceneModel, PoseEncoder, build_model, encode_image, encode_poses
from .errors import LatentLocError
from .evaluation import EvalReport, evaluate, retrieval_baseline
from .geometry import Frame, NoiseVector, Pose, SceneFrame, average_poses, geodesic_distance
from .kernels import backend, numba_enabled, set_backend
from .localizer import LocalizerConfig, flops_estimate, localize
from .nn import FourierConfig, fourier_encode, gradient_check
from .training import TrainingConfig, target_score, train, train_multiscene

__version__ = "0.1.0"
