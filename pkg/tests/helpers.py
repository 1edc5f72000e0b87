import numpy as np

from latentloc.encoders import ModelConfig, build_model
from latentloc.geometry import SceneFrame


def small_model(seed=0, scenes=("a",), n_ref=50, score_fn="cosine", depth=2, latent=16, feature_dim=8,
                schedule="linear"):
    rng = np.random.default_rng(seed + 100)
    entries = {}
    for sid in scenes:
        t = rng.uniform(-0.5, 0.5, size=(n_ref, 3))
        t[:, 1] *= 0.01
        yaw = rng.uniform(-np.pi, np.pi, size=n_ref)
        q = np.column_stack([np.zeros(n_ref), np.sin(yaw / 2), np.zeros(n_ref), np.cos(yaw / 2)])
        entries[sid] = (SceneFrame([0.0, 0.0, 0.0], 100.0), t, q)
    cfg = ModelConfig(feature_dim=feature_dim, latent_dim=latent, trunk_width=12, pose_depth=depth,
                      score_fn=score_fn, score_hidden=6, fourier_schedule=schedule)
    return build_model(entries, cfg, seed=seed)
