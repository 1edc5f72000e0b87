"""Test-split evaluation, the descriptor-retrieval baseline, ablation sweeps and latent PCA."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .encoders import MultiSceneModel, encode_poses
from .errors import InsufficientDataError, InvalidArgumentError
from .geometry import average_pose_arrays, geodesic_distances
from .localizer import LocalizerConfig, localize

RETRIEVAL_TOP_K = 20


@dataclass
class EvalReport:
    image_ids: list[str]
    t_error_m: np.ndarray
    r_error_deg: np.ndarray
    runtime_ms: np.ndarray
    baseline_t_error_m: np.ndarray | None = None
    baseline_r_error_deg: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def median_t(self) -> float:
        return float(np.median(self.t_error_m))

    @property
    def median_r(self) -> float:
        return float(np.median(self.r_error_deg))

    def summary(self) -> dict:
        out = {
            "queries": len(self.image_ids),
            "median_t_m": self.median_t,
            "mean_t_m": float(np.mean(self.t_error_m)),
            "median_r_deg": self.median_r,
            "mean_r_deg": float(np.mean(self.r_error_deg)),
            "runtime_ms_per_query": float(np.mean(self.runtime_ms)),
        }
        if self.baseline_t_error_m is not None:
            out["baseline_median_t_m"] = float(np.median(self.baseline_t_error_m))
            out["baseline_mean_t_m"] = float(np.mean(self.baseline_t_error_m))
            out["baseline_median_r_deg"] = float(np.median(self.baseline_r_error_deg))
            out["baseline_mean_r_deg"] = float(np.mean(self.baseline_r_error_deg))
        return out

    def rows(self):
        for i, name in enumerate(self.image_ids):
            row = [name, self.t_error_m[i], self.r_error_deg[i], self.runtime_ms[i]]
            if self.baseline_t_error_m is not None:
                row += [self.baseline_t_error_m[i], self.baseline_r_error_deg[i]]
            yield row

    @property
    def columns(self):
        cols = ["image_id", "t_error_m", "r_error_deg", "runtime_ms"]
        if self.baseline_t_error_m is not None:
            cols += ["retrieval_t_error_m", "retrieval_r_error_deg"]
        return cols


def pose_errors(t_est, q_est, t_true, q_true) -> tuple[np.ndarray, np.ndarray]:
    """Translation error (m) and rotation error (degrees) per row."""
    et = np.linalg.norm(np.atleast_2d(t_est) - np.atleast_2d(t_true), axis=1)
    er = np.rad2deg(geodesic_distances(np.atleast_2d(q_est), np.atleast_2d(q_true)))
    return et, er


def retrieval_baseline(ds, top_k: int = RETRIEVAL_TOP_K, split: str = "test"):
    """Cosine nearest neighbours in raw descriptor space; the pose estimate averages
    the poses of the ``top_k`` closest train images uniformly."""
    tr = ds.split_indices("train")
    qi = ds.split_indices(split)
    k = min(top_k, tr.size)
    f = ds.features / np.maximum(np.linalg.norm(ds.features, axis=1, keepdims=True), 1e-300)
    t_out = np.empty((qi.size, 3))
    q_out = np.empty((qi.size, 4))
    for s in range(0, qi.size, 256):
        sim = f[qi[s : s + 256]] @ f[tr].T
        idx = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        for r, row in enumerate(idx):
            t_out[s + r], q_out[s + r] = average_pose_arrays(ds.t[tr[row]], ds.q[tr[row]], np.ones(k))
    return t_out, q_out


def query_generators(seed: int, n: int) -> list:
    """One independent generator per query, in query order."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def evaluate(model: MultiSceneModel, ds, cfg: LocalizerConfig = LocalizerConfig(), seed: int | None = None,
             split: str = "test", baseline: bool = True, limit: int | None = None) -> EvalReport:
    """Localize every query of ``split`` (sorted by image id) and compare with ground truth."""
    seed = cfg.seed if seed is None else seed
    idx = ds.split_indices(split)
    idx = idx[np.argsort([ds.image_ids[i] for i in idx], kind="stable")]
    if limit is not None:
        idx = idx[:limit]
    if idx.size == 0:
        raise InvalidArgumentError(f"split {split!r} is empty")
    rngs = query_generators(seed, idx.size)
    t_est = np.empty((idx.size, 3))
    q_est = np.empty((idx.size, 4))
    ms = np.empty(idx.size)
    for j, i in enumerate(idx):
        start = time.perf_counter()
        res = localize(model, ds.features[i], cfg, rngs[j], ds.scene_id, keep_diagnostics=False)
        ms[j] = 1e3 * (time.perf_counter() - start)
        t_est[j], q_est[j] = res.pose.t, res.pose.q
    et, er = pose_errors(t_est, q_est, ds.t[idx], ds.q[idx])
    report = EvalReport([ds.image_ids[i] for i in idx], et, er, ms,
                        config={"localizer": localizer_dict(cfg), "seed": seed, "split": split})
    if baseline:
        bt, bq = retrieval_baseline(ds, RETRIEVAL_TOP_K, split)
        pos = {i: r for r, i in enumerate(ds.split_indices(split))}
        rows = [pos[i] for i in idx]
        report.baseline_t_error_m, report.baseline_r_error_deg = pose_errors(bt[rows], bq[rows], ds.t[idx], ds.q[idx])
    return report


def localizer_dict(cfg: LocalizerConfig) -> dict:
    return {
        "n_candidates": cfg.n_candidates,
        "iterations": cfg.iterations,
        "top_b": cfg.top_b,
        "avg_count": cfg.avg_count,
        "noise_t": list(cfg.noise.v_t),
        "noise_r": list(cfg.noise.v_r),
        "init_mode": cfg.init_mode,
        "score_fn": cfg.score_fn,
        "seed": cfg.seed,
    }


ABLATION_COLUMNS = ("parameter", "value", "iterations", "n_candidates", "avg_count", "score_fn", "pose_depth",
                    "median_t_m", "mean_t_m", "median_r_deg", "mean_r_deg", "runtime_ms", "needs_retraining")


def ablation_sweep(model: MultiSceneModel, ds, base: LocalizerConfig, grid: dict, seed: int | None = None,
                   limit: int | None = None, models_by_depth: dict | None = None) -> list[list]:
    """Evaluate the frozen model for each setting in ``grid``.

    ``grid`` maps one of ``iterations``, ``n_candidates``, ``avg_count``, ``score_fn``
    or ``pose_depth`` to a list of values; all other parameters stay at ``base``.
    Depth settings need a separately trained model per depth (``models_by_depth``);
    rows without one are emitted with NaN errors and flagged.
    """
    rows = []
    for name, values in grid.items():
        for v in values:
            cfg, m, flag = base, model, 0
            if name == "pose_depth":
                flag = 1
                m = (models_by_depth or {}).get(int(v))
            elif name in ("iterations", "n_candidates", "avg_count", "score_fn"):
                cfg = base.with_(**{name: v})
                if name == "n_candidates" and cfg.top_b > v:
                    cfg = cfg.with_(top_b=int(v))
            else:
                raise InvalidArgumentError(f"cannot sweep {name!r}")
            depth = len(m.scene(ds.scene_id).pose_encoder.mlp.layers) if m is not None else int(v)
            if m is None:
                s = dict.fromkeys(("median_t_m", "mean_t_m", "median_r_deg", "mean_r_deg", "runtime_ms_per_query"),
                                  float("nan"))
            else:
                s = evaluate(m, ds, cfg, seed, baseline=False, limit=limit).summary()
            rows.append([name, v, cfg.iterations, cfg.n_candidates, cfg.avg_count,
                         cfg.score_fn or m.scene(ds.scene_id).score_fn if m is not None else cfg.score_fn or "",
                         depth, s["median_t_m"], s["mean_t_m"], s["median_r_deg"], s["mean_r_deg"],
                         s["runtime_ms_per_query"], flag])
    return rows


# --------------------------------------------------------------------------
# Latent PCA
# --------------------------------------------------------------------------


@dataclass
class PcaResult:
    projections: np.ndarray  # (n, n_components)
    components: np.ndarray  # (n_components, d)
    variances: np.ndarray
    zero_variance: bool


def power_iteration_pca(x: np.ndarray, n_components: int = 3, tol: float = 1e-10, max_iter: int = 10000,
                        seed: int = 0) -> PcaResult:
    """Top principal components of the rows of ``x`` by power iteration with deflation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 4:
        raise InsufficientDataError(f"PCA needs at least 4 samples, got {x.shape[0]}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    scale = np.abs(cov).max()
    d = cov.shape[0]
    comps = np.zeros((n_components, d))
    var = np.zeros(n_components)
    # identical rows leave only rounding residue after centering
    if scale == 0.0 or not np.ptp(x, axis=0).any():
        return PcaResult(np.zeros((x.shape[0], n_components)), comps, var, True)
    rng = np.random.default_rng(seed)
    c = cov.copy()
    for j in range(min(n_components, d)):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = c @ v
            nw = np.linalg.norm(w)
            if nw <= tol * scale:
                lam = 0.0
                break
            w /= nw
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            lam = float(v @ c @ v)
            if done:
                break
        if lam <= tol * scale:
            break
        comps[j], var[j] = v, lam
        c = c - lam * np.outer(v, v)
    return PcaResult(xc @ comps.T, comps, var, False)


def export_latents(model: MultiSceneModel, t_world, q, scene_id: str | None = None, tol: float = 1e-10):
    """Latent PCA of poses: rows ``(tx, ty, tz, pc1, pc2, pc3)`` and the PCA result."""
    scene = model.scene(scene_id)
    t_world = np.asarray(t_world, dtype=np.float64).reshape(-1, 3)
    if t_world.shape[0] < 4:
        raise InsufficientDataError(f"latent export needs at least 4 poses, got {t_world.shape[0]}")
    lat = encode_poses(scene.pose_encoder, (scene.frame.to_normalized(t_world), np.asarray(q, dtype=np.float64)))
    pca = power_iteration_pca(lat, 3, tol)
    return np.column_stack([t_world, pca.projections]), pca
