"""Score-supervised joint training of the image head and pose encoders."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .encoders import MultiSceneModel, SceneModel, image_head_forward
from .errors import DimensionError, FrameError, InvalidArgumentError, NumericError
from .geometry import Frame, NoiseVector, Pose, geodesic_distances
from .localizer import (
    CandidateSet,
    LocalizerConfig,
    initial_candidates,
    localize,
    mixture_components,
    noise_at,
    sample_mixture,
    top_indices,
)
from .nn import AdamState, Mlp, adam_step, flatten_grads, mlp_backward, score_rows, score_rows_backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    lambda_t: float = 5.0  # per normalized distance unit
    lambda_r: float = 0.1  # per radian
    epochs: int = 250
    lr: float = 1e-4
    batch_size: int = 16
    init_noise: NoiseVector | None = None  # None: reuse the sampler's noise vector
    proposer_mix: float = 0.5
    sampler: LocalizerConfig = field(default_factory=LocalizerConfig)
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    eval_queries: int = 0  # train queries localized per epoch for the error columns
    eval_localizer: LocalizerConfig | None = None

    def __post_init__(self):
        if self.lambda_t < 0 or self.lambda_r < 0:
            raise InvalidArgumentError("lambda_t and lambda_r must be non-negative")
        if not 0.0 <= self.proposer_mix <= 1.0:
            raise InvalidArgumentError("proposer_mix must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("batch_size must be >= 1 and epochs >= 0")

    @property
    def noise_bounds(self) -> NoiseVector:
        return self.init_noise if self.init_noise is not None else self.sampler.noise

    def with_(self, **kw) -> "TrainingConfig":
        return replace(self, **kw)


# --------------------------------------------------------------------------
# Targets and loss
# --------------------------------------------------------------------------


def target_score(query: Pose, candidate: Pose, cfg: TrainingConfig = TrainingConfig()) -> float:
    if query.frame is not Frame.NORMALIZED or candidate.frame is not Frame.NORMALIZED:
        raise FrameError("target scores are defined on normalized-frame poses")
    return float(
        kernels.target_scores(query.t, query.q, candidate.t[None], candidate.q[None], cfg.lambda_t, cfg.lambda_r)[0]
    )


def target_scores(tq, qq, t, q, cfg: TrainingConfig) -> np.ndarray:
    return kernels.target_scores(tq, qq, t, q, cfg.lambda_t, cfg.lambda_r)


def score_loss(predicted, targets) -> float:
    """Sum of absolute score errors over all (iteration, candidate) pairs, divided by the
    number of candidates per iteration."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"predicted {p.shape} and target {t.shape} scores differ in shape")
    p2 = p.reshape(-1, p.shape[-1]) if p.ndim else p.reshape(1, 1)
    return float(np.abs(p2 - t.reshape(p2.shape)).sum() / p2.shape[1])


# --------------------------------------------------------------------------
# Training-time proposer
# --------------------------------------------------------------------------


def training_components(pred: np.ndarray, raw: np.ndarray, target: np.ndarray, b: int, mix: float):
    """Mixture components chosen partly by target and partly by predicted score.

    ``ceil(mix * b)`` components come from the best target scores, the rest from the
    best predicted scores not already chosen.  Weights follow the predicted scores;
    a target-chosen component with zero predicted score borrows the smallest
    positive predicted weight in the set (uniform if there is none).
    """
    n_target = int(math.ceil(mix * b - 1e-12))
    if n_target == 0:
        return mixture_components(pred, raw, b)
    chosen = list(top_indices(target, n_target))
    taken = set(int(i) for i in chosen)
    for i in top_indices(pred, len(pred)):
        if len(chosen) >= b:
            break
        if int(i) not in taken:
            chosen.append(int(i))
            taken.add(int(i))
    idx = np.asarray(chosen, dtype=np.int64)
    w = pred[idx].astype(np.float64).copy()
    positive = w[w > 0]
    if positive.size == 0:
        w = np.ones_like(w)
    else:
        w[:n_target][w[:n_target] <= 0] = positive.min()
    return idx, w / w.sum()


def training_proposer(cs: CandidateSet, target: np.ndarray, cfg: TrainingConfig, rng, frame) -> CandidateSet:
    if cs.scores is None:
        raise InvalidArgumentError("training proposer needs predicted scores")
    idx, w = training_components(cs.scores, cs.raw, np.asarray(target), cfg.sampler.top_b, cfg.proposer_mix)
    std_t, std_r = noise_at(cfg.sampler.noise, cs.k).normalized_std(frame)
    t, q = sample_mixture(cs.t[idx], cs.q[idx], w, cfg.sampler.n_candidates, std_t, std_r, rng)
    return CandidateSet(t, q, cs.k + 1)


def noisy_initial_candidates(scene: SceneModel, cfg: TrainingConfig, rng) -> CandidateSet:
    """Initial candidates with uniform noise in [-v, v] per translation axis and Euler angle.

    The noise comes from a generator spawned off ``rng`` so the main stream is
    consumed exactly as at inference time.
    """
    cs = initial_candidates(scene, cfg.sampler, rng)
    bt, br = cfg.noise_bounds.normalized_bounds(scene.frame)
    if not (bt.any() or br.any()):
        return cs
    noise_rng = rng.spawn(1)[0]
    n = len(cs)
    dt = noise_rng.uniform(-1.0, 1.0, size=(n, 3)) * bt
    de = noise_rng.uniform(-1.0, 1.0, size=(n, 3)) * br
    t, q = kernels.perturb(cs.t, cs.q, dt, de)
    return CandidateSet(t, q, 0)


# --------------------------------------------------------------------------
# Loss and gradients over rounds of candidates
# --------------------------------------------------------------------------


def _scene_grad_template(model: MultiSceneModel, scene: SceneModel):
    names = [n for n, _ in model.trunk_parameters()] + [n for n, _ in scene.named_parameters()]
    params = dict(model.trunk_parameters() + scene.named_parameters())
    return {n: np.zeros_like(params[n]) for n in names}


def _add_mlp_grads(acc, prefix, grads):
    for i, (dw, db) in enumerate(grads):
        acc[f"{prefix}layers.{i}.weights"] += dw
        acc[f"{prefix}layers.{i}.bias"] += db


def rounds_loss_and_grads(
    model: MultiSceneModel,
    scene: SceneModel,
    features: np.ndarray,
    t_query: np.ndarray,
    q_query: np.ndarray,
    cfg: TrainingConfig,
    next_round: Callable,
    n_rounds: int,
    query_ids: Sequence[str] | None = None,
    record: list | None = None,
):
    """Run ``n_rounds`` scoring rounds and accumulate loss and gradients.

    ``next_round(k, previous)`` returns one ``CandidateSet`` per query for round
    ``k``; ``previous`` holds the scored sets and target scores of round ``k-1``.
    Candidates are constants: no gradient flows through their selection.  Each
    round is back-propagated as soon as it is scored, so memory is one round deep.
    Returns ``(mean loss over queries, per-query losses, grads by parameter name)``.
    """
    nq = features.shape[0]
    z, trunk_cache, proj_cache = image_head_forward(model, scene, features)
    grads = _scene_grad_template(model, scene)
    sid = scene.scene_id
    dz = np.zeros_like(z)
    per_query = np.zeros(nq)
    previous = None
    for k in range(n_rounds):
        sets = next_round(k, previous)
        sizes = [len(s) for s in sets]
        n_cand = sizes[0]
        if any(n != n_cand for n in sizes):
            raise DimensionError("all queries need the same number of candidates per round")
        t = np.concatenate([s.t for s in sets])
        q = np.concatenate([s.q for s in sets])
        lat, pcache = scene.pose_encoder.forward(t, q)
        a = np.repeat(z, n_cand, axis=0)
        s, raw, scache = score_rows(scene.score_fn, a, lat, scene.score_head)
        st = np.concatenate(
            [target_scores(t_query[i], q_query[i], sets[i].t, sets[i].q, cfg) for i in range(nq)]
        )
        diff = (s - st).reshape(nq, n_cand)
        round_loss = np.abs(diff).sum(axis=1) / n_cand
        bad = ~np.isfinite(round_loss)
        if bad.any():
            i = int(np.argmax(bad))
            who = query_ids[i] if query_ids is not None else str(i)
            raise NumericError(f"non-finite loss for query {who} at round {k}", where=who)
        per_query += round_loss
        ds = np.sign(s - st) / (n_cand * nq)
        da, db, head_grads = score_rows_backward(scache, ds, scene.score_head)
        pe_grads, _ = mlp_backward(scene.pose_encoder.mlp, pcache, db)
        _add_mlp_grads(grads, f"scenes.{sid}.pose_encoder.", pe_grads)
        if head_grads is not None:
            _add_mlp_grads(grads, f"scenes.{sid}.score_head.", head_grads)
        dz += da.reshape(nq, n_cand, -1).sum(axis=1)
        previous = [
            (CandidateSet(sets[i].t, sets[i].q, sets[i].k, s[i * n_cand : (i + 1) * n_cand],
                          raw[i * n_cand : (i + 1) * n_cand]), st[i * n_cand : (i + 1) * n_cand])
            for i in range(nq)
        ]
        if record is not None:
            record.append(previous)
    proj_grads, dh = mlp_backward(Mlp([scene.projection]), proj_cache, dz)
    grads[f"scenes.{sid}.projection.weights"] += proj_grads[0][0]
    grads[f"scenes.{sid}.projection.bias"] += proj_grads[0][1]
    trunk_grads, _ = mlp_backward(model.trunk, trunk_cache, dh)
    _add_mlp_grads(grads, "trunk.", trunk_grads)
    return float(per_query.mean()), per_query, grads


def fixed_candidates_loss_and_grads(model, scene_id, features, t_world, q, candidate_rounds, cfg):
    """Loss and analytic gradients for pre-drawn candidates.

    ``candidate_rounds[k][i]`` is the ``(t, q)`` normalized candidate array pair of
    query ``i`` at round ``k``.
    """
    scene = model.scene(scene_id)
    tq = scene.frame.to_normalized(t_world)

    def next_round(k, _prev):
        return [CandidateSet(t, qq, k) for t, qq in candidate_rounds[k]]

    loss, _, grads = rounds_loss_and_grads(
        model, scene, np.asarray(features, dtype=np.float64), tq, np.asarray(q, dtype=np.float64),
        cfg, next_round, len(candidate_rounds),
    )
    return loss, grads


# --------------------------------------------------------------------------
# Optimizer bookkeeping
# --------------------------------------------------------------------------


@dataclass
class Optimizers:
    """One Adam state per parameter group: the shared trunk and each scene.

    A step on one scene's minibatch touches only the trunk and that scene.
    """

    lr: float
    states: dict = field(default_factory=dict)

    def step(self, model: MultiSceneModel, scene: SceneModel, grads: dict) -> None:
        for group, params in (("trunk", model.trunk_parameters()), (f"scene:{scene.scene_id}", scene.named_parameters())):
            if group not in self.states:
                self.states[group] = AdamState.for_params(params, lr=self.lr)
            adam_step(params, [grads[n] for n, _ in params], self.states[group])


def train_step(model: MultiSceneModel, features, t_world, q_world, cfg: TrainingConfig, rng,
               scene_id: str | None = None, optimizers: Optimizers | None = None,
               query_ids: Sequence[str] | None = None) -> float:
    """One minibatch: sample candidate rounds per query, score them, one Adam step.

    Each query gets its own generator spawned from ``rng``; with zero initial
    noise and ``proposer_mix == 0`` a query's candidate trajectory matches
    ``localize`` run with that generator.
    """
    scene = model.scene(scene_id)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != model.feature_dim:
        raise DimensionError(f"features have {features.shape[1]} columns, model expects {model.feature_dim}")
    tq = scene.frame.to_normalized(np.atleast_2d(t_world))
    qq = np.atleast_2d(np.asarray(q_world, dtype=np.float64))
    rngs = rng.spawn(features.shape[0])

    def next_round(k, prev):
        if k == 0:
            return [noisy_initial_candidates(scene, cfg, r) for r in rngs]
        return [training_proposer(cs, st, cfg, r, scene.frame) for (cs, st), r in zip(prev, rngs)]

    loss, _, grads = rounds_loss_and_grads(
        model, scene, features, tq, qq, cfg, next_round, cfg.sampler.iterations + 1, query_ids
    )
    if optimizers is None:
        optimizers = Optimizers(cfg.lr)
    optimizers.step(model, scene, grads)
    return loss


def training_trajectory(model, features, t_world, q_world, cfg: TrainingConfig, rng, scene_id=None):
    """Scored candidate sets one query visits during training (parameters untouched)."""
    scene = model.scene(scene_id)
    tq = scene.frame.to_normalized(np.asarray(t_world, dtype=np.float64).reshape(1, 3))
    qq = np.asarray(q_world, dtype=np.float64).reshape(1, 4)

    def next_round(k, prev):
        if k == 0:
            return [noisy_initial_candidates(scene, cfg, rng)]
        cs, st = prev[0]
        return [training_proposer(cs, st, cfg, rng, scene.frame)]

    record = []
    rounds_loss_and_grads(model, scene, np.atleast_2d(features), tq, qq, cfg, next_round,
                          cfg.sampler.iterations + 1, record=record)
    return [r[0][0] for r in record]


# --------------------------------------------------------------------------
# Epoch loops
# --------------------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "mean_loss", "median_train_error_m", "median_train_error_deg")


def _train_errors(model, sid, ds, cfg: TrainingConfig, rng) -> tuple[float, float]:
    if cfg.eval_queries <= 0:
        return float("nan"), float("nan")
    loc = cfg.eval_localizer or cfg.sampler
    idx = ds.split_indices("train")
    pick = rng.choice(idx, size=min(cfg.eval_queries, len(idx)), replace=False)
    et, er = [], []
    for i in np.sort(pick):
        res = localize(model, ds.features[i], loc, rng.spawn(1)[0], sid, keep_diagnostics=False)
        et.append(float(np.linalg.norm(res.pose.t - ds.t[i])))
        er.append(float(np.rad2deg(geodesic_distances(res.pose.q, ds.q[i])[0])))
    return float(np.median(et)), float(np.median(er))


def train_multiscene(model: MultiSceneModel, datasets: dict, cfg: TrainingConfig,
                     optimizers: Optimizers | None = None, progress: Callable | None = None):
    """Train all scenes jointly.  Minibatches come from one scene at a time and are
    interleaved round-robin across scenes.  Returns ``(model, history)``."""
    from .data import save_checkpoint

    missing = set(datasets) - set(model.scenes)
    if missing:
        raise InvalidArgumentError(f"datasets for unknown scenes: {sorted(missing)}")
    for sid, ds in datasets.items():
        if ds.feature_dim != model.feature_dim:
            raise DimensionError(f"scene {sid}: features have {ds.feature_dim} dims, model expects {model.feature_dim}")
    rng = np.random.default_rng(cfg.seed)
    opt = optimizers or Optimizers(cfg.lr)
    order = sorted(datasets)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        queues = {}
        for sid in order:
            idx = rng.permutation(datasets[sid].split_indices("train"))
            queues[sid] = [idx[s : s + cfg.batch_size] for s in range(0, len(idx), cfg.batch_size)]
        losses = []
        for step in range(max(len(v) for v in queues.values())):
            for sid in order:
                if step >= len(queues[sid]):
                    continue
                ds = datasets[sid]
                b = queues[sid][step]
                losses.append(
                    train_step(model, ds.features[b], ds.t[b], ds.q[b], cfg, rng, sid, opt,
                               [ds.image_ids[i] for i in b])
                )
        errs = [_train_errors(model, sid, datasets[sid], cfg, rng) for sid in order]
        row = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "median_train_error_m": float(np.nanmedian([e[0] for e in errs])) if cfg.eval_queries else float("nan"),
            "median_train_error_deg": float(np.nanmedian([e[1] for e in errs])) if cfg.eval_queries else float("nan"),
        }
        history.append(row)
        log.info("epoch %d loss %.5f", epoch, row["mean_loss"])
        if progress is not None:
            progress(row)
        if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
            import os

            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            save_checkpoint(model, os.path.join(cfg.checkpoint_dir, f"epoch_{epoch:04d}.impc"),
                            {"epoch": epoch, "train_seed": cfg.seed})
    return model, history


def train(model: MultiSceneModel, dataset, cfg: TrainingConfig, optimizers: Optimizers | None = None,
          progress: Callable | None = None):
    """Single-scene training; identical to ``train_multiscene`` with one scene."""
    return train_multiscene(model, {dataset.scene_id: dataset}, cfg, optimizers, progress)


def loss_gradient_check(depth: int, score_fn: str, seed: int = 0, tolerance: float = 1e-4, h: float = 1e-5,
                        n_queries: int = 2, n_candidates: int = 3, n_rounds: int = 2):
    """Finite-difference check of the score loss over every trainable parameter.

    A small seeded model with a pose encoder of ``depth`` layers is scored on fixed
    candidates drawn around the queries.  For the L2 score the output layers are
    shrunk so latent distances stay below one and the clamp does not hide the gradient.
    """
    from .encoders import ModelConfig, build_model
    from .geometry import SceneFrame
    from .nn import finite_difference_check

    rng = np.random.default_rng(seed)
    n_ref = n_queries + n_rounds * n_queries * n_candidates
    t = rng.uniform(-0.5, 0.5, size=(n_ref, 3))
    q = rng.normal(size=(n_ref, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    frame = SceneFrame([0.0, 0.0, 0.0], 10.0)
    cfg = ModelConfig(feature_dim=5, latent_dim=6, trunk_width=16, pose_width=12, pose_depth=depth,
                      score_fn=score_fn, score_hidden=4)
    model = build_model({"s": (frame, t, q)}, cfg, seed=seed)
    scene = model.scene("s")
    # candidates within the target-score support so every term carries gradient
    tq, qq = t[:n_queries], q[:n_queries]
    rounds, pos = [], n_queries
    for _ in range(n_rounds):
        r = []
        for i in range(n_queries):
            ct = tq[i] + rng.normal(scale=0.03, size=(n_candidates, 3))
            r.append((ct, q[pos : pos + n_candidates]))
            pos += n_candidates
        rounds.append(r)
    features = rng.normal(size=(n_queries, 5))
    tcfg = TrainingConfig()
    t_world = frame.to_world(tq)
    _, grads = fixed_candidates_loss_and_grads(model, "s", features, t_world, qq, rounds, tcfg)
    names = [n for n, _ in model.trunk_parameters() + scene.named_parameters()]
    params = dict(model.named_parameters())
    return finite_difference_check(
        lambda: fixed_candidates_loss_and_grads(model, "s", features, t_world, qq, rounds, tcfg)[0],
        [(n, params[n]) for n in names], [grads[n] for n in names], h=h, tolerance=tolerance,
    )
