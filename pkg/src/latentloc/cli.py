"""Command line: synth, train, localize, eval, ablate, export-latents, export-scoremap.

Configuration is a flat ``key = value`` file (``#`` starts a comment) with dotted
keys grouped by section, e.g. ``train.epochs = 200`` or
``localizer.noise = 8,0.2,8,1,5,1``.  ``--set key=value`` overrides the file.
Every report starts with ``#`` lines holding the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from .data import (
    SyntheticSceneConfig,
    dataset_stats,
    generate_synthetic_scene,
    load_checkpoint,
    load_descriptors,
    load_scene_dir,
    read_pose_table,
    save_checkpoint,
    save_scene_dir,
    scene_entry,
    write_pose_table,
)
from .encoders import ModelConfig, build_model
from .errors import (
    DegenerateVectorError,
    DegenerateWeightsError,
    DimensionError,
    FormatError,
    InsufficientDataError,
    InvalidArgumentError,
    NumericError,
)
from .evaluation import ABLATION_COLUMNS, ablation_sweep, evaluate, export_latents, query_generators
from .geometry import NoiseVector
from .localizer import (CANDIDATE_COLUMNS, LocalizerConfig, candidate_rows, export_score_map, format_value, localize,
                        write_table)
from .training import HISTORY_COLUMNS, TrainingConfig, train_multiscene

log = logging.getLogger("latentloc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_DIMENSION = 4
EXIT_NUMERIC = 5
EXIT_FORMAT = 6
EXIT_DATA = 7

# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

_SECTIONS = {
    "synth": SyntheticSceneConfig(),
    "model": ModelConfig(),
    "train": TrainingConfig(),
    "localizer": LocalizerConfig(),
}
_SKIP = {"train": {"sampler", "eval_localizer", "checkpoint_dir", "seed"}, "localizer": {"seed"}, "synth": {"oracle_seed"}}
# the training-time sampler is configured under "train.sampler.*"
_SAMPLER_KEYS = ("n_candidates", "iterations", "top_b", "avg_count", "noise", "init_mode")


def _encode(v) -> str:
    if isinstance(v, NoiseVector):
        return ",".join(repr(x) for x in v.to_list())
    if v is None:
        return "none"
    return str(v)


def default_config() -> dict[str, str]:
    out = {}
    for sec, obj in _SECTIONS.items():
        for f in dataclasses.fields(obj):
            if f.name in _SKIP.get(sec, ()):
                continue
            out[f"{sec}.{f.name}"] = _encode(getattr(obj, f.name))
    sampler = TrainingConfig().sampler
    for k in _SAMPLER_KEYS:
        out[f"train.sampler.{k}"] = _encode(getattr(sampler, k))
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{source}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve_config(path: str | None, overrides: Sequence[str] = ()) -> dict[str, str]:
    cfg = default_config()
    extra = {}
    if path:
        with open(path) as fh:
            extra.update(parse_config_text(fh.read(), path))
    for item in overrides:
        extra.update(parse_config_text(item, "--set"))
    unknown = sorted(set(extra) - set(cfg))
    if unknown:
        raise InvalidArgumentError(f"unknown config keys: {', '.join(unknown)}")
    cfg.update(extra)
    return cfg


def _coerce(text: str, like, noise: bool = False):
    if isinstance(like, NoiseVector) or (noise and text.lower() != "none"):
        return NoiseVector.from_list([float(x) for x in text.split(",")])
    if text.lower() == "none":
        return None
    if isinstance(like, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if like is None:
        try:
            return int(text)
        except ValueError:
            return text
    return text


def _section(cfg: dict, sec: str, **extra):
    proto = _SECTIONS[sec]
    kw = {}
    try:
        for f in dataclasses.fields(proto):
            key = f"{sec}.{f.name}"
            if key in cfg:
                kw[f.name] = _coerce(cfg[key], getattr(proto, f.name), "NoiseVector" in str(f.type))
    except ValueError as exc:
        raise InvalidArgumentError(f"section {sec}: {exc}") from None
    kw.update(extra)
    return type(proto)(**kw)


def localizer_config(cfg: dict, seed: int) -> LocalizerConfig:
    return _section(cfg, "localizer", seed=seed)


def training_config(cfg: dict, seed: int, checkpoint_dir=None) -> TrainingConfig:
    proto = TrainingConfig().sampler
    try:
        sk = {k: _coerce(cfg[f"train.sampler.{k}"], getattr(proto, k)) for k in _SAMPLER_KEYS}
    except ValueError as exc:
        raise InvalidArgumentError(f"section train.sampler: {exc}") from None
    return _section(cfg, "train", sampler=LocalizerConfig(**sk), seed=seed, checkpoint_dir=checkpoint_dir)


def config_header(cfg: dict, seed: int, command: str) -> list[str]:
    return [f"command = {command}", f"seed = {seed}"] + [f"{k} = {cfg[k]}" for k in sorted(cfg)]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    return open(path, "w"), True


def _emit(path, columns, rows, header):
    fh, close = _open_out(path)
    try:
        write_table(fh, columns, rows, header)
    finally:
        if close:
            fh.close()


def cmd_synth(args, cfg) -> int:
    sc = _section(cfg, "synth", oracle_seed=args.seed)
    ds = generate_synthetic_scene(sc)
    out = args.out or f"scene_{sc.scene_id}"
    save_scene_dir(ds, out)
    stats = dataset_stats(ds)
    with open(os.path.join(out, "stats.json"), "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    datasets = {}
    for d in args.scene:
        ds = load_scene_dir(d)
        if ds.scene_id in datasets:
            raise InvalidArgumentError(f"scene id {ds.scene_id!r} given twice")
        datasets[ds.scene_id] = ds
    dims = {ds.feature_dim for ds in datasets.values()}
    if len(dims) != 1:
        raise DimensionError("scenes have different descriptor dimensions")
    mc = _section(cfg, "model", feature_dim=dims.pop())
    out = args.out or "model.impc"
    tc = training_config(cfg, args.seed, checkpoint_dir=os.path.splitext(out)[0] + "_checkpoints")
    model = build_model({sid: scene_entry(ds) for sid, ds in datasets.items()}, mc, seed=args.seed)
    model, history = train_multiscene(model, datasets, tc, progress=lambda r: log.info("%s", r))
    save_checkpoint(model, out, {"train_seed": args.seed, "config": cfg})
    _emit(os.path.splitext(out)[0] + "_history.csv", HISTORY_COLUMNS,
          [[r[c] for c in HISTORY_COLUMNS] for r in history], config_header(cfg, args.seed, "train"))
    return EXIT_OK


def _query_rows(ds, ids):
    if not ids:
        return list(ds.split_indices("test"))
    pos = {name: i for i, name in enumerate(ds.image_ids)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise InvalidArgumentError(f"unknown image ids: {', '.join(missing)}")
    return [pos[i] for i in ids]


def _queries(args, ds):
    """(image ids, feature rows) from --descriptors or the scene's own descriptors."""
    if args.descriptors:
        m, ids = load_descriptors(args.descriptors)
        rows = range(len(ids)) if not args.image_id else [ids.index(i) for i in args.image_id]
        return [ids[r] for r in rows], np.asarray(m, dtype=np.float64)[list(rows)]
    rows = _query_rows(ds, args.image_id)
    return [ds.image_ids[r] for r in rows], ds.features[rows]


def cmd_localize(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_scene_dir(args.scene)
    loc = localizer_config(cfg, args.seed)
    ids, feats = _queries(args, ds)
    order = np.argsort(ids, kind="stable")
    rngs = query_generators(args.seed, len(ids))
    rows, diag = [], []
    for j, r in enumerate(order):
        res = localize(model, feats[r], loc, rngs[j], ds.scene_id, keep_diagnostics=bool(args.diagnostics))
        rows.append([ids[r], *res.pose.t, *res.pose.q])
        for cs in res.diagnostics:
            diag += [[ids[r], *row] for row in candidate_rows(cs, model.scene(ds.scene_id).frame)]
    header = config_header(cfg, args.seed, "localize")
    _emit(args.out, ("image_id", "tx", "ty", "tz", "qx", "qy", "qz", "qw"), rows, header)
    if args.diagnostics:
        _emit(args.diagnostics, ("image_id",) + CANDIDATE_COLUMNS, diag, header)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_scene_dir(args.scene)
    loc = localizer_config(cfg, args.seed)
    rep = evaluate(model, ds, loc, args.seed, limit=args.limit)
    summary = rep.summary()
    header = config_header(cfg, args.seed, "eval") + [f"{k} = {format_value(v)}" for k, v in sorted(summary.items())]
    _emit(args.out, rep.columns, rep.rows(), header)
    print(json.dumps(summary, sort_keys=True), file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return EXIT_OK


def _parse_grid(items: Sequence[str]) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise InvalidArgumentError(f"grid entry {item!r} must look like name=v1,v2")
        name, vals = item.split("=", 1)
        name = name.strip()
        parsed = []
        for v in vals.split(","):
            v = v.strip()
            parsed.append(v if name == "score_fn" else int(v))
        grid[name] = parsed
    return grid


def cmd_ablate(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_scene_dir(args.scene)
    loc = localizer_config(cfg, args.seed)
    by_depth = {}
    for item in args.depth_checkpoint or ():
        depth, path = item.split("=", 1)
        by_depth[int(depth)] = load_checkpoint(path)[0]
    try:
        grid = _parse_grid(args.grid or ["iterations=6"])
    except ValueError as exc:
        raise InvalidArgumentError(str(exc)) from None
    rows = ablation_sweep(model, ds, loc, grid, args.seed, args.limit, by_depth)
    _emit(args.out, ABLATION_COLUMNS, rows, config_header(cfg, args.seed, "ablate"))
    return EXIT_OK


def cmd_export_latents(args, cfg) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    ids, t, q = read_pose_table(args.poses)
    sid = args.scene_id
    rows, pca = export_latents(model, t, q, sid)
    header = config_header(cfg, args.seed, "export-latents") + [
        "variances = " + ",".join(f"{v:.9g}" for v in pca.variances),
        f"zero_variance = {pca.zero_variance}",
    ]
    if pca.zero_variance:
        log.warning("all latents are identical; projections are zero")
    _emit(args.out, ("image_id", "tx", "ty", "tz", "pc1", "pc2", "pc3"),
          [[ids[i], *rows[i]] for i in range(len(ids))], header)
    return EXIT_DATA if pca.zero_variance else EXIT_OK


def cmd_export_scoremap(args, cfg) -> int:
    from .encoders import encode_image

    model, _ = load_checkpoint(args.checkpoint)
    ds = load_scene_dir(args.scene)
    scene = model.scene(ds.scene_id)
    if not args.image_id or len(args.image_id) != 1:
        raise InvalidArgumentError("export-scoremap needs exactly one --image-id")
    ids, feats = _queries(args, ds)
    if args.probes:
        _, t, q = read_pose_table(args.probes)
        t = scene.frame.to_normalized(t)
    else:
        # a square grid over the train bounds at the ground-truth orientation of the query
        g = args.grid_size
        lo, hi = scene.initial_t.min(axis=0), scene.initial_t.max(axis=0)
        gx, gz = np.meshgrid(np.linspace(lo[0], hi[0], g), np.linspace(lo[2], hi[2], g), indexing="ij")
        t = np.column_stack([gx.ravel(), np.full(g * g, np.median(scene.initial_t[:, 1])), gz.ravel()])
        qi = ds.image_ids.index(ids[0]) if ids[0] in ds.image_ids else None
        q0 = ds.q[qi] if qi is not None else np.array([0.0, 0.0, 0.0, 1.0])
        q = np.tile(q0, (g * g, 1))
    rows = export_score_map(model, encode_image(model, feats[0], ds.scene_id), t, q, ds.scene_id)
    _emit(args.out, CANDIDATE_COLUMNS, rows, config_header(cfg, args.seed, "export-scoremap"))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-latents": cmd_export_latents,
    "export-scoremap": cmd_export_scoremap,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentloc", description="Implicit pose encoding localization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output path ('-' or absent: stdout where applicable)")
        return sp

    common(sub.add_parser("synth", help="generate a synthetic scene directory"))
    sp = common(sub.add_parser("train", help="train a model on one or more scene directories"))
    sp.add_argument("--scene", action="append", required=True)
    for name, hlp in (("localize", "localize query descriptors"), ("eval", "evaluate on the test split"),
                      ("ablate", "sweep localizer parameters"), ("export-scoremap", "score a grid of poses")):
        sp = common(sub.add_parser(name, help=hlp))
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--scene", required=True)
        if name in ("localize", "export-scoremap"):
            sp.add_argument("--image-id", action="append", default=[])
            sp.add_argument("--descriptors", help="descriptor file with the query features")
        if name == "localize":
            sp.add_argument("--diagnostics", help="also write every scored candidate set here")
        if name in ("eval", "ablate"):
            sp.add_argument("--limit", type=int, help="evaluate only the first N test queries")
        if name == "ablate":
            sp.add_argument("--grid", action="append", help="name=v1,v2,... (iterations, n_candidates, "
                            "avg_count, score_fn, pose_depth)")
            sp.add_argument("--depth-checkpoint", action="append", metavar="DEPTH=PATH")
        if name == "export-scoremap":
            sp.add_argument("--probes", help="pose table of probe poses")
            sp.add_argument("--grid-size", type=int, default=64)
    sp = common(sub.add_parser("export-latents", help="PCA of pose-encoder latents"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--poses", required=True)
    sp.add_argument("--scene-id")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING_FILE, f"missing file: {exc.filename or exc}"
    except FormatError as exc:
        code, msg = EXIT_FORMAT, f"malformed input: {exc}"
    except DimensionError as exc:
        code, msg = EXIT_DIMENSION, f"dimension mismatch: {exc}"
    except (NumericError, DegenerateVectorError, DegenerateWeightsError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, f"numeric failure: {exc}"
    except InsufficientDataError as exc:
        code, msg = EXIT_DATA, f"insufficient data: {exc}"
    except (InvalidArgumentError, ValueError, TypeError) as exc:
        code, msg = EXIT_CONFIG, f"bad configuration: {exc}"
    print(f"latentloc {args.command}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
