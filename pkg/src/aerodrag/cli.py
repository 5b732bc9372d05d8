"""Command-line entry point: ``aerodrag <command> [options]``.

Machine-readable results go to stdout (CSV or JSON) or ``--out``; logs go to
stderr. Exit codes: 0 success, 1 domain failure (infeasible mesh, diverged
training, bad data), 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .manifest import ManifestError, load_manifest, parse_aliases
from .mesh import StlError, euler_characteristic, merge_vertices, read_stl, validate_feasibility
from .model import RegDGCNNConfig, count_parameters, expected_parameter_count, init_parameters, predict
from .pointcloud import (
    DIVERSITY_SUBSAMPLE,
    PointCloud,
    cache_name,
    diversity_score,
    normalize_unit_sphere,
    read_cache,
    sample_surface,
    write_cache,
)
from .training import (
    CheckpointError,
    DesignDataset,
    SplitAssignment,
    TrainConfig,
    TrainingError,
    evaluate,
    history_csv,
    load_checkpoint,
    save_checkpoint,
    scaling_study,
    split_dataset,
    train,
)

log = logging.getLogger("aerodrag")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        return [int(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
    return value.strip()


def _section(cp: configparser.ConfigParser, name: str, cls) -> dict:
    if not cp.has_section(name):
        return {}
    defaults = asdict(cls())
    out = {}
    for key, value in cp.items(name):
        if key not in defaults:
            raise UsageError(f"unknown key {key!r} in [{name}]")
        out[key] = _coerce(value, defaults[key])
    return out


def load_config_file(path: str | None) -> tuple[dict, dict, dict]:
    """INI file with [model], [train] and [paths] sections mirroring the dataclasses."""
    if not path:
        return {}, {}, {}
    if not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path)
    paths = dict(cp.items("paths")) if cp.has_section("paths") else {}
    return _section(cp, "model", RegDGCNNConfig), _section(cp, "train", TrainConfig), paths


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_configs(args) -> tuple[RegDGCNNConfig, TrainConfig]:
    model_kw, train_kw, paths = load_config_file(getattr(args, "config", None))
    for key, value in paths.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    for f in fields(RegDGCNNConfig):
        v = getattr(args, f"model_{f.name}", None)
        if v is not None:
            model_kw[f.name] = v
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            train_kw[f.name] = v
    try:
        return RegDGCNNConfig(**model_kw), TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# ----------------------------------------------------------------- helpers


def _need(args, *names):
    for name in names:
        value = getattr(args, name, None)
        if value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
        if name.endswith(("_dir", "manifest", "checkpoint", "split_file")) and name != "out_dir":
            if not Path(value).exists():
                raise UsageError(f"path does not exist: {value}")


def _emit(args, text: str) -> None:
    out = getattr(args, "out", None)
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _manifest(args):
    aliases = parse_aliases(getattr(args, "alias", None))
    return load_manifest(args.manifest, getattr(args, "stl_dir", None), aliases)


def _split(args, ids) -> SplitAssignment:
    if getattr(args, "split_file", None):
        data = json.loads(Path(args.split_file).read_text())
        return SplitAssignment(data["train"], data["validation"], data["test"])
    return split_dataset(ids, args.seed if args.seed is not None else 0)


def _design_ids(args) -> list[str]:
    if getattr(args, "manifest", None):
        return sorted(_manifest(args).ids)
    return sorted(p.stem for p in Path(args.stl_dir).glob("*.stl"))


# ---------------------------------------------------------------- commands


def cmd_validate(args) -> int:
    paths = [Path(p) for p in args.stl or []]
    if args.stl_dir:
        paths += sorted(Path(args.stl_dir).glob("*.stl"))
    if not paths:
        raise UsageError("give --stl FILE (repeatable) or --stl-dir DIR")
    reports, failed = [], False
    for path in sorted(paths, key=lambda p: p.name):
        if not path.exists():
            raise UsageError(f"path does not exist: {path}")
        entry = {"file": str(path)}
        try:
            mesh = merge_vertices(read_stl(path), args.epsilon)
            entry.update(validate_feasibility(mesh).as_dict())
            entry["n_vertices"], entry["n_faces"] = mesh.n_vertices, mesh.n_faces
            entry["euler_characteristic"] = euler_characteristic(mesh)
            failed |= not entry["is_watertight"]
        except StlError as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            failed = True
        reports.append(entry)
    payload = reports[0] if len(reports) == 1 else reports
    _emit(args, json.dumps(payload, indent=2) + "\n")
    return 1 if failed else 0


def cmd_sample(args) -> int:
    _need(args, "stl_dir")
    if not args.cache_dir:
        raise UsageError("--cache-dir is required")
    cache_dir = Path(args.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    rows = []
    for design_id in _design_ids(args):
        target = cache_dir / cache_name(design_id, args.points, seed)
        if target.exists() and not args.force:
            rows.append([design_id, "cached", args.points, "", "", "", ""])
            continue
        mesh = merge_vertices(read_stl(Path(args.stl_dir) / f"{design_id}.stl"))
        pc = sample_surface(mesh, args.points, seed, design_id)
        t = None
        if not args.no_normalize:
            pc, t = normalize_unit_sphere(pc)
        write_cache(target, pc.points)
        tr = t.translation if t else (0.0, 0.0, 0.0)
        rows.append([design_id, "sampled", args.points, *map(repr, tr), repr(t.scale if t else 1.0)])
        log.info("sampled %s -> %s", design_id, target.name)
    _emit(args, _csv(["design_id", "status", "n_points", "tx", "ty", "tz", "scale"], rows))
    return 0


def cmd_diversity(args) -> int:
    seed = args.seed or 0
    if args.cache_dir and Path(args.cache_dir).exists() and not args.from_stl:
        ids = _design_ids(args) if (args.manifest or args.stl_dir) else sorted(
            p.name[: -len(f"_{args.points}_{seed}.dapc")]
            for p in Path(args.cache_dir).glob(f"*_{args.points}_{seed}.dapc")
        )
        clouds = [read_cache(Path(args.cache_dir) / cache_name(i, args.points, seed)) for i in ids]
    else:
        _need(args, "stl_dir")
        ids = _design_ids(args)
        clouds = [
            normalize_unit_sphere(
                sample_surface(merge_vertices(read_stl(Path(args.stl_dir) / f"{i}.stl")), args.points, seed)
            )[0].points
            for i in ids
        ]
    sub = None if args.no_subsample else args.subsample
    score = diversity_score([PointCloud(c) for c in clouds], sub, seed)
    per_cloud = min(args.points, sub) if sub else args.points
    _emit(args, _csv(["n_clouds", "points_per_cloud", "score"], [[len(clouds), per_cloud, repr(score)]]))
    return 0


def cmd_split(args) -> int:
    _need(args, "manifest")
    split = split_dataset(_manifest(args).ids, args.seed or 0)
    _emit(args, json.dumps(split.as_dict(), indent=2) + "\n")
    return 0


def _dataset(args, model_cfg, train_cfg):
    _need(args, "manifest", "cache_dir")
    manifest = _manifest(args)
    split = _split(args, manifest.ids)
    return DesignDataset.from_cache(
        args.cache_dir, manifest.targets(), split, train_cfg.points_per_cloud, args.sample_seed
    )


def cmd_train(args) -> int:
    model_cfg, train_cfg = build_configs(args)
    _need(args, "out_dir")
    ds = _dataset(args, model_cfg, train_cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "split.json").write_text(json.dumps(ds.split.as_dict(), indent=2) + "\n")
    model = init_parameters(model_cfg, train_cfg.seed)
    log.info("training %d parameters on %d designs", count_parameters(model), len(ds.split.train))
    _, history, best = train(
        model, ds, train_cfg, on_epoch=lambda ck, rec: save_checkpoint(out_dir / "last.rdgc", ck)
    )
    save_checkpoint(out_dir / "best.rdgc", best)
    (out_dir / "history.csv").write_text(history_csv(history))
    best_model, scaler = best.model(), best.target_scaler()
    rows = []
    for name in ("train", "validation", "test"):
        ids = getattr(ds.split, name)
        if ids:
            r = evaluate(best_model, ds, ids, scaler, train_cfg.batch_size)
            rows.append([name, repr(r["mse"]), repr(r["r2"]), repr(r["mean_rel_err_pct"])])
    _emit(args, _csv(["split", "mse", "r2", "mean_rel_err_pct"], rows))
    return 0


def cmd_eval(args) -> int:
    _need(args, "checkpoint", "manifest", "cache_dir")
    ckpt = load_checkpoint(args.checkpoint)
    train_cfg = TrainConfig.from_dict(ckpt.train_config)
    manifest = _manifest(args)
    split = _split(args, manifest.ids)
    ds = DesignDataset.from_cache(args.cache_dir, manifest.targets(), split,
                                  train_cfg.points_per_cloud, args.sample_seed)
    model, scaler = ckpt.model(), ckpt.target_scaler()
    names = ("train", "validation", "test") if args.split == "all" else (args.split,)
    rows = []
    for name in names:
        ids = getattr(split, name)
        if ids:
            r = evaluate(model, ds, ids, scaler, train_cfg.batch_size)
            rows.append([name, repr(r["mse"]), repr(r["r2"]), repr(r["mean_rel_err_pct"])])
    _emit(args, _csv(["split", "mse", "r2", "mean_rel_err_pct"], rows))
    return 0


def cmd_predict(args) -> int:
    _need(args, "checkpoint")
    if not args.stl:
        raise UsageError("give at least one --stl FILE")
    ckpt = load_checkpoint(args.checkpoint)
    model, scaler = ckpt.model(), ckpt.target_scaler()
    n = args.points or TrainConfig.from_dict(ckpt.train_config).points_per_cloud
    rows = []
    for path in args.stl:
        if not Path(path).exists():
            raise UsageError(f"path does not exist: {path}")
        pc = sample_surface(merge_vertices(read_stl(path)), n, args.seed or 0)
        if not args.no_normalize:
            pc, _ = normalize_unit_sphere(pc)
        z = predict(model, pc.points.astype(np.float32))
        rows.append([Path(path).stem, repr(float(scaler.denormalize(z)[0]))])
    _emit(args, _csv(["design_id", "cd_pred"], rows))
    return 0


def cmd_scaling_study(args) -> int:
    model_cfg, train_cfg = build_configs(args)
    ds = _dataset(args, model_cfg, train_cfg)
    rows = scaling_study(ds, _float_list(args.fractions), train_cfg, model_cfg)
    _emit(args, _csv(
        ["fraction", "n_train", "mean_rel_err_pct"],
        [[r.fraction, r.n_train, repr(r.mean_rel_err_pct)] for r in rows],
    ))
    return 0


def cmd_info(args) -> int:
    if args.checkpoint:
        _need(args, "checkpoint")
        ckpt = load_checkpoint(args.checkpoint)
        cfg = RegDGCNNConfig.from_dict(ckpt.model_config)
        extra = {"epoch": ckpt.epoch, "best_val_mse": ckpt.best_val, "format_version": ckpt.version}
    else:
        cfg, _ = build_configs(args)
        extra = {}
    n_params = count_parameters(init_parameters(cfg, 0))
    info = {
        "version": __version__,
        "model_config": cfg.to_dict(),
        "parameter_count": n_params,
        "closed_form_parameter_count": expected_parameter_count(cfg),
        "float32_size_mb": n_params * 4 / 1e6,
        **extra,
    }
    _emit(args, json.dumps(info, indent=2) + "\n")
    return 0


# ------------------------------------------------------------------ parser


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--k", dest="model_k", type=int)
    g.add_argument("--edgeconv-channels", dest="model_edgeconv_channels", type=_int_list)
    g.add_argument("--embedding-dim", dest="model_embedding_dim", type=int)
    g.add_argument("--fc-channels", dest="model_fc_channels", type=_int_list)
    g.add_argument("--dropout", dest="model_dropout_p", type=float)
    g.add_argument("--aggregate", dest="model_aggregate", choices=["concat", "last"])
    g.add_argument("--no-batch-norm", dest="model_use_batch_norm", action="store_const", const=False)
    g.add_argument("--include-self", dest="model_include_self", action="store_const", const=True)
    g.add_argument("--dtype", dest="model_dtype", choices=["float32", "float64"])


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--scheduler-patience", type=int)
    g.add_argument("--scheduler-factor", type=float)
    g.add_argument("--points", dest="points_per_cloud", type=int)
    g.add_argument("--train-fraction", dest="train_fraction_of_train_split", type=float)
    g.add_argument("--deterministic", action="store_const", const=True,
                   help="single-threaded numerics for bitwise-reproducible runs")


def _add_data_flags(p):
    p.add_argument("--manifest")
    p.add_argument("--stl-dir")
    p.add_argument("--cache-dir")
    p.add_argument("--split-file")
    p.add_argument("--sample-seed", type=int, default=0, help="seed the clouds were cached with")
    p.add_argument("--alias", action="append", metavar="EXTERNAL=COLUMN")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aerodrag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="INI file with [model], [train], [paths] sections")
    common.add_argument("--out", help="write the result here instead of stdout")
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="watertight/manifold report for STL files")
    p.add_argument("--stl", action="append")
    p.add_argument("--stl-dir")
    p.add_argument("--epsilon", type=float, default=1e-6, help="vertex merge tolerance (m)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sample", parents=[common], help="sample and cache point clouds")
    _add_data_flags(p)
    p.add_argument("--points", type=int, default=5000)
    p.add_argument("--force", action="store_true")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("diversity", parents=[common], help="mean pairwise Chamfer distance")
    _add_data_flags(p)
    p.add_argument("--points", type=int, default=5000)
    p.add_argument("--subsample", type=int, default=DIVERSITY_SUBSAMPLE)
    p.add_argument("--no-subsample", action="store_true")
    p.add_argument("--from-stl", action="store_true", help="sample from --stl-dir instead of the cache")
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("split", parents=[common], help="70/15/15 design split as JSON")
    _add_data_flags(p)
    p.set_defaults(func=cmd_split)

    for name, func, help_text in (
        ("train", cmd_train, "train RegDGCNN"),
        ("scaling-study", cmd_scaling_study, "error vs training-set fraction"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        _add_data_flags(p)
        _add_model_flags(p)
        _add_train_flags(p)
        p.add_argument("--out-dir")
        if name == "scaling-study":
            p.add_argument("--fractions", default="0.2,0.4,0.6,0.8,1.0")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a split")
    _add_data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="predict C_d for STL files")
    p.add_argument("--checkpoint")
    p.add_argument("--stl", action="append")
    p.add_argument("--points", type=int)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("info", parents=[common], help="model configuration and parameter budget")
    p.add_argument("--checkpoint")
    _add_model_flags(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"aerodrag: error: {exc}", file=sys.stderr)
        return 2
    except (StlError, ManifestError, TrainingError, CheckpointError, ValueError) as exc:
        print(f"aerodrag: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
