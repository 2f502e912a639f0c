"""Command-line entry point.

One executable, eight subcommands: synth, ingest, train-mono,
train-temporal, eval, map, change, compare. Exit codes: 0 success, 2 usage
errors (argparse), 3 invalid or missing configuration (the message names the
offending field), 1 anything else. Every run writes a ``run_manifest.json``
snapshot (subcommand, resolved config, seed, paths, wall clock) next to its
outputs so results can be replayed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import PatchLoader, TileSpec, load_manifest, stratified_split
from .evaluation import EvalReport, ThresholdRule, evaluate_model, sweep_tau
from .models import EncoderConfig, TemporalHeadConfig, load_artifact
from .ontology import Level, build_level
from .rasters import read_raster
from .synth import SynthConfig, generate_change_pair, generate_synthetic_corpus
from .training import TrainConfig, train_mono, train_temporal

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.7, 0.2, 0.1)


class CliConfigError(Exception):
    """Invalid or missing configuration; carries the offending field name."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(message)
        self.field = field


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliConfigError("--config", f"config file not found: {p}")
    if p.suffix == ".json":
        return json.loads(p.read_text())
    if p.suffix == ".toml":
        try:
            import tomllib  # type: ignore
        except ImportError:
            import tomli as tomllib  # type: ignore
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    raise CliConfigError("--config", f"unsupported config format {p.suffix!r}; use .json or .toml")


def _require(args: argparse.Namespace, name: str):
    value = getattr(args, name.lstrip("-").replace("-", "_"))
    if value is None:
        raise CliConfigError(name, f"{name} is required")
    return value


def _train_config(config: dict, args: argparse.Namespace) -> TrainConfig:
    section = dict(config.get("train", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        return TrainConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise CliConfigError("train", str(exc)) from None


def _fractions(config: dict) -> tuple[float, float, float]:
    raw = config.get("split", {}).get("fractions", DEFAULT_FRACTIONS)
    if len(raw) != 3:
        raise CliConfigError("split.fractions", "expected three fractions")
    return tuple(float(f) for f in raw)


def _split_records(records, config: dict, seed: int, part: str):
    if part == "all":
        return records
    split = stratified_split(records, fractions=_fractions(config), seed=seed)
    return split.subset(records, part)


def _level(args: argparse.Namespace) -> Level:
    return Level.parse(args.level or "LEVEL2")


def _tile_rasters(path: str):
    """A .tlc path loads one raster; a .json path maps months to rasters."""
    p = Path(path)
    if p.suffix == ".json":
        raw = json.loads(p.read_text())
        return {int(k): np.asarray(read_raster(p.parent / v), dtype=np.float32)
                for k, v in raw.items()}
    return np.asarray(read_raster(p), dtype=np.float32)


def _tile_spec_for(path: str, rasters, grid_n: int) -> TileSpec:
    arr = rasters if isinstance(rasters, np.ndarray) else next(iter(rasters.values()))
    side = arr.shape[0]
    if side % grid_n:
        raise CliConfigError("--grid-n", f"raster side {side} not divisible by grid_n={grid_n}")
    return TileSpec(tile_id=Path(path).stem, grid_n=grid_n, patch_px=side // grid_n)


def _out_prefix(args: argparse.Namespace) -> Path:
    out = Path(_require(args, "--out"))
    if out.suffix:
        out = out.with_suffix("")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommand handlers; each returns (resolved_config, outputs) for the run
# manifest
# --------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> tuple[dict, dict]:
    out = Path(_require(args, "--out"))
    config = _load_config(args.config).get("synth", {})
    params = {
        "tiles": args.tiles if args.tiles is not None else config.get("tiles", 10),
        "grid_n": args.grid_n if args.grid_n is not None else config.get("grid_n", 40),
        "patch_px": args.patch_px if args.patch_px is not None else config.get("patch_px", 32),
        "seed": args.seed if args.seed is not None else config.get("seed", 0),
        "noise_sigma": args.sigma if args.sigma is not None else config.get("noise_sigma", 0.03),
        "mix_prob": args.mix_prob if args.mix_prob is not None else config.get("mix_prob", 0.5),
    }
    if args.classes:
        params["active_classes"] = tuple(args.classes.split(","))
    try:
        cfg = SynthConfig(**params)
    except ValueError as exc:
        raise CliConfigError("synth", str(exc)) from None
    if args.change_pair:
        pair = generate_change_pair(cfg, out)
        outputs = {
            "tile_a": str(pair.dir_a),
            "tile_b": str(pair.dir_b),
            "change_mask": str(out / "change_mask.npy"),
            "to_class": pair.to_code,
            "changed_cells": int(pair.change_mask.sum()),
        }
    else:
        result = generate_synthetic_corpus(cfg, out)
        outputs = {
            "manifest": str(result.manifest_path),
            "tiles": len(result.tile_dirs),
            "patches": len(result.records),
        }
    print(json.dumps(outputs))
    return params, outputs


def cmd_ingest(args: argparse.Namespace) -> tuple[dict, dict]:
    manifest = _require(args, "--manifest")
    records = load_manifest(manifest, strict=args.strict)
    level = build_level(Level.LEVEL2)
    mass = np.zeros(level.cardinality)
    months: set[int] = set()
    for rec in records:
        mass += rec.label.probs
        months.update(rec.months)
    summary = {
        "records": len(records),
        "tiles": len({rec.tile_id for rec in records}),
        "months": sorted(months),
        "class_mass": {
            code: round(float(m / max(len(records), 1)), 6)
            for code, m in zip(level.codes, mass)
        },
        "strict": bool(args.strict),
    }
    print(json.dumps(summary))
    return {"manifest": str(manifest), "strict": bool(args.strict)}, summary


def cmd_train_mono(args: argparse.Namespace) -> tuple[dict, dict]:
    manifest = _require(args, "--manifest")
    out = Path(_require(args, "--out"))
    config = _load_config(args.config)
    train_cfg = _train_config(config, args)
    level = build_level(_level(args))
    encoder_section = dict(config.get("encoder", {}))
    encoder_section["n_classes"] = level.cardinality
    try:
        encoder_cfg = EncoderConfig.from_dict(encoder_section)
    except (TypeError, ValueError) as exc:
        raise CliConfigError("encoder", str(exc)) from None
    records = load_manifest(manifest)
    split = stratified_split(records, fractions=_fractions(config), seed=train_cfg.seed)
    loader = PatchLoader.for_manifest(manifest)
    result = train_mono(
        split.subset(records, "train"),
        split.subset(records, "val"),
        train_cfg,
        encoder_cfg,
        loader,
        level=level,
        out_dir=out,
    )
    best = max((e.val_micro_f1 for e in result.log), default=float("nan"))
    outputs = {
        "artifact": str(result.artifact_dir),
        "epochs": len(result.log),
        "best_val_micro_f1": best,
        "split_sizes": list(split.sizes),
    }
    print(json.dumps(outputs))
    resolved = {"train": train_cfg.to_dict(), "encoder": encoder_cfg.to_dict(),
                "split": {"fractions": list(_fractions(config))}, "level": level.name.value}
    return resolved, outputs


def cmd_train_temporal(args: argparse.Namespace) -> tuple[dict, dict]:
    manifest = _require(args, "--manifest")
    encoder_dir = _require(args, "--encoder")
    out = Path(_require(args, "--out"))
    config = _load_config(args.config)
    train_cfg = _train_config(config, args)
    bundle = load_artifact(encoder_dir)
    if bundle.kind != "mono":
        raise CliConfigError("--encoder", f"{encoder_dir} is not a mono encoder artifact")
    level = bundle.level
    head_section = dict(config.get("temporal", {}))
    head_section.setdefault("feature_dim", bundle.model.config.feature_dim)
    head_section.setdefault("n_classes", level.cardinality)
    try:
        head_cfg = TemporalHeadConfig.from_dict(head_section)
    except (TypeError, ValueError) as exc:
        raise CliConfigError("temporal", str(exc)) from None
    records = load_manifest(manifest)
    split = stratified_split(records, fractions=_fractions(config), seed=train_cfg.seed)
    loader = PatchLoader.for_manifest(manifest)
    result = train_temporal(
        split.subset(records, "train"),
        split.subset(records, "val"),
        train_cfg,
        bundle.model,
        bundle.stats,
        loader,
        level=level,
        head_config=head_cfg,
        out_dir=out,
    )
    outputs = {
        "artifact": str(result.artifact_dir),
        "epochs": len(result.log),
        "best_val_micro_f1": max((e.val_micro_f1 for e in result.log), default=float("nan")),
        "encoder_hash": result.encoder_hash_after,
        "frozen_encoder": result.encoder_hash_before == result.encoder_hash_after,
    }
    print(json.dumps(outputs))
    resolved = {"train": train_cfg.to_dict(), "temporal": head_cfg.to_dict(),
                "split": {"fractions": list(_fractions(config))}, "level": level.name.value}
    return resolved, outputs


def cmd_eval(args: argparse.Namespace) -> tuple[dict, dict]:
    model_dir = _require(args, "--model")
    manifest = _require(args, "--manifest")
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    level = _level(args)
    try:
        rule = ThresholdRule(tau=args.tau)
    except ValueError as exc:
        raise CliConfigError("--tau", str(exc)) from None
    bundle = load_artifact(model_dir)
    records = _split_records(load_manifest(manifest), config, seed, args.split)
    loader = PatchLoader.for_manifest(manifest)
    report = evaluate_model(bundle, records, level, rule, loader)
    payload = report.to_dict()
    if args.sweep:
        taus = [float(t) for t in args.sweep.split(",")]
        payload["tau_sweep"] = [
            {"tau": t, "micro_f1": f1}
            for t, f1 in sweep_tau(bundle, records, level, taus, loader)
        ]
    print(json.dumps(payload))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2) + "\n")
    resolved = {"level": Level.parse(level).value, "tau": args.tau, "split": args.split,
                "seed": seed}
    return resolved, {"micro_f1": report.micro_f1, "n_patches": report.n_patches}


def cmd_map(args: argparse.Namespace) -> tuple[dict, dict]:
    from .mapping import predict_map, render_map_png

    model_dir = _require(args, "--model")
    tile = _require(args, "--tile")
    out = _out_prefix(args)
    bundle = load_artifact(model_dir)
    rasters = _tile_rasters(tile)
    tile_spec = _tile_spec_for(tile, rasters, args.grid_n)
    lmap = predict_map(bundle, rasters, tile_spec)
    json_path = lmap.save(out.with_suffix(".json"), include_dists=args.include_dists)
    png_path, legend_path = render_map_png(lmap, out.with_suffix(".png"))
    outputs = {"json": str(json_path), "png": str(png_path), "legend": str(legend_path)}
    print(json.dumps(outputs))
    return {"grid_n": args.grid_n, "include_dists": args.include_dists}, outputs


def cmd_change(args: argparse.Namespace) -> tuple[dict, dict]:
    from .mapping import change_detect, predict_map, render_change_png

    model_dir = _require(args, "--model")
    tile_a = _require(args, "--tile-a")
    tile_b = _require(args, "--tile-b")
    out = _out_prefix(args)
    bundle = load_artifact(model_dir)
    rasters_a = _tile_rasters(tile_a)
    rasters_b = _tile_rasters(tile_b)
    spec = _tile_spec_for(tile_a, rasters_a, args.grid_n)
    map_a = predict_map(bundle, rasters_a, spec)
    map_b = predict_map(bundle, rasters_b, spec)
    cmap = change_detect(map_a, map_b, min_confidence=args.min_confidence)
    json_path = cmap.save(out.with_suffix(".json"))
    png_path = render_change_png(cmap, out.with_suffix(".png"))
    outputs = {
        "json": str(json_path),
        "png": str(png_path),
        "changed_cells": int(cmap.changed.sum()),
        "uncertain_cells": int(cmap.uncertain.sum()),
    }
    print(json.dumps(outputs))
    return {"grid_n": args.grid_n, "min_confidence": args.min_confidence}, outputs


def cmd_compare(args: argparse.Namespace) -> tuple[dict, dict]:
    model_a = _require(args, "--model-a")
    model_b = _require(args, "--model-b")
    manifest = _require(args, "--manifest")
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    try:
        rule = ThresholdRule(tau=args.tau)
    except ValueError as exc:
        raise CliConfigError("--tau", str(exc)) from None
    levels = [Level.parse(name) for name in (args.levels or "LEVEL1,LEVEL1_5,LEVEL2").split(",")]
    bundle_a = load_artifact(model_a)
    bundle_b = load_artifact(model_b)
    records = _split_records(load_manifest(manifest), config, seed, args.split)
    loader = PatchLoader.for_manifest(manifest)

    comparison: dict = {"models": {"a": str(model_a), "b": str(model_b)}, "levels": {}}
    lines = [f"{'level':10s} {'micro-F1 a':>12s} {'micro-F1 b':>12s} {'delta':>8s}"]
    finest_reports: tuple[EvalReport, EvalReport] | None = None
    for level in levels:
        rep_a = evaluate_model(bundle_a, records, level, rule, loader)
        rep_b = evaluate_model(bundle_b, records, level, rule, loader)
        comparison["levels"][level.value] = {
            "micro_f1_a": rep_a.micro_f1,
            "micro_f1_b": rep_b.micro_f1,
            "delta": rep_b.micro_f1 - rep_a.micro_f1,
        }
        lines.append(
            f"{level.value:10s} {rep_a.micro_f1:12.4f} {rep_b.micro_f1:12.4f} "
            f"{rep_b.micro_f1 - rep_a.micro_f1:+8.4f}"
        )
        finest_reports = (rep_a, rep_b)
    if finest_reports is not None:
        rep_a, rep_b = finest_reports
        level_def = build_level(levels[-1])
        lines.append("")
        lines.append(f"{'class':45s} {'F1 a':>8s} {'F1 b':>8s}")
        per_class = {}
        for cls in level_def.classes:
            fa = rep_a.per_class_f1.get(cls.code)
            fb = rep_b.per_class_f1.get(cls.code)
            if fa is None and fb is None:
                continue
            per_class[cls.code] = {"name": cls.name, "f1_a": fa, "f1_b": fb}
            fa_s = f"{fa:8.4f}" if fa is not None else "       -"
            fb_s = f"{fb:8.4f}" if fb is not None else "       -"
            lines.append(f"{cls.name[:45]:45s} {fa_s} {fb_s}")
        comparison["per_class"] = {"level": levels[-1].value, "classes": per_class}
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(comparison, indent=2) + "\n")
    resolved = {"tau": args.tau, "split": args.split, "seed": seed,
                "levels": [lv.value for lv in levels]}
    return resolved, comparison["levels"]


HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-mono": cmd_train_mono,
    "train-temporal": cmd_train_temporal,
    "eval": cmd_eval,
    "map": cmd_map,
    "change": cmd_change,
    "compare": cmd_compare,
}


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON or TOML config file")
    sub.add_argument("--seed", type=int, default=None, help="seed override")
    sub.add_argument("--level", default=None, choices=["LEVEL1", "LEVEL1_5", "LEVEL2"])
    sub.add_argument("--out", default=None, help="output directory or file prefix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="temporal-lulc",
        description="Patch-based multi-label land-cover classification toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser("synth", help="generate a synthetic seasonal corpus")
    p.add_argument("--tiles", type=int, default=None)
    p.add_argument("--grid-n", type=int, default=None)
    p.add_argument("--patch-px", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None, help="pixel noise std")
    p.add_argument("--mix-prob", type=float, default=None)
    p.add_argument("--classes", default=None, help="comma-separated class codes to paint")
    p.add_argument("--change-pair", action="store_true",
                   help="emit a tile pair with a known change region instead of a corpus")
    _add_common(p)

    p = subs.add_parser("ingest", help="validate a manifest and print a summary")
    p.add_argument("--manifest")
    p.add_argument("--strict", action="store_true", help="require every referenced raster")
    _add_common(p)

    p = subs.add_parser("train-mono", help="train the single-month encoder")
    p.add_argument("--manifest")
    _add_common(p)

    p = subs.add_parser("train-temporal", help="train the LSTM head on frozen features")
    p.add_argument("--manifest")
    p.add_argument("--encoder", help="mono artifact directory")
    _add_common(p)

    p = subs.add_parser("eval", help="evaluate an artifact at an ontology level")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--sweep", default=None, help="comma-separated taus to sweep")
    _add_common(p)

    p = subs.add_parser("map", help="classify a tile into a LULC map")
    p.add_argument("--model")
    p.add_argument("--tile", help=".tlc raster or .json month map")
    p.add_argument("--grid-n", type=int, default=40)
    p.add_argument("--include-dists", action="store_true")
    _add_common(p)

    p = subs.add_parser("change", help="post-classification change map between two tiles")
    p.add_argument("--model")
    p.add_argument("--tile-a")
    p.add_argument("--tile-b")
    p.add_argument("--grid-n", type=int, default=40)
    p.add_argument("--min-confidence", type=float, default=0.5)
    _add_common(p)

    p = subs.add_parser("compare", help="side-by-side mono vs temporal evaluation")
    p.add_argument("--model-a")
    p.add_argument("--model-b")
    p.add_argument("--manifest")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--levels", default=None, help="comma-separated level names")
    _add_common(p)
    return parser


def _write_run_manifest(
    args: argparse.Namespace, resolved: dict, outputs: dict, seconds: float, status: int
) -> None:
    out = getattr(args, "out", None)
    if not out:
        return
    out = Path(out)
    directory = out if out.is_dir() else out.parent
    if not directory.exists():
        return
    payload = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "config": resolved,
        "outputs": outputs,
        "wall_clock_s": round(seconds, 3),
        "exit_status": status,
    }
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, directory / "run_manifest.json")
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    t0 = time.time()
    try:
        resolved, outputs = HANDLERS[args.command](args)
    except CliConfigError as exc:
        print(json.dumps({"error": str(exc), "field": exc.field}), file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - single-line machine-readable error
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    _write_run_manifest(args, resolved, outputs, time.time() - t0, 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
