"""Command-line front end: generation, coarsening, training, evaluation,
prediction-map export, and attention inspection as reproducible runs.

Every command resolves its full configuration (seeds included) and records
it in a run manifest next to its outputs; rerunning with an identical
manifest reproduces the outputs bit for bit. Exit codes: 0 success,
2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attention import export_attention_heatmap, extract_attention, write_block_mass_report
from .datacube import (
    DataCube,
    Sample,
    SplitSpec,
    build_samples,
    coarsen,
    compute_split_stats,
    index_history,
    input_stack,
    load_cube,
    preprocess,
    save_cube,
    split_samples,
)
from .errors import ConfigError, DataError, MetricError, NumericsError, TeleViTError
from .metrics import evaluate, write_report
from .model import ModelConfig, TeleViTModel, config_from_dict, config_to_dict, load_checkpoint
from .ppm import gray_to_rgb, to_gray, write_ppm
from .synthetic import GeneratorConfig, generate_synthetic_cube
from .tokenization import TokenizationSpec, VARIANT_SOURCES
from .training import TrainConfig, train

Array = np.ndarray

MANIFEST_NAME = "run_manifest.json"


def _max_workers() -> int:
    raw = os.environ.get("TELEVIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Ordered map over items, fanned out over TELEVIT_THREADS workers."""
    items = list(items)
    workers = min(_max_workers(), max(len(items), 1))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def write_run_manifest(out_dir, command: str, config: dict, seed: Optional[int],
                       inputs: list[str], outputs: list[str], wall_time: float) -> None:
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "wall_time_s": wall_time,
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / MANIFEST_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True))


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc


# ----------------------------------------------------------------------
# Pipeline assembly shared by train / eval / predict / attn
# ----------------------------------------------------------------------

def build_datasets(
    cube_dir,
    split: SplitSpec,
    horizon: int,
    coarsen_factor: int,
    need_global: bool,
    patch_h: int = 80,
    patch_w: int = 80,
):
    """Load a raw cube and derive the preprocessed fine/coarse cubes and
    the per-split sample lists for one horizon."""
    raw = load_cube(cube_dir)
    coarse_pp = None
    if need_global:
        coarse_raw = coarsen(raw, coarsen_factor)
        coarse_pp = preprocess(coarse_raw, compute_split_stats(coarse_raw, split))
    fine_pp = preprocess(raw, compute_split_stats(raw, split))
    samples = build_samples(fine_pp, coarse_pp, horizon, split, patch_h, patch_w)
    return fine_pp, coarse_pp, split_samples(samples)


def model_config_for_cube(
    cube: DataCube,
    variant: str,
    coarsen_factor: int,
    overrides: Optional[dict] = None,
    patch_h: int = 80,
    patch_w: int = 80,
) -> ModelConfig:
    """Desk-scale model config with input shapes derived from the cube."""
    n_channels = len(cube.driver_names) + 4  # drivers plus positional planes
    base = ModelConfig.desk_scale(
        variant=variant,
        local_shape=(n_channels, patch_h, patch_w),
        global_shape=(n_channels, cube.n_lat // coarsen_factor, cube.n_lon // coarsen_factor),
        index_shape=(len(cube.index_names), 10),
        out_h=patch_h,
        out_w=patch_w,
    )
    if not overrides:
        return base
    payload = config_to_dict(base)
    spec_overrides = overrides.pop("spec", None)
    if spec_overrides:
        payload["spec"].update(spec_overrides)
    payload.update(overrides)
    return config_from_dict(payload)


def _needs_global(variant: str) -> bool:
    return "global" in VARIANT_SOURCES[variant]


def _split_from(payload: Optional[dict], cube: DataCube) -> SplitSpec:
    if payload:
        return SplitSpec.from_dict(payload)
    return cube.default_split()


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def cmd_cubegen(args) -> int:
    started = time.monotonic()
    overrides = _load_json(args.config) if args.config else {}
    for key in ("lat_range", "lon_range", "skewed_drivers"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    try:
        config = GeneratorConfig(**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad generator config: {exc}") from exc
    cube = generate_synthetic_cube(config, args.seed)
    save_cube(cube, args.out)
    write_run_manifest(
        args.out, "cubegen", asdict(config), args.seed,
        inputs=[args.config] if args.config else [],
        outputs=[str(Path(args.out) / "manifest.json")],
        wall_time=time.monotonic() - started,
    )
    print(f"wrote cube with shape {cube.shape} to {args.out}")
    return 0


def cmd_coarsen(args) -> int:
    started = time.monotonic()
    cube = load_cube(args.cube)
    coarse = coarsen(cube, args.factor)
    save_cube(coarse, args.out)
    write_run_manifest(
        args.out, "coarsen", {"factor": args.factor}, None,
        inputs=[str(args.cube)], outputs=[str(Path(args.out) / "manifest.json")],
        wall_time=time.monotonic() - started,
    )
    print(f"coarsened {cube.shape} -> {coarse.shape} into {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.monotonic()
    overrides = _load_json(args.config) if args.config else {}
    raw = load_cube(args.cube)
    split = _split_from(overrides.get("split"), raw)
    coarsen_factor = int(overrides.get("coarsen_factor", 4))

    train_overrides = dict(overrides.get("train", {}))
    train_overrides.setdefault("horizon", args.horizon)
    train_overrides.setdefault("variant", args.variant)
    train_overrides["horizon"] = int(args.horizon)
    train_overrides["variant"] = args.variant
    try:
        train_config = TrainConfig(**train_overrides)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc

    model_config = model_config_for_cube(
        raw, args.variant, coarsen_factor, dict(overrides.get("model", {}))
    )
    fine_pp, coarse_pp, by_split = build_datasets(
        args.cube, split, train_config.horizon, coarsen_factor,
        _needs_global(args.variant), model_config.out_h, model_config.out_w,
    )
    if not by_split["train"] or not by_split["val"]:
        raise DataError("no train or val samples after filtering; check the cube and split")

    model = TeleViTModel(model_config, seed=train_config.seed)
    out = Path(args.out)
    best, history = train(model, by_split, train_config, out_dir=out)
    (out / "config.json").write_text(json.dumps({
        "train": asdict(train_config),
        "model": config_to_dict(model_config),
        "split": split.to_dict(),
        "coarsen_factor": coarsen_factor,
        "cube_path": str(args.cube),
    }, indent=2))
    _augment_checkpoints(out, split, coarsen_factor, str(args.cube))
    write_run_manifest(
        out, "train",
        {"train": asdict(train_config), "model": config_to_dict(model_config),
         "split": split.to_dict(), "coarsen_factor": coarsen_factor},
        train_config.seed,
        inputs=[str(args.cube)],
        outputs=[str(out / "best.ckpt"), str(out / "last.ckpt"), str(out / "history.json")],
        wall_time=time.monotonic() - started,
    )
    print(
        f"trained {args.variant} at horizon {train_config.horizon}: "
        f"best epoch {best['epoch']} val_loss {best['val_loss']:.6f}"
    )
    return 0


def _augment_checkpoints(out: Path, split: SplitSpec, factor: int, cube_path: str) -> None:
    """Record the data pipeline in each checkpoint header so that eval,
    predict, and attn can rebuild identical datasets later."""
    from .model import load_checkpoint as _load
    from .model import save_checkpoint as _save

    for name in ("best.ckpt", "last.ckpt"):
        path = out / name
        if not path.exists():
            continue
        model, header = _load(path)
        extra = {
            "train_config": header.get("train_config", {}),
            "split": split.to_dict(),
            "coarsen_factor": factor,
            "cube_path": cube_path,
        }
        _save(model, path, epoch=header.get("epoch", 0), metrics=header.get("metrics", {}),
              extra=extra)


def _pipeline_from_checkpoint(args):
    model, header = load_checkpoint(args.ckpt)
    cube_path = getattr(args, "cube", None) or header.get("cube_path")
    if not cube_path:
        raise ConfigError("checkpoint lacks a cube path; pass --cube")
    raw = load_cube(cube_path)
    split = SplitSpec.from_dict(header["split"]) if "split" in header else raw.default_split()
    factor = int(header.get("coarsen_factor", 4))
    horizon = int(header.get("train_config", {}).get("horizon", 1))
    fine_pp, coarse_pp, by_split = build_datasets(
        cube_path, split, horizon, factor,
        _needs_global(model.config.variant),
        model.config.out_h, model.config.out_w,
    )
    return model, header, raw, fine_pp, coarse_pp, by_split, split, factor, horizon


def cmd_eval(args) -> int:
    started = time.monotonic()
    model, header, _, _, _, by_split, split, factor, horizon = _pipeline_from_checkpoint(args)
    samples = by_split.get(args.split)
    if not samples:
        raise DataError(f"no samples in split {args.split!r}")
    report = evaluate(model, samples)
    report["split"] = args.split
    report["checkpoint"] = str(args.ckpt)
    write_report(report, args.out)
    manifest_dir = Path(args.out).parent
    write_run_manifest(
        manifest_dir, "eval",
        {"split": args.split, "ckpt": str(args.ckpt), "horizon": horizon},
        header.get("seed"),
        inputs=[str(args.ckpt)], outputs=[str(args.out)],
        wall_time=time.monotonic() - started,
    )
    print(f"{model.config.variant} h={horizon} split={args.split} auprc={report['auprc']:.4f}")
    return 0


def export_prediction_map(
    planes: dict[tuple[int, int], Array],
    cube: DataCube,
    t: int,
    horizon: int,
    out_dir,
    mask_below: float = 0.05,
    patch_h: int = 80,
    patch_w: int = 80,
) -> Array:
    """Stitch per-patch probability planes into the full grid, mask sea and
    low-confidence cells, and write the binary + image artifacts."""
    rows = cube.n_lat // patch_h
    cols = cube.n_lon // patch_w
    missing = [
        (pr, pc) for pr in range(rows) for pc in range(cols) if (pr, pc) not in planes
    ]
    if missing:
        raise DataError(f"missing prediction patches: {missing}")
    full = np.zeros((cube.n_lat, cube.n_lon), dtype=np.float64)
    for (pr, pc), plane in planes.items():
        full[pr * patch_h : (pr + 1) * patch_h, pc * patch_w : (pc + 1) * patch_w] = plane
    full[~cube.land_mask] = 0.0
    full[full < mask_below] = 0.0
    scores = full.astype("<f4")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prediction.f32").write_bytes(scores.tobytes())
    (out / "prediction.json").write_text(json.dumps({
        "shape": list(scores.shape),
        "dtype": "<f4",
        "time": t,
        "horizon": horizon,
        "mask_below": mask_below,
        "sea_masked": True,
    }, indent=2, sort_keys=True))
    write_ppm(out / "prediction.ppm", gray_to_rgb(np.round(scores * 255.0).astype(np.uint8)))
    target_t = t + horizon
    if target_t < cube.shape[0]:
        target = cube.variables[cube.target_name][target_t]
        write_ppm(out / "target.ppm", gray_to_rgb((target > 0).astype(np.uint8) * 255))
    return scores


def cmd_predict(args) -> int:
    started = time.monotonic()
    model, header, raw, fine_pp, coarse_pp, _, split, factor, horizon = (
        _pipeline_from_checkpoint(args)
    )
    t = int(args.time)
    if not 0 <= t < fine_pp.shape[0]:
        raise DataError(f"timestep {t} outside cube range [0, {fine_pp.shape[0]})")
    x_i = index_history(fine_pp, t)
    if x_i is None:
        raise DataError(f"timestep {t} lacks the 10-month index history")
    x_i = x_i.astype(np.float32)
    x_g = input_stack(coarse_pp, t) if coarse_pp is not None else None
    fine_inputs = input_stack(fine_pp, t)
    ph, pw = model.config.out_h, model.config.out_w
    rows, cols = fine_pp.n_lat // ph, fine_pp.n_lon // pw

    locations = [(pr, pc) for pr in range(rows) for pc in range(cols)]

    def score_patch(loc):
        pr, pc = loc
        sample = Sample(
            x_l=fine_inputs[:, pr * ph : (pr + 1) * ph, pc * pw : (pc + 1) * pw],
            x_g=x_g,
            x_i=x_i,
            target=np.zeros((1, ph, pw), dtype=np.float32),
            t=t,
            patch_origin=loc,
            horizon=horizon,
        )
        return loc, model.scores(sample)

    planes = dict(parallel_map(score_patch, locations))
    export_prediction_map(
        planes, fine_pp, t, horizon, args.out, mask_below=args.mask_below,
        patch_h=ph, patch_w=pw,
    )
    write_run_manifest(
        args.out, "predict",
        {"time": t, "mask_below": args.mask_below, "ckpt": str(args.ckpt)},
        header.get("seed"),
        inputs=[str(args.ckpt)],
        outputs=[str(Path(args.out) / "prediction.f32")],
        wall_time=time.monotonic() - started,
    )
    print(f"wrote prediction map for t={t} (h={horizon}) to {args.out}")
    return 0


def cmd_attn(args) -> int:
    started = time.monotonic()
    model, header, _, _, _, by_split, *_ = _pipeline_from_checkpoint(args)
    samples = by_split.get(args.split, [])
    if not samples:
        raise DataError(f"no samples in split {args.split!r}")
    if not 0 <= args.sample_id < len(samples):
        raise DataError(
            f"sample-id {args.sample_id} outside [0, {len(samples)}) for split {args.split!r}"
        )
    report = extract_attention(model, samples[args.sample_id])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    heatmap = out / f"attention_l{args.layer}_h{args.head}.ppm"
    export_attention_heatmap(report, args.layer, args.head, heatmap)
    write_block_mass_report(report, out / "block_mass.json")
    write_run_manifest(
        out, "attn",
        {"sample_id": args.sample_id, "layer": args.layer, "head": args.head,
         "split": args.split, "ckpt": str(args.ckpt)},
        header.get("seed"),
        inputs=[str(args.ckpt)],
        outputs=[str(heatmap), str(out / "block_mass.json")],
        wall_time=time.monotonic() - started,
    )
    print(f"wrote attention heatmap and block masses to {out}")
    return 0


# ----------------------------------------------------------------------
# Parser and dispatch
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="televit",
        description="Multi-scale transformer laboratory for burned-area forecasting",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cubegen", help="generate a synthetic datacube")
    p.add_argument("--config", default=None, help="JSON generator config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_cubegen)

    p = sub.add_parser("coarsen", help="block-mean coarsen a cube's inputs")
    p.add_argument("--cube", required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_coarsen)

    p = sub.add_parser("train", help="train one variant at one horizon")
    p.add_argument("--cube", required=True)
    p.add_argument("--variant", default="with_indices_and_global",
                   choices=sorted(VARIANT_SOURCES))
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--config", default=None, help="JSON with model/train/split overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cube", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="export a stitched prediction map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cube", default=None)
    p.add_argument("--time", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-below", type=float, default=0.05)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("attn", help="export attention heatmap and block masses")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cube", default=None)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attn)

    return parser


def cmd_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, MetricError, NumericsError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TeleViTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cmd_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
