"""Command-line pipeline: gen-data, build-splits, train, eval, report.

Every command is deterministic given its config file; all randomness is
seeded from explicit config values (never the clock). Outputs are
byte-identical across repeated runs except for the report's ``meta``
timestamp field.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import datakit, evalkit, model as model_mod
from .backbone import BackboneConfig
from .checkpoint import CheckpointError
from .datakit import DataError
from .evalkit import FeatureSet
from .model import MsvrConfig, NumericalError
from .ndgrad import ShapeError
from .pyramid import build_pyramid, load_image


class ConfigError(ValueError):
    """The run configuration file is malformed or inconsistent."""


@dataclass
class DataSettings:
    seed: int = 0
    n_ids: int = 50
    frames_per_id: int = 40
    base_side: int = 280
    ids_per_video: int = 5


@dataclass
class SplitSettings:
    seed: int = 0
    train_subsample: int = 2


@dataclass
class ModelSettings:
    seed: int = 0
    scales: list = field(default_factory=lambda: [64, 48])
    alignment_weight: float = 1.0
    temperature: float = 1.0
    learning_rate: float = 0.001
    weight_decay: float = 0.0002
    beta1: float = 0.5
    batch_size: int = 8
    max_iterations: int = 2000
    detach_teacher: bool = True
    trace_every: int = 50
    train_seed: int = 0


@dataclass
class BackboneSettings:
    channels: list = field(default_factory=lambda: [16, 32, 64])
    strides: list = field(default_factory=lambda: [2, 2, 2])
    kernel_size: int = 3
    embed_dim: int = 64


@dataclass
class EvalSettings:
    max_rank: int = 50
    exclude_same_view: bool = False


@dataclass
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)


_SECTIONS = {
    "data": DataSettings,
    "split": SplitSettings,
    "model": ModelSettings,
    "backbone": BackboneSettings,
    "eval": EvalSettings,
}


def load_config(path: str | None) -> RunConfig:
    """Parse and validate the TOML config; unknown keys are rejected."""
    config = RunConfig()
    if path is None:
        return config
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section, values in raw.items():
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        target = getattr(config, section)
        for key, value in values.items():
            if not hasattr(target, key):
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            current = getattr(target, key)
            if isinstance(current, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{path}: [{section}] {key} must be a boolean")
            elif isinstance(current, int) and isinstance(value, bool):
                raise ConfigError(f"{path}: [{section}] {key} must be a number")
            elif isinstance(current, (int, float)) and not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: [{section}] {key} must be a number")
            elif isinstance(current, list) and not isinstance(value, list):
                raise ConfigError(f"{path}: [{section}] {key} must be a list")
            setattr(target, key, value)
    return config


def msvr_config_from(settings: ModelSettings, n_id: int) -> MsvrConfig:
    try:
        return MsvrConfig(
            n_id=n_id,
            scales=tuple(settings.scales),
            alignment_weight=settings.alignment_weight,
            temperature=settings.temperature,
            learning_rate=settings.learning_rate,
            weight_decay=settings.weight_decay,
            beta1=settings.beta1,
            batch_size=settings.batch_size,
            max_iterations=settings.max_iterations,
            detach_teacher=settings.detach_teacher,
            trace_every=settings.trace_every,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def backbone_config_from(settings: BackboneSettings) -> BackboneConfig:
    try:
        return BackboneConfig(
            input_side=1,  # placeholder; init_model swaps in each branch's scale
            channels_per_stage=tuple(settings.channels),
            stage_strides=tuple(settings.strides),
            kernel_size=settings.kernel_size,
            embed_dim=settings.embed_dim,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise DataError(f"output directory {out_dir} is not empty (use --force to overwrite)")
    seed = config.data.seed if args.seed is None else args.seed
    trajectories = datakit.generate_synthetic(
        out_dir,
        n_ids=config.data.n_ids,
        frames_per_id=config.data.frames_per_id,
        base_side=config.data.base_side,
        seed=seed,
        ids_per_video=config.data.ids_per_video,
    )
    stats = datakit.compute_stats(trajectories)
    datakit.write_stats_csv(stats, out_dir / "stats.csv")
    print(
        f"generated {stats.n_images} images of {stats.n_ids} identities "
        f"across {stats.n_videos} videos into {out_dir}"
    )
    return 0


def cmd_build_splits(args) -> int:
    config = load_config(args.config)
    seed = config.split.seed if args.seed is None else args.seed
    trajectories = datakit.load_manifest(args.manifest)
    filtered = datakit.filter_trajectories(trajectories)
    if not filtered:
        raise DataError("no trajectory survived filtering")
    split = datakit.build_split(filtered, seed=seed, train_subsample=config.split.train_subsample)
    datakit.save_split(split, args.out)
    print(
        f"split: {len(split.train_ids)} train ids ({len(split.train)} images), "
        f"{len(split.probe)} probe / {len(split.gallery)} gallery images -> {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    split = datakit.load_split(args.split)
    data_root = Path(args.data_root) if args.data_root else Path(args.split).parent
    entries, _ = datakit.relabel_for_training(split)
    if not entries:
        raise DataError("split contains no training images")
    dataset = datakit.ImageDataset(entries, data_root)

    msvr_config = msvr_config_from(config.model, n_id=len(split.train_ids))
    arch = backbone_config_from(config.backbone)
    net = model_mod.init_model(msvr_config, arch, seed=config.model.seed)
    net, trace = model_mod.train(net, dataset, seed=config.model.train_seed)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model_mod.save_model(out, net)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    model_mod.write_trace_csv(trace, trace_path)
    print(
        f"trained {msvr_config.max_iterations} iterations; "
        f"loss {trace[0].total:.4f} -> {trace[-1].total:.4f}; "
        f"checkpoint {out}, trace {trace_path}"
    )
    return 0


def _split_features(net, split, data_root, scales, branch: int | None):
    def rows(entries):
        ids, views, feats = [], [], []
        for path, identity, view in entries:
            image = load_image(data_root / path)
            pyramid = build_pyramid(image, scales).images
            if branch is None:
                vector = model_mod.extract_features(net, pyramid).data
            else:
                vector = model_mod.branch_features(net, pyramid, branch).data
            ids.append(identity)
            views.append(view)
            feats.append(vector)
        return ids, views, np.stack(feats)

    probe_ids, probe_views, probe_feats = rows(split.probe)
    gallery_ids, gallery_views, gallery_feats = rows(split.gallery)
    return FeatureSet.from_parts(
        probe_ids, probe_feats, gallery_ids, gallery_feats, probe_views, gallery_views
    )


def cmd_eval(args) -> int:
    config = load_config(args.config)
    net = model_mod.load_model(args.checkpoint)
    split = datakit.load_split(args.split)
    data_root = Path(args.data_root) if args.data_root else Path(args.split).parent
    branch = args.ablate_branch
    if branch is not None and not 0 <= branch < net.num_scales:
        raise ConfigError(f"--ablate-branch {branch} out of range for {net.num_scales} branches")

    features = _split_features(net, split, data_root, net.config.scales, branch)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.features_only:
        np.save(out.with_suffix(".npy"), features.features)
        sidecar = {
            "ids": features.ids,
            "roles": features.roles,
            "views": features.views,
            "feature_dim": int(features.features.shape[1]),
        }
        with open(out, "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"features: {features.features.shape} -> {out.with_suffix('.npy')}")
        return 0

    report = evalkit.evaluate(
        features,
        max_rank=config.eval.max_rank,
        exclude_same_view=config.eval.exclude_same_view,
    )
    meta = {
        "created": datetime.now(timezone.utc).isoformat(),
        "checkpoint": str(args.checkpoint),
        "split": str(args.split),
        "ablate_branch": branch,
    }
    evalkit.write_report_json(report, out, meta=meta)
    evalkit.write_cmc_csv(report, out.with_suffix(".cmc.csv"))
    name = "fused" if branch is None else f"branch-{branch}"
    print(evalkit.format_table([(name, report)]))
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        report, meta = evalkit.load_report_json(path)
        label = Path(path).stem
        if meta.get("ablate_branch") is not None:
            label += f" (branch {meta['ablate_branch']})"
        rows.append((label, report))
    print(evalkit.format_table(rows))
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msvr",
        description="Multi-scale re-identification pipeline on synthetic data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset and manifest")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the data seed")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-splits", help="filter a manifest and build the benchmark split")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--manifest", required=True, help="manifest TSV path")
    p.add_argument("--seed", type=int, help="override the split seed")
    p.add_argument("--out", required=True, help="split JSON output path")
    p.set_defaults(func=cmd_build_splits)

    p = sub.add_parser("train", help="train a model on the split's training images")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--split", required=True, help="split JSON path")
    p.add_argument("--data-root", help="image root (defaults to the split's directory)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--trace", help="loss trace CSV path (default: alongside checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the split's test sets")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--split", required=True, help="split JSON path")
    p.add_argument("--data-root", help="image root (defaults to the split's directory)")
    p.add_argument("--out", required=True, help="report JSON output path")
    p.add_argument("--features-only", action="store_true", help="dump descriptors, skip metrics")
    p.add_argument("--ablate-branch", type=int, help="evaluate one scale branch's embedding")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print a Rank-1/Rank-5/mAP table from report files")
    p.add_argument("reports", nargs="+", help="report JSON paths")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, ShapeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
