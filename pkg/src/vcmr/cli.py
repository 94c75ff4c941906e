"""``vcmr`` command-line entry point.

Configuration keys resolve with precedence ``flags > --config file > defaults``.
Config files are flat JSON objects ``{"key": value}`` using the keys of
:data:`DEFAULTS`; every run directory receives a ``config.json`` echo that can
be fed back through ``--config``.

Run directories live under ``--out-dir`` and are named
``<command>-<config hash>-s<seed>``; a ``<command>-latest`` symlink points at
the most recent one.  Existing runs are never overwritten without ``--force``.

Exit codes: 0 success, 1 unexpected error, 2 configuration error, 3 data
error, 4 numeric failure, 5 missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ablation, corpus, eval as ev, features, models
from .augment import AugmentChainConfig
from .checkpoint import load_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InvalidInputError,
    MissingArtifactError,
    NumericError,
    VCMRError,
)
from .train import ALL_BLOCKS, RunConfig, TrackStore, evaluate, finetune, pretrain_audio, pretrain_multimodal

logger = logging.getLogger("vcmr")

CACHE_ENV = "VCMR_CACHE_ROOT"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_MISSING = 0, 1, 2, 3, 4, 5

_AUG = AugmentChainConfig()

DEFAULTS: dict = {
    # run
    "seed": 0,
    "epochs": 50,
    "batch_size": None,  # stage default: 64 audio pre-training, 128 otherwise
    "learning_rate": 1e-3,
    "weight_decay": 1e-6,
    "temperature": 0.1,
    "first_kernel": 5,
    "stem_channels": 128,
    "channel_schedule": list(models.DEFAULT_CHANNELS),
    "proj_dim": 128,
    "video_hidden_dim": 256,
    "video_readout": "last",
    "video_input_scale": "sqrt_dim",
    "bn_recalibration": True,
    "tag_hidden_dim": 256,
    "freeze_blocks_n": None,  # stage default: 0 / 4 / all
    "eval_overlap": 0.5,
    "require_multimodal": False,
    # augmentation
    **{f"augment.{k}": v for k, v in _AUG.to_dict().items() if k != "rng_seed"},
    "aug_off": False,
    # corpus / features
    "manifest": None,
    "input_manifest": None,
    "output_manifest": None,
    "scenes_dir": None,
    "max_scene_s": 30.0,
    "cache_dir": None,
    "fps": 5.0,
    "embedder": "stub",
    "embedder_seed": 0,
    "external_embedder": None,  # "module:factory" returning a FrameEmbedder
    # checkpoints
    "audio_ckpt": None,
    "backbone_ckpt": None,
    "backbones": None,  # {"name": "path"} for ablate-scarcity
    "checkpoint": None,
    # evaluation
    "split": "test",
    "k_grid": [3, 5],
    "fractions": list(ablation.SCARCITY_FRACTIONS),
    "ablation_seeds": [0],
    "tag_groups": None,
    "per_tag_csv": None,
    "group_metric": "roc_auc",
}

STAGE_OF = {"pretrain-audio": "audio_pretrain", "pretrain-multimodal": "multimodal_pretrain", "finetune": "finetune"}


@dataclass
class AppConfig:
    values: dict
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:10]


def _coerce(key: str, value, default):
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, list):
                raise ValueError(value)
            return value
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config key {key!r}: cannot use {value!r} as {type(default).__name__}") from exc
    return value


def resolve_config(defaults: dict, file_values: dict | None = None, flags: dict | None = None) -> AppConfig:
    """Merge configuration layers (flags > file > defaults), recording provenance."""
    values = dict(defaults)
    provenance = {k: "default" for k in defaults}
    for layer, name in ((file_values or {}, "file"), (flags or {}, "flag")):
        for key, value in layer.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value, defaults[key])
            provenance[key] = name
    return AppConfig(values, provenance)


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def run_config(cfg: AppConfig, stage: str) -> RunConfig:
    aug = {k.split(".", 1)[1]: v for k, v in cfg.values.items() if k.startswith("augment.")}
    augment = AugmentChainConfig.from_dict({**aug, "rng_seed": cfg["seed"]})
    if cfg["aug_off"]:
        augment = augment.off()
    overrides = {
        k: cfg[k]
        for k in (
            "epochs", "learning_rate", "weight_decay", "temperature", "first_kernel", "stem_channels",
            "proj_dim", "video_hidden_dim", "video_readout", "video_input_scale", "bn_recalibration", "tag_hidden_dim", "eval_overlap", "seed",
        )
    }
    overrides["channel_schedule"] = tuple(cfg["channel_schedule"])
    overrides["augment"] = augment
    if cfg["batch_size"] is not None:
        overrides["batch_size"] = cfg["batch_size"]
    if cfg["freeze_blocks_n"] is not None:
        overrides["freeze_blocks_n"] = cfg["freeze_blocks_n"]
    return RunConfig.for_stage(stage, **overrides)


def cache_dir(cfg: AppConfig) -> Path | None:
    if cfg["cache_dir"]:
        return Path(cfg["cache_dir"])
    root = os.environ.get(CACHE_ENV)
    return Path(root) / "features" if root else None


def _require(cfg: AppConfig, key: str, producer: str | None = None) -> str:
    value = cfg[key]
    if value is None:
        hint = f" (produced by `vcmr {producer}`)" if producer else ""
        raise MissingArtifactError(f"missing --{key.replace('_', '-')}{hint}")
    if producer and not Path(value).exists():
        raise MissingArtifactError(f"{value} does not exist; run `vcmr {producer}` first")
    return value


class RunDir:
    def __init__(self, out_dir: Path, command: str, cfg: AppConfig, force: bool):
        self.path = out_dir / f"{command}-{cfg.digest()}-s{cfg['seed']}"
        if (self.path / "run.json").exists() and not force:
            raise ConfigError(f"run directory {self.path} already exists; pass --force to overwrite")
        if self.path.exists() and force:
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.json").write_text(json.dumps(cfg.values, indent=2, sort_keys=True))
        (self.path / "config.provenance.json").write_text(json.dumps(cfg.provenance, indent=2, sort_keys=True))
        alias = out_dir / f"{command}-latest"
        if alias.is_symlink() or alias.exists():
            alias.unlink()
        try:
            alias.symlink_to(self.path.name)
        except OSError:  # pragma: no cover - filesystems without symlinks
            pass
        self.meta = {"command": command, "seed": cfg["seed"], "config_hash": cfg.digest(),
                     "started": time.strftime("%Y-%m-%dT%H:%M:%S"), "artifacts": {}}

    def artifact(self, name: str, path) -> None:
        self.meta["artifacts"][name] = str(path)

    def finish(self, **extra) -> None:
        self.meta.update(extra)
        self.meta["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        (self.path / "run.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_curate(cfg, run):
    manifest = corpus.Manifest.load(_require(cfg, "input_manifest"))
    scenes_dir = _require(cfg, "scenes_dir")
    scenes = corpus.load_scene_lists(scenes_dir, manifest.track_ids())
    result = corpus.filter_by_scene_length(manifest, scenes, cfg["max_scene_s"])
    out = Path(cfg["output_manifest"] or run.path / "curated.jsonl")
    result.manifest.save(out)
    run.artifact("manifest", out)
    print(f"kept {len(result.manifest)} of {len(manifest)} records -> {out}")
    if result.skipped:
        print(f"skipped (no scene list): {', '.join(result.skipped)}")
    return {"kept": len(result.manifest), "skipped": result.skipped}


def _make_embedder(cfg):
    if cfg["embedder"] == "stub":
        return features.RandomProjectionEmbedder(seed=cfg["embedder_seed"])
    if cfg["embedder"] == "external":
        spec = cfg["external_embedder"]
        if not spec or ":" not in spec:
            raise ConfigError("--embedder external needs external_embedder = 'module:factory'")
        mod, attr = spec.split(":", 1)
        return getattr(importlib.import_module(mod), attr)()
    raise ConfigError(f"unknown embedder {cfg['embedder']!r}")


def cmd_embed_frames(cfg, run):
    manifest = corpus.Manifest.load(_require(cfg, "manifest"))
    out_dir = cache_dir(cfg) or run.path / "features"
    embedder = _make_embedder(cfg)
    done, missing = 0, []
    for r in manifest:
        if not r.has_video:
            continue
        try:
            frames, src_fps = features.load_frames(r.video_path)
        except (OSError, DataError) as exc:
            logger.warning("skipping %s: %s", r.track_id, exc)
            missing.append(r.track_id)
            continue
        frames = features.sample_frames(frames, src_fps, cfg["fps"])
        seq = features.average_per_second(features.embed_frames(frames, embedder, cfg["fps"]), r.track_id)
        features.save_second_embeddings(features.feature_cache_path(out_dir, r.track_id), seq)
        done += 1
    run.artifact("cache_dir", out_dir)
    print(f"embedded {done} video(s) into {out_dir}")
    return {"embedded": done, "skipped": missing}


def cmd_pretrain_audio(cfg, run):
    manifest = corpus.Manifest.load(_require(cfg, "manifest"))
    result = pretrain_audio(manifest, run_config(cfg, "audio_pretrain"), out_dir=run.path)
    run.artifact("checkpoint", run.path / "last.ckpt")
    run.artifact("backbone", run.path / "backbone.ckpt")
    print(f"stage 1 done: backbone at {run.path / 'backbone.ckpt'}")
    return {"history": result.history, "best_epoch": result.best_epoch}


def cmd_pretrain_multimodal(cfg, run):
    manifest = corpus.Manifest.load(_require(cfg, "manifest"))
    audio = load_checkpoint(_require(cfg, "audio_ckpt", "pretrain-audio"))
    cdir = cache_dir(cfg)
    if cdir is None:
        raise MissingArtifactError("no feature cache (--cache-dir); run `vcmr embed-frames` first")
    result = pretrain_multimodal(manifest, audio, run_config(cfg, "multimodal_pretrain"), cache_dir=cdir, out_dir=run.path)
    run.artifact("checkpoint", run.path / "last.ckpt")
    run.artifact("backbone", run.path / "backbone.ckpt")
    print(f"stage 2 done: backbone at {run.path / 'backbone.ckpt'}")
    return {"history": result.history, "best_epoch": result.best_epoch}


def cmd_finetune(cfg, run):
    manifest = corpus.Manifest.load(_require(cfg, "manifest"))
    backbone = load_checkpoint(_require(cfg, "backbone_ckpt", "pretrain-audio"))
    rc = run_config(cfg, "finetune")
    if rc.freeze_blocks_n != ALL_BLOCKS:
        raise ConfigError("fine-tuning keeps the whole encoder frozen")
    result = finetune(manifest, backbone, rc, out_dir=run.path, require_multimodal=cfg["require_multimodal"])
    run.artifact("checkpoint", run.path / "finetuned.ckpt")
    print(f"stage 3 done: best epoch {result.best_epoch}, tagger at {run.path / 'finetuned.ckpt'}")
    return {"best_epoch": result.best_epoch, "valid": result.checkpoint.meta["valid_metrics"]}


def cmd_evaluate(cfg, run):
    manifest = corpus.Manifest.load(_require(cfg, "manifest"))
    tagger = load_checkpoint(_require(cfg, "checkpoint", "finetune"))
    preds, labels, metrics = evaluate(manifest, tagger, cfg["split"], overlap=cfg["eval_overlap"])
    ev.write_summary(run.path / "metrics.json", metrics)
    ev.write_per_tag_csv(run.path / "per_tag.csv", metrics)
    np.savez(run.path / "predictions.npz", scores=preds.scores, labels=labels.labels,
             track_ids=np.array(preds.track_ids), tags=np.array(preds.tag_vocabulary))
    for name in ("metrics.json", "per_tag.csv", "predictions.npz"):
        run.artifact(name, run.path / name)
    print(f"{cfg['split']}: ROC-AUC {metrics['roc_auc']:.4f}  PR-AUC {metrics['pr_auc']:.4f}  "
          f"({metrics['n_tracks']} tracks, {len(metrics['skipped_tags'])} skipped tags)")
    return {"roc_auc": metrics["roc_auc"], "pr_auc": metrics["pr_auc"]}


def _pipeline_configs(cfg) -> ablation.PipelineConfigs:
    return ablation.PipelineConfigs(
        run_config(cfg, "audio_pretrain"), run_config(cfg, "multimodal_pretrain"), run_config(cfg, "finetune")
    )


def cmd_ablate_resolution(cfg, run):
    manifest = corpus.Manifest.load(_require(cfg, "manifest"))
    rows = ablation.run_resolution_ablation(
        manifest, cfg["k_grid"], _pipeline_configs(cfg), cache_dir=cache_dir(cfg),
        seeds=cfg["ablation_seeds"], out_dir=run.path,
    )
    run.artifact("csv", run.path / "resolution_ablation.csv")
    run.artifact("plot", run.path / "resolution_ablation.png")
    for r in rows:
        print(f"{r['model']:>10}  k={r['k']}  {r['duration_s']:.4f}s  ROC {r['roc_auc']:.4f}  PR {r['pr_auc']:.4f}")
    return {"rows": rows}


def cmd_ablate_scarcity(cfg, run):
    manifest = corpus.Manifest.load(_require(cfg, "manifest"))
    specs = cfg["backbones"] or ({"backbone": cfg["backbone_ckpt"]} if cfg["backbone_ckpt"] else None)
    if not specs:
        raise MissingArtifactError("ablate-scarcity needs --backbone-ckpt or a 'backbones' map (run a pre-training stage)")
    backbones = {name: load_checkpoint(path) for name, path in specs.items()}
    rows = ablation.run_scarcity_ablation(
        manifest, backbones, run_config(cfg, "finetune"), cfg["fractions"], seed=cfg["seed"], out_dir=run.path
    )
    run.artifact("csv", run.path / "scarcity_ablation.csv")
    run.artifact("plot", run.path / "scarcity_ablation.png")
    for r in rows:
        print(f"{r['model']:>10}  {100 * r['fraction']:5.1f}%  ROC {r['roc_auc']:.4f}  PR {r['pr_auc']:.4f}")
    return {"rows": rows}


def cmd_report_groups(cfg, run):
    per_tag_csv = _require(cfg, "per_tag_csv", "evaluate")
    metric = cfg["group_metric"]
    per_tag = {}
    with open(per_tag_csv, newline="") as fh:
        import csv

        for row in csv.DictReader(fh):
            value = float(row[metric])
            if not np.isnan(value):
                per_tag[row["tag"]] = value
    report = ev.tag_group_report(per_tag, ev.load_tag_groups(cfg["tag_groups"]))
    out = run.path / "groups.csv"
    ev.write_group_csv(out, report, metric)
    run.artifact("groups.csv", out)
    for g, m in report.means.items():
        print(f"{g:>12}: {m:.4f} ({report.counts[g]} tags)")
    return {"groups": report.means}


def cmd_inspect_model(cfg, run):
    enc = models.SampleCNNConfig(
        first_kernel=cfg["first_kernel"], stem_channels=cfg["stem_channels"], channel_schedule=tuple(cfg["channel_schedule"])
    )
    n = models.count_parameters(enc)
    built = models.trainable_parameter_count(models.SampleCNN(enc))
    print(f"SampleCNN k={enc.first_kernel}: {n:,} parameters (instantiated: {built:,})")
    print(" k  samples  seconds")
    for k, samples, seconds in models.resolution_table(base=enc):
        print(f"{k:2d} {samples:8d}  {seconds:.4f}")
    return {"parameters": n}


COMMANDS = {
    "curate": (cmd_curate, ["input_manifest", "scenes_dir", "max_scene_s", "output_manifest"]),
    "embed-frames": (cmd_embed_frames, ["manifest", "fps", "embedder", "cache_dir", "external_embedder"]),
    "pretrain-audio": (cmd_pretrain_audio, ["manifest", "cache_dir", "epochs", "batch_size", "temperature", "first_kernel", "aug_off"]),
    "pretrain-multimodal": (cmd_pretrain_multimodal, ["manifest", "cache_dir", "audio_ckpt", "epochs", "batch_size", "temperature", "first_kernel", "freeze_blocks_n"]),
    "finetune": (cmd_finetune, ["manifest", "cache_dir", "backbone_ckpt", "epochs", "batch_size", "first_kernel", "require_multimodal"]),
    "evaluate": (cmd_evaluate, ["manifest", "cache_dir", "checkpoint", "split"]),
    "ablate-resolution": (cmd_ablate_resolution, ["manifest", "cache_dir", "k_grid", "epochs", "batch_size"]),
    "ablate-scarcity": (cmd_ablate_scarcity, ["manifest", "cache_dir", "backbone_ckpt", "fractions", "epochs", "batch_size"]),
    "report-groups": (cmd_report_groups, ["per_tag_csv", "tag_groups", "group_metric"]),
    "inspect-model": (cmd_inspect_model, ["first_kernel"]),
}

_FLAG_TYPES = {bool: None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcmr", description="Video-conditioned music representation pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat key/value)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="runs")
    common.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, keys) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common])
        for key in keys:
            flag = "--" + key.replace("_", "-")
            default = DEFAULTS[key]
            if isinstance(default, bool):
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, dest=key, default=None)
    return parser


def _flags_from_args(args) -> dict:
    flags = {}
    for key in COMMANDS[args.command][1]:
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = value
    if args.seed is not None:
        flags["seed"] = args.seed
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            flags[key] = json.loads(value)
        except json.JSONDecodeError:
            flags[key] = value
    return flags


def run_pipeline(command: str, cfg: AppConfig, out_dir: str | Path = "runs", force: bool = False) -> RunDir:
    run = RunDir(Path(out_dir), command, cfg, force)
    summary = COMMANDS[command][0](cfg, run)
    run.finish(summary=summary)
    return run


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(DEFAULTS, load_config_file(args.config), _flags_from_args(args))
        run = run_pipeline(args.command, cfg, args.out_dir, args.force)
        print(f"run directory: {run.path}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, InvalidInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VCMRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
