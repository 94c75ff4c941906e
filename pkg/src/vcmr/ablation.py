"""Input-resolution and data-scarcity ablation drivers (CSV + plot output)."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .corpus import Manifest, subsample_training
from .errors import InvalidInputError
from .models import SampleCNNConfig, resolution_calculus
from .train import RunConfig, TrackStore, evaluate, finetune, pretrain_audio, pretrain_multimodal

logger = logging.getLogger(__name__)

SCARCITY_FRACTIONS = (0.05, 0.10, 0.20, 0.50, 0.80)
VALID_KERNELS = range(1, 9)


@dataclass
class PipelineConfigs:
    """Per-stage run configs shared by every ablation cell."""

    audio: RunConfig
    multimodal: RunConfig
    finetune: RunConfig

    @classmethod
    def defaults(cls, **overrides) -> "PipelineConfigs":
        return cls(
            RunConfig.for_stage("audio_pretrain", **overrides),
            RunConfig.for_stage("multimodal_pretrain", **overrides),
            RunConfig.for_stage("finetune", **overrides),
        )

    def with_(self, **changes) -> "PipelineConfigs":
        return PipelineConfigs(*(replace(c, **changes) for c in (self.audio, self.multimodal, self.finetune)))


def train_both_variants(
    manifest: Manifest, cfgs: PipelineConfigs, store: TrackStore, cache_dir=None
) -> dict[str, Checkpoint]:
    """Audio-only and video-conditioned backbones sharing one stage-1 run."""
    stage1 = pretrain_audio(manifest, cfgs.audio, store=store)
    stage2 = pretrain_multimodal(manifest, stage1.export, cfgs.multimodal, cache_dir=cache_dir, store=store)
    return {"audio_only": stage1.export, "vcmr": stage2.export}


def finetune_and_test(manifest, backbone, cfg, store, tag_vocabulary=None, test_manifest=None):
    tagger = finetune(manifest, backbone, cfg, tag_vocabulary=tag_vocabulary, store=store)
    _, _, metrics = evaluate(test_manifest or manifest, tagger.checkpoint, "test", store=store)
    return metrics


def _check_kernels(k_grid: Sequence[int]):
    bad = [k for k in k_grid if not isinstance(k, (int, np.integer)) or k not in VALID_KERNELS]
    if bad:
        raise InvalidInputError(f"first-layer kernels {bad} are outside the admissible grid 1..8")


def run_resolution_ablation(
    manifest: Manifest,
    k_grid: Sequence[int],
    cfgs: PipelineConfigs,
    store: TrackStore | None = None,
    cache_dir=None,
    seeds: Sequence[int] = (0,),
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Train/evaluate audio-only and video-conditioned models for every ``k``.

    Returns rows ``{model, k, samples, duration_s, roc_auc, pr_auc}`` with
    metrics averaged over ``seeds``.
    """
    _check_kernels(k_grid)
    store = store or TrackStore(manifest, cache_dir)
    vocab = manifest.tag_vocabulary()
    rows = []
    for k in k_grid:
        samples, duration = resolution_calculus(SampleCNNConfig(first_kernel=int(k), channel_schedule=cfgs.audio.channel_schedule, stem_channels=cfgs.audio.stem_channels))
        per_model: dict[str, list[dict]] = {"audio_only": [], "vcmr": []}
        for seed in seeds:
            c = cfgs.with_(first_kernel=int(k), seed=int(seed))
            backbones = train_both_variants(manifest, c, store, cache_dir)
            for name, bb in backbones.items():
                per_model[name].append(finetune_and_test(manifest, bb, c.finetune, store, vocab))
        for name, ms in per_model.items():
            rows.append({
                "model": name,
                "k": int(k),
                "samples": samples,
                "duration_s": duration,
                "roc_auc": float(np.mean([m["roc_auc"] for m in ms])),
                "pr_auc": float(np.mean([m["pr_auc"] for m in ms])),
                "n_seeds": len(ms),
            })
            logger.info("resolution k=%d %s: roc=%.4f pr=%.4f", k, name, rows[-1]["roc_auc"], rows[-1]["pr_auc"])
    if out_dir is not None:
        out = Path(out_dir)
        write_rows(out / "resolution_ablation.csv", rows)
        plot_rows(out / "resolution_ablation.png", rows, x="duration_s", xlabel="input length (s)")
    return rows


def run_scarcity_ablation(
    manifest: Manifest,
    backbones: Mapping[str, Checkpoint],
    cfg: RunConfig,
    fractions: Sequence[float] = SCARCITY_FRACTIONS,
    store: TrackStore | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Fine-tune each backbone on growing train subsets; test on the full test split."""
    store = store or TrackStore(manifest)
    vocab = manifest.tag_vocabulary()
    rows = []
    for f in fractions:
        sub = subsample_training(manifest, f, seed)
        n_train = len(sub.split("train"))
        if n_train == 0:
            raise InvalidInputError(f"fraction {f} leaves no training records")
        for name, bb in backbones.items():
            m = finetune_and_test(sub, bb, cfg, store, vocab, test_manifest=manifest)
            rows.append({"model": name, "fraction": float(f), "n_train": n_train, "roc_auc": m["roc_auc"], "pr_auc": m["pr_auc"]})
    check_monotone(rows)
    if out_dir is not None:
        out = Path(out_dir)
        write_rows(out / "scarcity_ablation.csv", rows)
        plot_rows(out / "scarcity_ablation.png", rows, x="fraction", xlabel="fraction of training data")
    return rows


def check_monotone(rows: list[dict], metric: str = "roc_auc") -> list[str]:
    """Soft check: warn for every model whose metric drops as data grows."""
    offenders = []
    for name in sorted({r["model"] for r in rows}):
        vals = [r[metric] for r in sorted((r for r in rows if r["model"] == name), key=lambda r: r["fraction"])]
        if any(b < a for a, b in zip(vals, vals[1:])):
            offenders.append(name)
            warnings.warn(f"{metric} of {name!r} is not monotone in the training fraction: {vals}", stacklevel=2)
    return offenders


def write_rows(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            parsed = {}
            for k, v in r.items():
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
        return out


def plot_rows(path: str | Path, rows: list[dict], x: str, xlabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, metric in zip(axes, ("roc_auc", "pr_auc")):
        for name in sorted({r["model"] for r in rows}):
            pts = sorted((r[x], r[metric]) for r in rows if r["model"] == name)
            ax.plot(*zip(*pts), marker="o", label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(metric.replace("_", "-").upper())
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
