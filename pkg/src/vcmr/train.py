"""Three-stage training: audio pre-training, audio-video pre-training, tagging.

Determinism: every random choice is drawn from a numpy generator seeded by
``(seed, epoch)`` (batch order) or ``(seed, crc32(track_id), epoch)`` (crops
and augmentation), and network initialisation from ``torch.manual_seed(seed)``.
Resuming from a checkpoint therefore continues the exact same trajectory.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentChainConfig, make_training_pair, random_crop
from .checkpoint import Checkpoint, pack_state, save_checkpoint
from .contrastive import build_multimodal_batch, build_unimodal_batch, nt_xent_loss, LossConfig
from .corpus import Manifest, TrackRecord
from .errors import ConfigError, DataError, MissingArtifactError, NumericError, OutOfRangeError
from .eval import LabelMatrix, PredictionMatrix, evaluate_predictions, window_matrix
from .features import SAMPLE_RATE, AudioWaveform, align_video_segment, decode_audio, feature_cache_path, load_second_embeddings
from .models import (
    ProjectorConfig,
    Projector,
    SampleCNN,
    SampleCNNConfig,
    TagHead,
    TagHeadConfig,
    VideoEncoder,
    VideoEncoderConfig,
    freeze_blocks,
)

logger = logging.getLogger(__name__)

STAGES = ("audio_pretrain", "multimodal_pretrain", "finetune")
ALL_BLOCKS = -1


@dataclass(frozen=True)
class RunConfig:
    stage: str = "audio_pretrain"
    batch_size: int = 64
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    adam_betas: tuple[float, float] = (0.9, 0.999)
    temperature: float = 0.1
    first_kernel: int = 5
    stem_channels: int = 128
    channel_schedule: tuple[int, ...] = (128, 128, 128, 256, 256, 256, 512, 512, 512)
    proj_dim: int = 128
    video_hidden_dim: int = 256
    video_readout: str = "last"
    video_input_scale: str = "sqrt_dim"
    bn_recalibration: bool = True
    tag_hidden_dim: int = 256
    freeze_blocks_n: int = 0
    eval_overlap: float = 0.5
    seed: int = 0
    augment: AugmentChainConfig = field(default_factory=AugmentChainConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        for key in ("batch_size", "learning_rate"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.stage == "audio_pretrain" and self.freeze_blocks_n != 0:
            raise ConfigError("audio pre-training trains the whole encoder (freeze_blocks_n must be 0)")
        if self.stage == "finetune" and self.freeze_blocks_n != ALL_BLOCKS:
            raise ConfigError("fine-tuning keeps the whole encoder frozen (freeze_blocks_n must be -1)")
        object.__setattr__(self, "channel_schedule", tuple(self.channel_schedule))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentChainConfig.from_dict(self.augment))

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "RunConfig":
        """Defaults for ``stage`` (batch 64 / 128, frozen blocks 0 / 4 / all)."""
        defaults = {
            "audio_pretrain": dict(batch_size=64, freeze_blocks_n=0),
            "multimodal_pretrain": dict(batch_size=128, freeze_blocks_n=4),
            "finetune": dict(batch_size=128, freeze_blocks_n=ALL_BLOCKS),
        }[stage]
        return cls(stage=stage, **{**defaults, **overrides})

    @property
    def encoder(self) -> SampleCNNConfig:
        return SampleCNNConfig(
            first_kernel=self.first_kernel,
            stem_channels=self.stem_channels,
            channel_schedule=self.channel_schedule,
        )

    @property
    def segment_samples(self) -> int:
        return self.encoder.input_samples

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_schedule"] = list(self.channel_schedule)
        d["adam_betas"] = list(self.adam_betas)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int | None = None
    export: Checkpoint | None = None
    metrics: dict | None = None


class TrackStore:
    """Lazily decoded waveforms and cached video features, keyed by track id."""

    def __init__(self, manifest: Manifest, cache_dir: str | Path | None = None):
        self.records = manifest.by_id()
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._audio: dict[str, AudioWaveform] = {}
        self._video: dict = {}

    def audio(self, track_id: str) -> AudioWaveform:
        if track_id not in self._audio:
            self._audio[track_id] = decode_audio(self.records[track_id].audio_path, track_id)
        return self._audio[track_id]

    def video(self, track_id: str):
        if track_id not in self._video:
            if self.cache_dir is None:
                raise MissingArtifactError("no feature cache directory configured (run `embed-frames`)")
            path = feature_cache_path(self.cache_dir, track_id)
            self._video[track_id] = load_second_embeddings(path) if path.exists() else None
        return self._video[track_id]


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


TRAIN_STREAM, VALID_STREAM, RECAL_STREAM = 0, 1, 2


def _track_rng(seed: int, track_id: str, epoch: int, stream: int = TRAIN_STREAM) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(track_id.encode("utf-8")), epoch, stream])


def _batches(order: np.ndarray, batch_size: int, drop_last: bool = False) -> Iterable[np.ndarray]:
    """Consecutive chunks of ``order``.

    With ``drop_last`` a short tail is dropped whenever at least one full batch
    exists, so every contrastive step sees the same number of negatives.  A
    single pair carries no negatives and is always dropped.
    """
    full = len(order) // batch_size
    for i in range(0, len(order), batch_size):
        chunk = order[i : i + batch_size]
        if len(chunk) < 2 or (drop_last and full and len(chunk) < batch_size):
            continue
        yield chunk


def _adam(params, cfg: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay, betas=cfg.adam_betas)


def _check_finite(loss: torch.Tensor, what: str):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite {what} loss")


class _MetricLog:
    """Append-only JSON-lines metric records: ``{"epoch", "split", "loss", ...}``."""

    def __init__(self, path: Path | None):
        self.path = path

    def write(self, **record):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _to_batch(wavs: list[AudioWaveform]) -> torch.Tensor:
    return torch.from_numpy(np.stack([w.samples for w in wavs]))


def _state_equal_copy(modules: dict[str, nn.Module]) -> dict[str, torch.Tensor]:
    tensors = {}
    for prefix, m in modules.items():
        tensors.update(pack_state(prefix, m.state_dict()))
    return tensors


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------


def recalibrate_batchnorm(encoder: SampleCNN, store: TrackStore, ids: list[str], cfg: RunConfig) -> None:
    """Recompute running statistics of the trainable normalisation layers.

    With few optimizer steps per epoch the exponential running averages lag far
    behind the weights, and eval-mode embeddings degenerate.  One no-grad pass
    over fixed plain crops of ``ids`` replaces them with exact averages of the
    per-batch statistics.  Frozen blocks are left untouched.
    """
    frozen = {id(m) for f in encoder.frozen_modules() for m in f.modules()}
    bns = [m for m in encoder.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm) and id(m) not in frozen]
    if not bns or not ids:
        return
    momenta = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    encoder.train()
    seg = cfg.segment_samples
    with torch.no_grad():
        for idx in _batches(np.arange(len(ids)), cfg.batch_size):
            if len(idx) < 2:
                continue
            encoder(_to_batch([random_crop(store.audio(ids[i]), seg, _track_rng(cfg.seed, ids[i], 0, RECAL_STREAM))[0] for i in idx]))
    for m, mom in zip(bns, momenta):
        m.momentum = mom


def fixed_pair_loss(encoder: SampleCNN, projector: Projector, store: TrackStore, ids: list[str], cfg: RunConfig) -> float:
    """Eval-mode NT-Xent over ``ids`` on augmented pairs that never change.

    Pairs come from a dedicated RNG stream with epoch 0, so the value is
    comparable across epochs and between checkpoints of one run.
    """
    encoder.eval()
    projector.eval()
    seg = cfg.segment_samples
    loss_cfg = LossConfig(cfg.temperature)
    losses = []
    with torch.no_grad():
        for idx in _batches(np.arange(len(ids)), cfg.batch_size):
            pairs = [make_training_pair(store.audio(ids[i]), seg, cfg.augment, _track_rng(cfg.seed, ids[i], 0, VALID_STREAM)) for i in idx]
            za = projector(encoder(_to_batch([a for a, _ in pairs])))
            zb = projector(encoder(_to_batch([b for _, b in pairs])))
            losses.append(nt_xent_loss(build_unimodal_batch(za, zb), loss_cfg).item())
    return float(np.mean(losses))


def stage1_models(ckpt: Checkpoint) -> tuple[SampleCNN, Projector]:
    """Rebuild the encoder and projector held by a stage-1 training checkpoint."""
    cfg = RunConfig.from_dict(ckpt.config)
    encoder = SampleCNN(cfg.encoder)
    projector = Projector(ProjectorConfig(proj_dim=cfg.proj_dim))
    encoder.load_state_dict(ckpt.state("encoder"))
    projector.load_state_dict(ckpt.state("projector"))
    return encoder, projector


def pretrain_audio(
    manifest: Manifest,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    store: TrackStore | None = None,
) -> TrainResult:
    """Contrastive pre-training of the encoder on pairs of augmented crops.

    Returns the last-epoch checkpoint (encoder, projector, optimizer state).
    ``TrainResult.export`` holds the encoder of the epoch with the lowest
    validation loss (or the last epoch without a validation split); the
    projector is kept in ``checkpoint`` only and flagged as discardable.
    """
    if cfg.stage != "audio_pretrain":
        raise ConfigError(f"pretrain_audio needs stage 'audio_pretrain', got {cfg.stage!r}")
    train = [r.track_id for r in manifest.split("train")]
    valid = [r.track_id for r in manifest.split("valid")]
    if not train:
        raise DataError("audio pre-training needs a non-empty train split")
    store = store or TrackStore(manifest)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = _MetricLog(out_dir / "metrics.jsonl" if out_dir else None)

    torch.manual_seed(cfg.seed)
    encoder = SampleCNN(cfg.encoder)
    projector = Projector(ProjectorConfig(proj_dim=cfg.proj_dim))
    modules = {"encoder": encoder, "projector": projector}
    opt = _adam([*encoder.parameters(), *projector.parameters()], cfg)
    history, start, best_tensors = _restore(resume, modules, opt, "audio_pretrain")
    meta = {"discardable": ["projector"]}
    seg = cfg.segment_samples
    loss_cfg = LossConfig(cfg.temperature)

    def pair_loss(ids, epoch, stream=TRAIN_STREAM):
        views_a, views_b = [], []
        for tid in ids:
            a, b = make_training_pair(store.audio(tid), seg, cfg.augment, _track_rng(cfg.seed, tid, epoch, stream))
            views_a.append(a)
            views_b.append(b)
        za = projector(encoder(_to_batch(views_a)))
        zb = projector(encoder(_to_batch(views_b)))
        return nt_xent_loss(build_unimodal_batch(za, zb), loss_cfg)

    def valid_loss(enc=encoder):
        return fixed_pair_loss(enc, projector, store, valid, cfg)

    def recalibrate(enc=encoder):
        if cfg.bn_recalibration:
            recalibrate_batchnorm(enc, store, train, cfg)
        return enc

    if resume is None and len(valid) >= 2:
        # measured on a recalibrated copy so that zero epochs leave the initialisation untouched
        meta["initial_valid_loss"] = valid_loss(recalibrate(copy.deepcopy(encoder)))
    elif resume is not None and "initial_valid_loss" in resume.meta:
        meta["initial_valid_loss"] = resume.meta["initial_valid_loss"]
    best = _best_from_history(history)
    for epoch in range(start, cfg.epochs):
        encoder.train()
        projector.train()
        order = _epoch_rng(cfg.seed, epoch).permutation(len(train))
        losses = []
        for idx in _batches(order, cfg.batch_size, drop_last=True):
            loss = pair_loss([train[i] for i in idx], epoch)
            if not torch.isfinite(loss):
                _dump_diagnostic(out_dir, cfg, modules, epoch, "audio_pretrain")
                raise NumericError(f"non-finite contrastive loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        recalibrate()
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        log.write(epoch=epoch + 1, split="train", loss=record["train_loss"])
        if len(valid) >= 2:
            record["valid_loss"] = valid_loss()
            log.write(epoch=epoch + 1, split="valid", loss=record["valid_loss"])
        history.append(record)
        if "valid_loss" in record and (best is None or record["valid_loss"] <= best[1]):
            best = (epoch + 1, record["valid_loss"])
            best_tensors = pack_state("best_encoder", encoder.state_dict())
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", _make_ckpt("audio_pretrain", epoch + 1, cfg, modules, opt, history, best_tensors, meta))

    ckpt = _make_ckpt("audio_pretrain", max(start, cfg.epochs), cfg, modules, opt, history, best_tensors, meta)
    export = _export_backbone(ckpt, "audio_pretrain", best)
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", ckpt)
        save_checkpoint(out_dir / "backbone.ckpt", export)
    return TrainResult(ckpt, history, best[0] if best else None, export)


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------


def _video_crop(w: AudioWaveform, seq, seg: int, rng: np.random.Generator):
    """Random audio crop whose aligned video seconds fit inside ``seq``."""
    need = math.ceil(seg / SAMPLE_RATE - 1e-9)
    last_second = len(seq) - need  # largest admissible floor(start_s)
    if last_second < 0:
        raise OutOfRangeError(f"track {w.track_id!r}: {len(seq)} s of video, {need} s needed")
    limit = min(len(w) - seg, (last_second + 1) * SAMPLE_RATE - 1)
    if limit < 0:
        # audio shorter than one segment: zero-pad, video from second 0
        crop, start = random_crop(w, seg, rng)
        return crop, 0
    start = int(rng.integers(0, limit + 1))
    crop = AudioWaveform(w.samples[start : start + seg].copy(), w.sample_rate_hz, w.track_id)
    return crop, start


def pretrain_multimodal(
    manifest: Manifest,
    audio_ckpt: Checkpoint,
    cfg: RunConfig,
    cache_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    store: TrackStore | None = None,
) -> TrainResult:
    """Contrast audio crops against the aligned video context.

    The encoder is initialised from ``audio_ckpt`` with its first
    ``cfg.freeze_blocks_n`` blocks frozen.  Audio views are plain random crops.
    ``TrainResult.export`` holds only the audio encoder.
    """
    if cfg.stage != "multimodal_pretrain":
        raise ConfigError(f"pretrain_multimodal needs stage 'multimodal_pretrain', got {cfg.stage!r}")
    if "encoder" not in audio_ckpt.prefixes():
        raise MissingArtifactError("audio checkpoint has no encoder; run `pretrain-audio` first")
    store = store or TrackStore(manifest, cache_dir)

    def usable(ids):
        kept, skipped = [], []
        for tid in ids:
            seq = store.video(tid)
            if seq is None or len(seq) < math.ceil(cfg.segment_samples / SAMPLE_RATE - 1e-9):
                skipped.append(tid)
            else:
                kept.append(tid)
        return kept, skipped

    train_all = [r.track_id for r in manifest.split("train")]
    if not train_all:
        raise DataError("multimodal pre-training needs a non-empty train split")
    train, skipped = usable(train_all)
    if skipped:
        logger.warning("skipping %d train track(s) without usable video features: %s", len(skipped), skipped)
    if len(skipped) > 0.5 * len(train_all):
        raise DataError(f"{len(skipped)} of {len(train_all)} train tracks lack video features (>50%)")
    valid, _ = usable([r.track_id for r in manifest.split("valid")])

    out_dir = Path(out_dir) if out_dir is not None else None
    log = _MetricLog(out_dir / "metrics.jsonl" if out_dir else None)
    torch.manual_seed(cfg.seed)
    encoder = SampleCNN(cfg.encoder)
    encoder.load_state_dict(audio_ckpt.state("encoder"))
    freeze_blocks(encoder, cfg.freeze_blocks_n)
    video = VideoEncoder(VideoEncoderConfig(hidden_dim=cfg.video_hidden_dim, readout=cfg.video_readout, input_scale=cfg.video_input_scale))
    audio_proj = Projector(ProjectorConfig(proj_dim=cfg.proj_dim))
    video_proj = Projector(ProjectorConfig(proj_dim=cfg.proj_dim))
    modules = {"encoder": encoder, "video": video, "audio_projector": audio_proj, "video_projector": video_proj}
    trainable = [p for m in modules.values() for p in m.parameters() if p.requires_grad]
    opt = _adam(trainable, cfg)
    history, start, best_tensors = _restore(resume, modules, opt, "multimodal_pretrain")
    meta = {"discardable": ["video", "audio_projector", "video_projector"], "skipped": skipped}
    seg = cfg.segment_samples
    loss_cfg = LossConfig(cfg.temperature)

    def pair_loss(ids, epoch, stream=TRAIN_STREAM):
        crops, contexts = [], []
        for tid in ids:
            seq = store.video(tid)
            crop, start_sample = _video_crop(store.audio(tid), seq, seg, _track_rng(cfg.seed, tid, epoch, stream))
            ctx = align_video_segment(seq, start_sample / SAMPLE_RATE, seg / SAMPLE_RATE)
            crops.append(crop)
            contexts.append(ctx)
        za = audio_proj(encoder(_to_batch(crops)))
        vx = torch.from_numpy(np.stack([c.vectors for c in contexts]))
        zv = video_proj(video(vx))
        batch = build_multimodal_batch(za, zv, [c.track_id for c in crops], [c.track_id for c in contexts])
        return nt_xent_loss(batch, loss_cfg)

    def valid_loss():
        for m in modules.values():
            m.eval()
        with torch.no_grad():
            return float(np.mean([pair_loss([valid[i] for i in idx], 0, VALID_STREAM).item() for idx in _batches(np.arange(len(valid)), cfg.batch_size)]))

    def recalibrate(enc=encoder):
        if cfg.bn_recalibration:
            recalibrate_batchnorm(enc, store, train, cfg)
        return enc

    if resume is None and len(valid) >= 2:
        meta["initial_valid_loss"] = valid_loss()
    elif resume is not None and "initial_valid_loss" in resume.meta:
        meta["initial_valid_loss"] = resume.meta["initial_valid_loss"]
    best = _best_from_history(history)
    for epoch in range(start, cfg.epochs):
        for m in modules.values():
            m.train()
        order = _epoch_rng(cfg.seed, epoch).permutation(len(train))
        losses = []
        for idx in _batches(order, cfg.batch_size, drop_last=True):
            loss = pair_loss([train[i] for i in idx], epoch)
            if not torch.isfinite(loss):
                _dump_diagnostic(out_dir, cfg, modules, epoch, "multimodal_pretrain")
                raise NumericError(f"non-finite contrastive loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        recalibrate()
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        log.write(epoch=epoch + 1, split="train", loss=record["train_loss"])
        if len(valid) >= 2:
            record["valid_loss"] = valid_loss()
            log.write(epoch=epoch + 1, split="valid", loss=record["valid_loss"])
        history.append(record)
        if "valid_loss" in record and (best is None or record["valid_loss"] <= best[1]):
            best = (epoch + 1, record["valid_loss"])
            best_tensors = pack_state("best_encoder", encoder.state_dict())
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", _make_ckpt("multimodal_pretrain", epoch + 1, cfg, modules, opt, history, best_tensors, meta))

    ckpt = _make_ckpt("multimodal_pretrain", max(start, cfg.epochs), cfg, modules, opt, history, best_tensors, meta)
    export = _export_backbone(ckpt, "multimodal_pretrain", best)
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", ckpt)
        save_checkpoint(out_dir / "backbone.ckpt", export)
    return TrainResult(ckpt, history, best[0] if best else None, export)


# --------------------------------------------------------------------------
# stage 3
# --------------------------------------------------------------------------


def _check_vocabulary(records: list[TrackRecord], vocab: list[str]):
    known = set(vocab)
    unknown = sorted({t for r in records for t in (r.tags or ()) if t not in known})
    if unknown:
        raise DataError(f"tags outside the vocabulary: {unknown}")
    untagged = [r.track_id for r in records if r.tags is None]
    if untagged:
        raise DataError(f"records without tag labels: {untagged[:10]}")


@torch.no_grad()
def embed_windows(encoder: SampleCNN, store: TrackStore, ids: list[str], overlap: float, chunk: int = 32) -> dict[str, torch.Tensor]:
    """Frozen-encoder embeddings of every evaluation window of every track."""
    encoder.eval()
    seg = encoder.cfg.input_samples
    out = {}
    for tid in ids:
        segs = torch.from_numpy(window_matrix(store.audio(tid), seg, overlap))
        out[tid] = torch.cat([encoder(segs[i : i + chunk]) for i in range(0, len(segs), chunk)])
    return out


@torch.no_grad()
def _track_scores(head: TagHead, window_emb: dict[str, torch.Tensor], ids: list[str]) -> np.ndarray:
    head.eval()
    return np.stack([head.scores(window_emb[t]).mean(0).double().numpy() for t in ids])


def finetune(
    manifest: Manifest,
    backbone: Checkpoint,
    cfg: RunConfig,
    tag_vocabulary: list[str] | None = None,
    out_dir: str | Path | None = None,
    store: TrackStore | None = None,
    require_multimodal: bool = False,
) -> TrainResult:
    """Train a 2-layer tagging head on top of the frozen encoder.

    Each epoch draws one random evaluation window per training track.  The head
    of the epoch with the best validation PR-AUC is kept.  Because the encoder
    never changes, window embeddings are computed once up front.
    """
    if cfg.stage != "finetune":
        raise ConfigError(f"finetune needs stage 'finetune', got {cfg.stage!r}")
    if "encoder" not in backbone.prefixes():
        raise MissingArtifactError("backbone checkpoint has no encoder; run a pre-training stage first")
    if require_multimodal and backbone.stage != "multimodal_pretrain":
        raise ConfigError(
            f"video-conditioned fine-tuning needs a multimodal backbone, got a {backbone.stage!r} checkpoint "
            "(run `pretrain-multimodal`)"
        )
    train_recs, valid_recs = manifest.split("train"), manifest.split("valid")
    if not train_recs:
        raise DataError("fine-tuning needs a non-empty train split")
    vocab = list(tag_vocabulary) if tag_vocabulary is not None else manifest.tag_vocabulary()
    _check_vocabulary(train_recs + valid_recs, vocab)
    store = store or TrackStore(manifest)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = _MetricLog(out_dir / "metrics.jsonl" if out_dir else None)

    torch.manual_seed(cfg.seed)
    encoder = SampleCNN(cfg.encoder)
    encoder.load_state_dict(backbone.state("encoder"))
    freeze_blocks(encoder, len(encoder.blocks))
    encoder.eval()
    head = TagHead(TagHeadConfig(hidden_dim=cfg.tag_hidden_dim, n_tags=len(vocab)))
    opt = _adam(head.parameters(), cfg)

    train_ids = [r.track_id for r in train_recs]
    valid_ids = [r.track_id for r in valid_recs]
    emb = embed_windows(encoder, store, train_ids + valid_ids, cfg.eval_overlap)
    y_train = torch.from_numpy(LabelMatrix.from_records(train_recs, vocab).labels.astype(np.float32))
    valid_labels = LabelMatrix.from_records(valid_recs, vocab) if valid_recs else None

    def validate():
        if not valid_recs:
            return None
        preds = PredictionMatrix(_track_scores(head, emb, valid_ids), valid_ids, vocab)
        try:
            return evaluate_predictions(preds, valid_labels)
        except Exception as exc:  # all tags single-class in a tiny split
            logger.warning("validation metrics unavailable: %s", exc)
            return None

    history = []
    best_state = copy.deepcopy(head.state_dict())
    best_metrics = validate()
    best_epoch = 0
    best_score = best_metrics["pr_auc"] if best_metrics else -math.inf
    for epoch in range(cfg.epochs):
        head.train()
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(train_ids))
        picks = [int(rng.integers(0, len(emb[t]))) for t in train_ids]
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            x = torch.stack([emb[train_ids[j]][picks[j]] for j in idx])
            loss = F.binary_cross_entropy_with_logits(head(x), y_train[idx])
            _check_finite(loss, "tagging")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        log.write(epoch=epoch + 1, split="train", loss=record["train_loss"])
        metrics = validate()
        if metrics:
            record["valid_roc_auc"] = metrics["roc_auc"]
            record["valid_pr_auc"] = metrics["pr_auc"]
            log.write(epoch=epoch + 1, split="valid", roc_auc=metrics["roc_auc"], pr_auc=metrics["pr_auc"])
        history.append(record)
        score = metrics["pr_auc"] if metrics else epoch  # no validation: keep the last epoch
        if score >= best_score:
            best_score, best_epoch, best_metrics = score, epoch + 1, metrics
            best_state = copy.deepcopy(head.state_dict())

    head.load_state_dict(best_state)
    tensors = {**pack_state("encoder", encoder.state_dict()), **pack_state("head", head.state_dict())}
    meta = {
        "history": history,
        "best_epoch": best_epoch,
        "tag_vocabulary": vocab,
        "backbone_stage": backbone.stage,
        "valid_metrics": _scalar_metrics(best_metrics),
    }
    ckpt = Checkpoint("finetune", cfg.epochs, cfg.to_dict(), tensors, None, meta)
    if out_dir is not None:
        save_checkpoint(out_dir / "finetuned.ckpt", ckpt)
    return TrainResult(ckpt, history, best_epoch, ckpt, best_metrics)


def _scalar_metrics(m: dict | None) -> dict | None:
    if m is None:
        return None
    return {k: m[k] for k in ("roc_auc", "pr_auc", "n_tracks", "skipped_tags")}


def load_tagger(ckpt: Checkpoint) -> tuple[SampleCNN, TagHead, list[str]]:
    if ckpt.stage != "finetune":
        raise MissingArtifactError(f"expected a fine-tuned checkpoint, got stage {ckpt.stage!r} (run `finetune`)")
    cfg = RunConfig.from_dict(ckpt.config)
    vocab = ckpt.meta["tag_vocabulary"]
    encoder = SampleCNN(cfg.encoder)
    encoder.load_state_dict(ckpt.state("encoder"))
    head = TagHead(TagHeadConfig(hidden_dim=cfg.tag_hidden_dim, n_tags=len(vocab)))
    head.load_state_dict(ckpt.state("head"))
    encoder.eval()
    head.eval()
    return encoder, head, vocab


def evaluate(
    manifest: Manifest,
    tagger: Checkpoint,
    split: str = "test",
    store: TrackStore | None = None,
    overlap: float | None = None,
) -> tuple[PredictionMatrix, LabelMatrix, dict]:
    """Overlap-window inference on ``split`` and macro ROC-AUC / PR-AUC."""
    encoder, head, vocab = load_tagger(tagger)
    cfg = RunConfig.from_dict(tagger.config)
    overlap = cfg.eval_overlap if overlap is None else overlap
    store = store or TrackStore(manifest)
    records = sorted(manifest.split(split), key=lambda r: r.track_id)
    if not records:
        raise DataError(f"split {split!r} is empty")
    _check_vocabulary(records, vocab)
    emb = embed_windows(encoder, store, [r.track_id for r in records], overlap)
    ids = [r.track_id for r in records]
    preds = PredictionMatrix(_track_scores(head, emb, ids), ids, vocab)
    labels = LabelMatrix.from_records(records, vocab)
    return preds, labels, evaluate_predictions(preds, labels)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _make_ckpt(stage, epoch, cfg, modules, opt, history, best_tensors, meta) -> Checkpoint:
    tensors = _state_equal_copy(modules)
    if best_tensors:
        tensors.update(best_tensors)
    return Checkpoint(stage, epoch, cfg.to_dict(), tensors, copy.deepcopy(opt.state_dict()), {"history": list(history), **meta})


def _restore(resume: Checkpoint | None, modules: dict[str, nn.Module], opt, stage: str):
    """Load a run's state; returns (history, next epoch index, best-encoder tensors)."""
    if resume is None:
        return [], 0, None
    if resume.stage != stage:
        raise ConfigError(f"cannot resume a {stage} run from a {resume.stage!r} checkpoint")
    for prefix, m in modules.items():
        m.load_state_dict(resume.state(prefix))
    if resume.optimizer is not None:
        opt.load_state_dict(resume.optimizer)
    best = {k: v for k, v in resume.tensors.items() if k.startswith("best_encoder.")} or None
    return list(resume.meta.get("history", [])), resume.epoch, best


def _best_from_history(history: list[dict]):
    scored = [(h["epoch"], h["valid_loss"]) for h in history if "valid_loss" in h]
    if not scored:
        return None
    return min(scored, key=lambda x: (x[1], -x[0]))


def _export_backbone(ckpt: Checkpoint, stage: str, best) -> Checkpoint:
    """Encoder-only checkpoint: best validation epoch if known, else the last."""
    source = "best_encoder" if best is not None and "best_encoder" in ckpt.prefixes() else "encoder"
    tensors = {f"encoder.{k}": v for k, v in ckpt.state(source).items()}
    epoch = best[0] if source == "best_encoder" else ckpt.epoch
    meta = {"exported": True, "history": ckpt.meta.get("history", [])}
    if "initial_valid_loss" in ckpt.meta:
        meta["initial_valid_loss"] = ckpt.meta["initial_valid_loss"]
    return Checkpoint(stage, epoch, ckpt.config, tensors, None, meta)


def _dump_diagnostic(out_dir, cfg, modules, epoch, stage):
    if out_dir is None:
        return
    ckpt = Checkpoint(stage, epoch, cfg.to_dict(), _state_equal_copy(modules), None, {"diagnostic": "non-finite loss"})
    save_checkpoint(Path(out_dir) / "diagnostic.ckpt", ckpt)
