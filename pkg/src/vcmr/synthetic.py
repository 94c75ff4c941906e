"""Synthetic audio/video corpora for smoke runs, tests and the demos.

Two flavours:

``separable``
    Each track is one of four oscillator/noise classes (sine, square, saw,
    band noise) at a random pitch.  Tag = class name.  Video context vectors
    carry the class as well.

``conditioning``
    Each track is dominated by a loud random "nuisance" oscillator; the class
    is only present as a quiet fixed-frequency tone (``tone_db`` below the
    nuisance).  Video vectors carry the class strongly.  Audio-only training
    with pitch augmentation has little reason to keep the quiet tone, while
    audio-video training does.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .corpus import Manifest, TrackRecord, detect_scenes, save_scene_list
from .features import (
    EMBED_DIM,
    SAMPLE_RATE,
    SecondEmbeddingSeq,
    feature_cache_path,
    save_second_embeddings,
    write_wav,
)

CLASSES = ("sine", "square", "saw", "noise")
TONE_HZ = (310.0, 520.0, 830.0, 1370.0)


@dataclass
class SyntheticCorpus:
    manifest: Manifest
    manifest_path: Path
    cache_dir: Path
    frames_dir: Path | None
    scenes_dir: Path | None
    classes: tuple[str, ...]


def oscillator(kind: str, f0: float, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    phase = 2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi)
    if kind == "sine":
        return np.sin(phase)
    if kind == "square":
        return np.sign(np.sin(phase))
    if kind == "saw":
        return signal.sawtooth(phase)
    if kind == "noise":
        lo, hi = sorted((f0, min(4 * f0, 7000.0)))
        sos = signal.butter(4, (lo, hi), btype="bandpass", fs=SAMPLE_RATE, output="sos")
        x = signal.sosfilt(sos, rng.standard_normal(n))
        return x / (np.abs(x).max() + 1e-9)
    raise ValueError(f"unknown oscillator {kind!r}")


def _split_plan(n_tracks: int, n_classes: int, valid_frac: float, test_frac: float):
    """Class-balanced split assignment: list of (class, split)."""
    plan = []
    per_class = [n_tracks // n_classes + (c < n_tracks % n_classes) for c in range(n_classes)]
    for c, m in enumerate(per_class):
        n_valid = int(round(valid_frac * m))
        n_test = int(round(test_frac * m))
        for i in range(m):
            split = "valid" if i < n_valid else "test" if i < n_valid + n_test else "train"
            plan.append((c, split))
    return plan


def _video_vectors(cls: int, n_sec: int, protos: np.ndarray, rng, strength: float, noise: float) -> np.ndarray:
    track = rng.standard_normal(EMBED_DIM)
    v = strength * protos[cls] + 0.5 * track + noise * rng.standard_normal((n_sec, EMBED_DIM))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)


def _frames(cls: int, duration_s: float, rng, fps: float = 5.0, size: int = 16, scene_s=(2.0, 5.0)):
    """Uint8 frame stack with class-specific texture and scene cuts."""
    n = int(round(duration_s * fps))
    pattern = np.random.default_rng(1000 + cls).uniform(0, 1, (size, size))
    frames = np.empty((n, size, size), np.uint8)
    t, level = 0, rng.uniform(60, 100)
    while t < n:
        length = int(round(rng.uniform(*scene_s) * fps))
        level = level + 60 if level < 130 else level - 60  # |jump| = 60 marks a cut
        chunk = level + 60 * pattern + rng.normal(0, 1.0, (min(length, n - t), size, size))
        frames[t : t + length] = np.clip(chunk, 0, 255).astype(np.uint8)
        t += length
    return frames


def make_synthetic_corpus(
    root: str | Path,
    n_tracks: int = 64,
    duration_s: float = 8.0,
    mode: str = "separable",
    seed: int = 0,
    valid_frac: float = 0.1875,
    test_frac: float = 0.1875,
    video_strength: float = 3.0,
    video_noise: float = 0.3,
    tone_db: float = -10.0,
    write_frames: bool = False,
) -> SyntheticCorpus:
    """Write WAVs, per-second video caches and a manifest under ``root``."""
    if mode not in ("separable", "conditioning"):
        raise ValueError(f"unknown synthetic mode {mode!r}")
    root = Path(root)
    audio_dir, cache_dir = root / "audio", root / "features"
    frames_dir = root / "frames" if write_frames else None
    scenes_dir = root / "scenes" if write_frames else None
    rng = np.random.default_rng(seed)
    protos = np.random.default_rng(seed + 7919).standard_normal((len(CLASSES), EMBED_DIM))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True) / np.sqrt(EMBED_DIM) * 4
    n = int(round(duration_s * SAMPLE_RATE))
    n_sec = int(np.floor(duration_s))
    tags = CLASSES if mode == "separable" else tuple(f"class_{i}" for i in range(len(CLASSES)))

    records = []
    for i, (cls, split) in enumerate(_split_plan(n_tracks, len(CLASSES), valid_frac, test_frac)):
        tid = f"syn{i:04d}"
        if mode == "separable":
            f0 = float(np.exp(rng.uniform(np.log(110), np.log(660))))
            x = 0.5 * oscillator(CLASSES[cls], f0, n, rng) + 0.01 * rng.standard_normal(n)
        else:
            kind = CLASSES[rng.integers(len(CLASSES))]
            f0 = float(np.exp(rng.uniform(np.log(110), np.log(660))))
            nuisance = 0.5 * oscillator(kind, f0, n, rng)
            tone = 0.5 * 10 ** (tone_db / 20) * oscillator("sine", TONE_HZ[cls], n, rng)
            x = nuisance + tone + 0.01 * rng.standard_normal(n)
        wav = audio_dir / f"{tid}.wav"
        write_wav(wav, x / max(1.0, np.abs(x).max()))
        vec = _video_vectors(cls, n_sec, protos, rng, video_strength, video_noise)
        save_second_embeddings(feature_cache_path(cache_dir, tid), SecondEmbeddingSeq(vec, tid))
        video_path = None
        if write_frames:
            frames = _frames(cls, duration_s, rng)
            video_path = frames_dir / f"{tid}.npz"
            video_path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(video_path, frames=frames, fps=5.0)
            save_scene_list(scenes_dir, tid, detect_scenes(frames.reshape(len(frames), -1).mean(1), 5.0, 30.0))
        records.append(
            TrackRecord(
                tid,
                str(wav),
                str(video_path) if video_path is not None else str(feature_cache_path(cache_dir, tid)),
                duration_s,
                split,
                frozenset({tags[cls]}),
            )
        )
    manifest = Manifest(records)
    manifest_path = root / "manifest.jsonl"
    manifest.save(manifest_path)
    return SyntheticCorpus(manifest, manifest_path, cache_dir, frames_dir, scenes_dir, tags)
