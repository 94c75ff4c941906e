"""Audio decoding and per-second video context features.

Video context is produced in two steps: a frame embedder maps every frame
(sampled at 5 fps) to a 512-D vector, then consecutive groups of frames are
averaged into one vector per second.

Feature cache layout (little endian)::

    magic        8 bytes   b"VCMRSEQ\\0"
    version      uint32
    dim          uint32
    n_seconds    uint32
    id_len       uint32
    track_id     id_len bytes, UTF-8
    vectors      n_seconds * dim float32
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Protocol, runtime_checkable

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import ConfigError, DataError, DecodeError, InvalidInputError, OutOfRangeError, SchemaVersionError

SAMPLE_RATE = 16000
EMBED_DIM = 512
DEFAULT_FPS = 5.0

CACHE_MAGIC = b"VCMRSEQ\x00"
CACHE_SCHEMA_VERSION = 1
_CACHE_HEADER = struct.Struct("<8sIIII")


@dataclass(frozen=True)
class AudioWaveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    track_id: str = ""

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 1:
            raise InvalidInputError("AudioWaveform must be mono (1-D samples)")
        if s.size == 0:
            raise InvalidInputError(f"empty waveform for track {self.track_id!r}")
        if self.sample_rate_hz != SAMPLE_RATE:
            raise InvalidInputError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FrameEmbeddingSeq:
    vectors: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.size == 0:
            v = np.zeros((0, EMBED_DIM), np.float32)
        if v.ndim != 2 or v.shape[1] != EMBED_DIM:
            raise InvalidInputError(f"frame embeddings must be (n, {EMBED_DIM}), got {v.shape}")
        if not self.fps > 0:
            raise InvalidInputError("fps must be positive")
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]


@dataclass(frozen=True)
class SecondEmbeddingSeq:
    vectors: np.ndarray
    track_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.size == 0:
            v = np.zeros((0, EMBED_DIM), np.float32)
        if v.ndim != 2 or v.shape[1] != EMBED_DIM:
            raise InvalidInputError(f"second embeddings must be (n, {EMBED_DIM}), got {v.shape}")
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]


def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float32) / float(-np.iinfo(data.dtype).min)
    return data.astype(np.float32)


def resample(samples: np.ndarray, orig_hz: int, target_hz: int = SAMPLE_RATE) -> np.ndarray:
    """Band-limited polyphase resampling (scipy ``resample_poly``, Kaiser beta 5)."""
    if orig_hz == target_hz:
        return np.asarray(samples, dtype=np.float32)
    ratio = Fraction(target_hz, orig_hz)
    out = signal.resample_poly(samples, ratio.numerator, ratio.denominator, window=("kaiser", 5.0))
    return out.astype(np.float32)


def decode_audio(path: str | Path, track_id: str | None = None) -> AudioWaveform:
    """Read a WAV file as a mono 16 kHz waveform in [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError, EOFError) as exc:
        raise DecodeError(path, exc) from exc
    x = _pcm_to_float(np.asarray(data))
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise DecodeError(path, "no samples")
    x = np.clip(resample(x, int(rate)), -1.0, 1.0)
    return AudioWaveform(x, SAMPLE_RATE, track_id if track_id is not None else path.stem)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate_hz: int = SAMPLE_RATE) -> None:
    """Write float samples as 16-bit PCM."""
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, sample_rate_hz, pcm)


@runtime_checkable
class FrameEmbedder(Protocol):
    """Maps a stack of frames ``(n, H, W[, C])`` to ``(n, dim)`` vectors."""

    dim: int
    thread_safe: bool

    def embed(self, frames: np.ndarray) -> np.ndarray: ...


class RandomProjectionEmbedder:
    """Deterministic stand-in for a pre-trained image encoder.

    Each frame is reduced to an 8x8 grayscale thumbnail and mapped through a
    seeded Gaussian projection, then L2-normalised.
    """

    thread_safe = True

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM, thumb: int = 8):
        self.dim = dim
        self.thumb = thumb
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((thumb * thumb, dim)).astype(np.float32) / thumb

    def _thumbnail(self, frames: np.ndarray) -> np.ndarray:
        f = np.asarray(frames, dtype=np.float32)
        if f.ndim == 4:
            f = f.mean(axis=-1)
        n, h, w = f.shape
        rows = np.linspace(0, h - 1, self.thumb).round().astype(int)
        cols = np.linspace(0, w - 1, self.thumb).round().astype(int)
        t = f[:, rows][:, :, cols].reshape(n, -1)
        return (t - t.mean(axis=1, keepdims=True)) / 255.0

    def embed(self, frames: np.ndarray) -> np.ndarray:
        if len(frames) == 0:
            return np.zeros((0, self.dim), np.float32)
        z = self._thumbnail(frames) @ self._proj
        z += 1e-3 * self._proj[0]  # keeps flat frames off the origin
        return z / np.linalg.norm(z, axis=1, keepdims=True)


class ExternalEmbedder:
    """Adapter slot for an external pre-trained image(-text) encoder.

    ``fn`` receives a frame stack and must return an ``(n, dim)`` array.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim: int = EMBED_DIM, thread_safe: bool = False):
        self.fn = fn
        self.dim = dim
        self.thread_safe = thread_safe

    def embed(self, frames: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(frames), dtype=np.float32)


def embed_frames(frames, embedder: FrameEmbedder, fps: float = DEFAULT_FPS) -> FrameEmbeddingSeq:
    if embedder.dim != EMBED_DIM:
        raise ConfigError(f"frame embedder must output {EMBED_DIM}-D vectors, declares {embedder.dim}")
    if len(frames) == 0:
        return FrameEmbeddingSeq(np.zeros((0, EMBED_DIM), np.float32), fps)
    vectors = embedder.embed(frames)
    if vectors.shape != (len(frames), EMBED_DIM):
        raise ConfigError(f"embedder returned shape {vectors.shape} for {len(frames)} frames")
    return FrameEmbeddingSeq(vectors, fps)


def average_per_second(seq: FrameEmbeddingSeq, track_id: str = "") -> SecondEmbeddingSeq:
    """Mean of every consecutive group of ``round(fps)`` frame vectors.

    A trailing partial group is dropped, so the output has
    ``floor(n_frames / round(fps))`` rows.
    """
    group = int(round(seq.fps))
    if group < 1:
        raise InvalidInputError(f"fps {seq.fps} rounds to zero frames per second")
    n_sec = len(seq) // group
    v = seq.vectors[: n_sec * group].reshape(n_sec, group, EMBED_DIM).mean(axis=1)
    return SecondEmbeddingSeq(v, track_id)


def align_video_segment(seq: SecondEmbeddingSeq, start_s: float, length_s: float) -> SecondEmbeddingSeq:
    """Second vectors covering an audio window.

    Returns rows ``floor(start_s) .. floor(start_s) + ceil(length_s) - 1``.
    """
    if start_s < 0 or length_s <= 0:
        raise InvalidInputError(f"invalid window start={start_s}, length={length_s}")
    first = int(math.floor(start_s))
    count = int(math.ceil(length_s - 1e-9))
    if first + count > len(seq):
        raise OutOfRangeError(
            f"track {seq.track_id!r}: seconds {first}..{first + count - 1} requested, "
            f"only {len(seq)} available"
        )
    return SecondEmbeddingSeq(seq.vectors[first : first + count], seq.track_id)


def sample_frames(frames: np.ndarray, src_fps: float, target_fps: float = DEFAULT_FPS) -> np.ndarray:
    """Pick the frame nearest to each ``k / target_fps`` instant."""
    n = len(frames)
    if n == 0 or src_fps == target_fps:
        return frames
    duration = n / src_fps
    times = np.arange(int(math.floor(duration * target_fps + 1e-9))) / target_fps
    idx = np.minimum(np.floor(times * src_fps + 1e-9).astype(int), n - 1)
    return frames[idx]


def load_frames(path: str | Path) -> tuple[np.ndarray, float]:
    """External frame source: ``.npz`` with ``frames`` and ``fps``, else OpenCV."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return z["frames"], float(z["fps"])
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DataError(f"no frame source for {path}: OpenCV unavailable") from exc
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DataError(f"cannot open video {path}")
    fps = cap.get(cv2.CAP_PROP_FPS) or DEFAULT_FPS
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(frame[..., ::-1])
    cap.release()
    return np.stack(frames) if frames else np.zeros((0, 1, 1, 3), np.uint8), float(fps)


def save_second_embeddings(path: str | Path, seq: SecondEmbeddingSeq) -> None:
    tid = seq.track_id.encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_SCHEMA_VERSION, EMBED_DIM, len(seq), len(tid)))
        fh.write(tid)
        fh.write(seq.vectors.astype("<f4").tobytes())


def load_second_embeddings(path: str | Path) -> SecondEmbeddingSeq:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise DataError(f"{path}: truncated feature cache")
    magic, version, dim, n_sec, id_len = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise DataError(f"{path}: not a feature cache file")
    if version != CACHE_SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: feature cache version {version}, expected {CACHE_SCHEMA_VERSION}")
    off = _CACHE_HEADER.size
    tid = raw[off : off + id_len].decode("utf-8")
    off += id_len
    expected = n_sec * dim * 4
    if len(raw) - off != expected or dim != EMBED_DIM:
        raise DataError(f"{path}: payload size does not match header")
    v = np.frombuffer(raw, dtype="<f4", count=n_sec * dim, offset=off).reshape(n_sec, dim)
    return SecondEmbeddingSeq(v.astype(np.float32), tid)


def feature_cache_path(cache_dir: str | Path, track_id: str) -> Path:
    return Path(cache_dir) / f"{track_id}.vseq"
