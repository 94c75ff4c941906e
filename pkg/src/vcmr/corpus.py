"""Track manifests, scene-based curation, scarcity subsets and eval windowing.

Manifest file format (UTF-8, one JSON object per line)::

    {"format": "vcmr-manifest", "schema_version": 1}
    {"track_id": "a", "audio_path": "a.wav", "video_path": null, "duration_s": 30.0,
     "split": "train", "tags": ["rock", "guitar"]}
    ...

The first line is a header; every following line is a record.  Scene lists
are stored as sidecar files ``<scenes_dir>/<track_id>.scenes.json`` holding
``{"track_id": ..., "boundaries_s": [...]}``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError, InvalidInputError, SchemaVersionError

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
SPLITS = ("train", "valid", "test")
DEFAULT_CUT_THRESHOLD = 30.0
DEFAULT_MAX_SCENE_S = 30.0


@dataclass(frozen=True)
class TrackRecord:
    track_id: str
    audio_path: str
    video_path: str | None = None
    duration_s: float = 0.0
    split: str = "train"
    tags: frozenset[str] | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidInputError(f"track {self.track_id!r}: unknown split {self.split!r}")
        if self.duration_s < 0:
            raise InvalidInputError(f"track {self.track_id!r}: negative duration")
        if self.tags is not None and not isinstance(self.tags, frozenset):
            object.__setattr__(self, "tags", frozenset(self.tags))

    @property
    def has_video(self) -> bool:
        return self.video_path is not None

    def to_json(self) -> dict:
        d = asdict(self)
        d["tags"] = None if self.tags is None else sorted(self.tags)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "TrackRecord":
        tags = d.get("tags")
        return cls(
            track_id=str(d["track_id"]),
            audio_path=str(d["audio_path"]),
            video_path=d.get("video_path"),
            duration_s=float(d.get("duration_s", 0.0)),
            split=d.get("split", "train"),
            tags=None if tags is None else frozenset(tags),
        )


@dataclass(frozen=True)
class Manifest:
    records: tuple[TrackRecord, ...] = ()
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.track_id in seen:
                raise InvalidInputError(f"duplicate track_id {r.track_id!r} in manifest")
            seen.add(r.track_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list[TrackRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict[str, TrackRecord]:
        return {r.track_id: r for r in self.records}

    def track_ids(self) -> list[str]:
        return [r.track_id for r in self.records]

    def tag_vocabulary(self) -> list[str]:
        """Sorted union of all tags in the manifest."""
        vocab = set()
        for r in self.records:
            if r.tags:
                vocab |= r.tags
        return sorted(vocab)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            header = {"format": "vcmr-manifest", "schema_version": self.schema_version}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        lines = [ln for ln in lines if ln.strip()]
        if not lines:
            raise DataError(f"manifest {path} is empty (missing header)")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: unreadable manifest header") from exc
        if not isinstance(header, dict) or header.get("format") != "vcmr-manifest":
            raise DataError(f"{path}: not a vcmr manifest")
        version = header.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"{path}: manifest schema_version {version}, expected {MANIFEST_SCHEMA_VERSION}"
            )
        records = []
        for lineno, ln in enumerate(lines[1:], start=2):
            try:
                records.append(TrackRecord.from_json(json.loads(ln)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}: bad record on line {lineno}: {exc}") from exc
        return cls(records, schema_version=version)


@dataclass(frozen=True)
class SceneList:
    """Scene boundaries in seconds: ``[0, cut_1, ..., duration]``."""

    boundaries_s: tuple[float, ...]

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries_s)
        object.__setattr__(self, "boundaries_s", b)
        if len(b) < 2 or b[0] != 0.0:
            raise InvalidInputError("scene boundaries must start at 0 and contain an end time")
        if any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
            raise InvalidInputError("scene boundaries must be strictly increasing")

    @property
    def duration_s(self) -> float:
        return self.boundaries_s[-1]

    @property
    def lengths_s(self) -> np.ndarray:
        return np.diff(self.boundaries_s)

    @property
    def longest_s(self) -> float:
        return float(self.lengths_s.max())

    @classmethod
    def from_lengths(cls, lengths: Iterable[float]) -> "SceneList":
        return cls((0.0, *np.cumsum(list(lengths)).tolist()))


def detect_scenes(frame_intensity, fps: float, cut_threshold: float = DEFAULT_CUT_THRESHOLD) -> SceneList:
    """Split a video into scenes from its per-frame mean intensity.

    A cut is placed at frame ``i`` whenever ``|x[i] - x[i-1]| > cut_threshold``.

    Args:
        frame_intensity: mean pixel intensity of every frame, in display order.
        fps: frame rate of the series.
        cut_threshold: minimum absolute jump that counts as a cut.

    Returns:
        SceneList spanning ``[0, n_frames / fps]``.
    """
    x = np.asarray(frame_intensity, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidInputError("detect_scenes: empty intensity series")
    if not fps > 0:
        raise InvalidInputError(f"detect_scenes: fps must be positive, got {fps}")
    if not cut_threshold > 0:
        raise InvalidInputError(f"detect_scenes: cut_threshold must be positive, got {cut_threshold}")
    cut_frames = np.flatnonzero(np.abs(np.diff(x)) > cut_threshold) + 1
    return SceneList((0.0, *(cut_frames / fps).tolist(), x.size / fps))


class CurationResult(NamedTuple):
    manifest: Manifest
    skipped: list[str]


def filter_by_scene_length(
    manifest: Manifest,
    scenes: Mapping[str, SceneList],
    max_scene_s: float = DEFAULT_MAX_SCENE_S,
) -> CurationResult:
    """Keep only video records whose longest scene is at most ``max_scene_s``.

    Records without a video are dropped.  Video records lacking a scene list
    are excluded and reported in ``skipped``.
    """
    kept, skipped = [], []
    for r in manifest.records:
        if not r.has_video:
            continue
        sl = scenes.get(r.track_id)
        if sl is None:
            skipped.append(r.track_id)
            continue
        # strict: a scene of exactly max_scene_s is allowed
        if sl.longest_s <= max_scene_s:
            kept.append(r)
    if skipped:
        logger.warning("no scene list for %d record(s): %s", len(skipped), ", ".join(skipped))
    return CurationResult(Manifest(kept, manifest.schema_version), skipped)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def subsample_training(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    """Uniform, seed-controlled subset of the train split; other splits untouched."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction}")
    train_idx = [i for i, r in enumerate(manifest.records) if r.split == "train"]
    n_keep = _round_half_up(fraction * len(train_idx))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(train_idx, size=n_keep, replace=False).tolist()) if n_keep else set()
    records = [
        r for i, r in enumerate(manifest.records) if r.split != "train" or i in chosen
    ]
    return Manifest(records, manifest.schema_version)


class Window(NamedTuple):
    start: float
    end: float
    padded: bool = False


def chunk_for_eval(duration_s: float, segment_s: float, overlap: float = 0.5) -> list[Window]:
    """Overlapping evaluation windows covering ``[0, duration_s]``.

    Windows advance by ``segment_s * (1 - overlap)``.  If the last aligned window
    stops short of the end, one more window ending exactly at ``duration_s`` is
    added.  Tracks shorter than one segment yield a single padded window.
    """
    if not segment_s > 0:
        raise InvalidInputError("segment_s must be positive")
    if not 0.0 <= overlap < 1.0:
        raise InvalidInputError(f"overlap must lie in [0, 1), got {overlap}")
    if duration_s <= 0:
        raise InvalidInputError("duration_s must be positive")
    eps = 1e-9 * max(1.0, duration_s)
    if duration_s < segment_s - eps:
        return [Window(0.0, float(duration_s), True)]
    hop = segment_s * (1.0 - overlap)
    windows = []
    i = 0
    while True:
        start = i * hop
        if start + segment_s > duration_s + eps:
            break
        windows.append(Window(start, start + segment_s))
        i += 1
    if windows[-1].end < duration_s - eps:
        windows.append(Window(duration_s - segment_s, float(duration_s)))
    return windows


def save_scene_list(scenes_dir: str | Path, track_id: str, scenes: SceneList) -> Path:
    path = Path(scenes_dir) / f"{track_id}.scenes.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"track_id": track_id, "boundaries_s": list(scenes.boundaries_s)}))
    return path


def load_scene_lists(scenes_dir: str | Path, track_ids: Sequence[str]) -> dict[str, SceneList]:
    """Read whichever sidecar scene files exist for ``track_ids``."""
    out = {}
    for tid in track_ids:
        path = Path(scenes_dir) / f"{tid}.scenes.json"
        if path.exists():
            out[tid] = SceneList(tuple(json.loads(path.read_text())["boundaries_s"]))
    return out


def with_split(record: TrackRecord, split: str) -> TrackRecord:
    return replace(record, split=split)
