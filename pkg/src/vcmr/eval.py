"""Multi-label tagging metrics, overlap-window inference and tag-group reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import chunk_for_eval
from .errors import DataError, InvalidInputError
from .features import SAMPLE_RATE, AudioWaveform

logger = logging.getLogger(__name__)

TAG_GROUPS = ("Genre", "Mood", "Instruments", "Vocals")


@dataclass
class PredictionMatrix:
    scores: np.ndarray
    track_ids: list[str]
    tag_vocabulary: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.track_ids), len(self.tag_vocabulary)):
            raise InvalidInputError(
                f"score matrix {self.scores.shape} does not match "
                f"{len(self.track_ids)} tracks x {len(self.tag_vocabulary)} tags"
            )
        if not np.isfinite(self.scores).all():
            raise InvalidInputError("prediction scores must be finite")


@dataclass
class LabelMatrix:
    labels: np.ndarray
    track_ids: list[str]
    tag_vocabulary: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.int8)
        if self.labels.shape != (len(self.track_ids), len(self.tag_vocabulary)):
            raise InvalidInputError("label matrix shape does not match its ids/vocabulary")

    @classmethod
    def from_records(cls, records, tag_vocabulary: Sequence[str]) -> "LabelMatrix":
        index = {t: j for j, t in enumerate(tag_vocabulary)}
        labels = np.zeros((len(records), len(tag_vocabulary)), np.int8)
        for i, r in enumerate(records):
            for t in r.tags or ():
                labels[i, index[t]] = 1
        return cls(labels, [r.track_id for r in records], list(tag_vocabulary))


def _check_pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise InvalidInputError(f"{s.size} scores vs {y.size} labels")
    return s, y


def roc_auc(scores, labels) -> float | None:
    """Probability that a random positive outscores a random negative (ties 1/2).

    Returns ``None`` when only one class is present.
    """
    s, y = _check_pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks; half-integers are exact in float64
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float | None:
    """Average precision.

    Items are ranked by descending score.  All items sharing a score form one
    block; every positive in a block is credited with the precision measured at
    the end of that block, so the result does not depend on tie order.
    Returns ``None`` without positives.
    """
    s, y = _check_pair(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    uniq, inverse = np.unique(-s, return_inverse=True)
    block_n = np.bincount(inverse, minlength=uniq.size)
    block_pos = np.bincount(inverse, weights=y.astype(np.float64), minlength=uniq.size)
    precision = np.cumsum(block_pos) / np.cumsum(block_n)
    return float(np.sum(block_pos * precision) / n_pos)


METRICS: dict[str, Callable] = {"roc_auc": roc_auc, "pr_auc": pr_auc}


@dataclass
class MacroResult:
    value: float
    per_tag: dict[str, float]
    skipped: list[str] = field(default_factory=list)


def macro_average(metric, predictions: PredictionMatrix, labels: LabelMatrix) -> MacroResult:
    """Unweighted mean of a per-tag metric, skipping single-class tags."""
    fn = METRICS[metric] if isinstance(metric, str) else metric
    if predictions.tag_vocabulary != labels.tag_vocabulary or predictions.track_ids != labels.track_ids:
        raise InvalidInputError("predictions and labels are not aligned")
    per_tag, skipped = {}, []
    for j, tag in enumerate(predictions.tag_vocabulary):
        v = fn(predictions.scores[:, j], labels.labels[:, j])
        if v is None:
            skipped.append(tag)
        else:
            per_tag[tag] = v
    if not per_tag:
        raise InvalidInputError("every tag was skipped (single-class labels)")
    if skipped:
        logger.info("excluded %d single-class tag(s) from the macro average: %s", len(skipped), skipped)
    return MacroResult(float(np.mean(list(per_tag.values()))), per_tag, skipped)


def evaluate_predictions(predictions: PredictionMatrix, labels: LabelMatrix) -> dict:
    roc = macro_average("roc_auc", predictions, labels)
    pr = macro_average("pr_auc", predictions, labels)
    return {
        "roc_auc": roc.value,
        "pr_auc": pr.value,
        "per_tag_roc_auc": roc.per_tag,
        "per_tag_pr_auc": pr.per_tag,
        "skipped_tags": sorted(set(roc.skipped) | set(pr.skipped)),
        "n_tracks": len(predictions.track_ids),
    }


def window_matrix(w: AudioWaveform, segment_samples: int, overlap: float = 0.5) -> np.ndarray:
    """Stack of overlapping segments of ``w`` (zero-padded if shorter than one)."""
    x = w.samples
    if x.size < segment_samples:
        return np.pad(x, (0, segment_samples - x.size))[None, :]
    windows = chunk_for_eval(x.size / SAMPLE_RATE, segment_samples / SAMPLE_RATE, overlap)
    starts = [min(int(round(win.start * SAMPLE_RATE)), x.size - segment_samples) for win in windows]
    return np.stack([x[a : a + segment_samples] for a in starts])


def overlap_inference(
    w: AudioWaveform,
    predict: Callable[[np.ndarray], np.ndarray],
    segment_samples: int,
    overlap: float = 0.5,
) -> np.ndarray:
    """Average per-window predictions of ``predict`` over overlapping windows.

    ``predict`` maps a ``(n_windows, segment_samples)`` array to
    ``(n_windows, n_tags)`` scores.
    """
    segs = window_matrix(w, segment_samples, overlap)
    scores = np.asarray(predict(segs), dtype=np.float64)
    return scores.mean(axis=0)


def load_tag_groups(path: str | Path | None = None) -> dict[str, str]:
    """Read a ``tag<TAB>group`` table; defaults to the shipped MTAT mapping."""
    if path is None:
        text = resources.files("vcmr.data").joinpath("mtat_tag_groups.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    mapping = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        tag, group = line.rstrip("\n").split("\t")
        if group not in TAG_GROUPS:
            raise DataError(f"unknown tag group {group!r} for tag {tag!r}")
        mapping[tag] = group
    return mapping


@dataclass
class GroupReport:
    means: dict[str, float]
    counts: dict[str, int]


def tag_group_report(per_tag: Mapping[str, float], group_map: Mapping[str, str]) -> GroupReport:
    unmapped = sorted(t for t in per_tag if t not in group_map)
    if unmapped:
        raise DataError(f"tags without a group: {unmapped}")
    buckets: dict[str, list[float]] = {}
    for tag, value in per_tag.items():
        buckets.setdefault(group_map[tag], []).append(value)
    order = [g for g in TAG_GROUPS if g in buckets] + sorted(set(buckets) - set(TAG_GROUPS))
    return GroupReport(
        {g: float(np.mean(buckets[g])) for g in order},
        {g: len(buckets[g]) for g in order},
    )


def write_group_csv(path: str | Path, report: GroupReport, metric: str = "roc_auc") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", f"mean_{metric}", "n_tags"])
        for g, m in report.means.items():
            w.writerow([g, repr(m), report.counts[g]])


def read_group_csv(path: str | Path) -> GroupReport:
    means, counts = {}, {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for g, m, n in reader:
            means[g] = float(m)
            counts[g] = int(n)
    return GroupReport(means, counts)


def write_per_tag_csv(path: str | Path, metrics: dict) -> None:
    tags = sorted(set(metrics["per_tag_roc_auc"]) | set(metrics["per_tag_pr_auc"]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "roc_auc", "pr_auc"])
        for t in tags:
            w.writerow([t, repr(metrics["per_tag_roc_auc"].get(t, float("nan"))), repr(metrics["per_tag_pr_auc"].get(t, float("nan")))])


def write_summary(path: str | Path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True))
