"""In-batch contrastive objective (NT-Xent) and pair-batch construction.

For ``N`` positive pairs the ``2N`` embeddings are stacked as
``z = [left; right]`` so that ``z[i]`` and ``z[i + N]`` are positives.  For
each anchor ``i``::

    l_i = -log( exp(s(i, p(i)) / t) / sum_{k != i} exp(s(i, k) / t) )

with ``s`` the cosine similarity and ``t`` the temperature.  The returned loss
is the mean of ``l_i`` over all ``2N`` anchors, i.e. both directions of every
pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .errors import AlignmentError, InvalidInputError, NumericError

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class LossConfig:
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidInputError(f"temperature must be positive, got {self.temperature}")


@dataclass
class PairBatch:
    """``left[i]`` and ``right[i]`` form the i-th positive pair."""

    left: torch.Tensor
    right: torch.Tensor
    track_ids: Sequence[str] | None = None

    def __post_init__(self):
        if self.left.dim() != 2 or self.right.dim() != 2:
            raise InvalidInputError("pair batch sides must be (N, d) matrices")
        if self.left.shape != self.right.shape:
            raise InvalidInputError(f"pair batch sides differ: {tuple(self.left.shape)} vs {tuple(self.right.shape)}")
        if self.left.shape[0] < 1:
            raise InvalidInputError("pair batch is empty")

    @property
    def n(self) -> int:
        return self.left.shape[0]

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.left, self.right], dim=0)


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def cosine_similarity_matrix(a, b, eps: float = NORM_FLOOR) -> torch.Tensor:
    """Pairwise cosine similarity between the rows of ``a`` (m, d) and ``b`` (n, d).

    Rows with zero norm are divided by ``eps`` instead (their similarities are 0).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    if bool((na < eps).any()) or bool((nb < eps).any()):
        logger.debug("cosine similarity: zero-norm rows clamped to %g", eps)
    return (a / na.clamp_min(eps)) @ (b / nb.clamp_min(eps)).T


def nt_xent(left: torch.Tensor, right: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """NT-Xent loss of ``N`` positive pairs given as two ``(N, d)`` tensors."""
    if left.shape[0] == 0:
        raise InvalidInputError("NT-Xent needs at least one pair")
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    z = torch.cat([left, right], dim=0)
    if not bool(torch.isfinite(z).all()):
        raise NumericError("non-finite embeddings passed to NT-Xent")
    n = left.shape[0]
    logits = cosine_similarity_matrix(z, z) / temperature
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    pos = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    # logsumexp subtracts the row max internally
    per_anchor = torch.logsumexp(logits, dim=1) - logits[torch.arange(2 * n, device=z.device), pos]
    return per_anchor.mean()


def nt_xent_loss(batch: PairBatch, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return nt_xent(batch.left, batch.right, cfg.temperature)


class NTXentLoss(nn.Module):
    def __init__(self, temperature: float = DEFAULT_TEMPERATURE):
        super().__init__()
        self.cfg = LossConfig(temperature)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        return nt_xent(left, right, self.cfg.temperature)


def build_unimodal_batch(view_a: torch.Tensor, view_b: torch.Tensor) -> PairBatch:
    """Two augmented views per input; pairs are matched by input index."""
    if len(view_a) != len(view_b):
        raise InvalidInputError(f"got {len(view_a)} first views but {len(view_b)} second views")
    return PairBatch(_as_tensor(view_a), _as_tensor(view_b))


def build_multimodal_batch(
    audio: torch.Tensor,
    video: torch.Tensor,
    audio_ids: Sequence[str] | None = None,
    video_ids: Sequence[str] | None = None,
) -> PairBatch:
    """Audio/video embeddings of the same track and window are the positives.

    When both id lists are given, any index misalignment raises
    :class:`AlignmentError`.
    """
    if len(audio) != len(video):
        raise InvalidInputError(f"got {len(audio)} audio but {len(video)} video embeddings")
    if audio_ids is not None and video_ids is not None:
        bad = [i for i, (a, v) in enumerate(zip(audio_ids, video_ids)) if a != v]
        if len(audio_ids) != len(video_ids) or bad:
            raise AlignmentError(f"audio/video track ids disagree at positions {bad}")
    return PairBatch(_as_tensor(audio), _as_tensor(video), list(audio_ids) if audio_ids is not None else None)
