"""SampleCNN audio encoder, LSTM video-context encoder and small heads.

The encoder input length follows from its layout: a non-overlapping stem
convolution of width ``k`` followed by ``n_blocks`` blocks that each pool by
``pool_size`` collapse exactly ``k * pool_size ** n_blocks`` samples into one
frame of ``out_dim`` channels.
"""

from __future__ import annotations

import math

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import ConfigError, InvalidInputError, ShapeError
from .features import EMBED_DIM, SAMPLE_RATE

DEFAULT_CHANNELS = (128, 128, 128, 256, 256, 256, 512, 512, 512)


@dataclass(frozen=True)
class SampleCNNConfig:
    first_kernel: int = 5
    n_blocks: int = 9
    pool_size: int = 3
    block_kernel: int = 3
    stem_channels: int = 128
    channel_schedule: tuple[int, ...] = DEFAULT_CHANNELS
    out_dim: int = EMBED_DIM
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))
        if self.first_kernel < 1 or self.pool_size < 2 or self.n_blocks < 1:
            raise ConfigError(f"invalid SampleCNN layout: {self}")
        if len(self.channel_schedule) != self.n_blocks:
            raise ConfigError(
                f"channel_schedule has {len(self.channel_schedule)} entries for {self.n_blocks} blocks"
            )
        if self.channel_schedule[-1] != self.out_dim:
            raise ConfigError(f"last block must output {self.out_dim} channels")

    @property
    def input_samples(self) -> int:
        return self.first_kernel * self.pool_size**self.n_blocks

    @property
    def duration_s(self) -> float:
        return self.input_samples / self.sample_rate_hz

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_schedule"] = list(self.channel_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleCNNConfig":
        d = dict(d)
        if "channel_schedule" in d:
            d["channel_schedule"] = tuple(d["channel_schedule"])
        return cls(**d)


def resolution_calculus(cfg: SampleCNNConfig) -> tuple[int, float]:
    """Required input length in samples and in seconds."""
    return cfg.input_samples, cfg.duration_s


def resolution_table(ks=range(1, 9), base: SampleCNNConfig | None = None) -> list[tuple[int, int, float]]:
    base = base or SampleCNNConfig()
    return [(k, *resolution_calculus(replace(base, first_kernel=k))) for k in ks]


def count_parameters(cfg: SampleCNNConfig) -> int:
    """Closed-form trainable parameter count of :class:`SampleCNN`.

    Every convolution carries a bias and is followed by batch norm (scale and
    shift), so a layer mapping ``c_in -> c_out`` with width ``w`` costs
    ``w * c_in * c_out + 3 * c_out``.
    """
    total = cfg.first_kernel * 1 * cfg.stem_channels + 3 * cfg.stem_channels
    c_in = cfg.stem_channels
    for c_out in cfg.channel_schedule:
        total += cfg.block_kernel * c_in * c_out + 3 * c_out
        c_in = c_out
    return total


def trainable_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


class _Block(nn.Sequential):
    def __init__(self, c_in, c_out, kernel, pool):
        super().__init__(
            nn.Conv1d(c_in, c_out, kernel, stride=1, padding=kernel // 2),
            nn.BatchNorm1d(c_out),
            nn.ReLU(),
            nn.MaxPool1d(pool, stride=pool),
        )


class SampleCNN(nn.Module):
    """Raw-waveform encoder producing one ``out_dim`` vector per segment."""

    def __init__(self, cfg: SampleCNNConfig | None = None):
        super().__init__()
        self.cfg = cfg or SampleCNNConfig()
        c = self.cfg
        self.stem = nn.Sequential(
            nn.Conv1d(1, c.stem_channels, c.first_kernel, stride=c.first_kernel),
            nn.BatchNorm1d(c.stem_channels),
            nn.ReLU(),
        )
        blocks, c_in = [], c.stem_channels
        for c_out in c.channel_schedule:
            blocks.append(_Block(c_in, c_out, c.block_kernel, c.pool_size))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.frozen_blocks = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.dim() == 2:
            x = x.unsqueeze(1)
        expected = self.cfg.input_samples
        if x.shape[-1] != expected:
            raise ShapeError(f"SampleCNN(k={self.cfg.first_kernel}) expects {expected} samples, got {x.shape[-1]}")
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        return h.flatten(1)

    def frozen_modules(self) -> list[nn.Module]:
        if self.frozen_blocks == 0:
            return []
        return [self.stem, *self.blocks[: self.frozen_blocks]]

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen layers keep their normalisation statistics fixed
        for m in self.frozen_modules():
            m.eval()
        return self


def freeze_blocks(encoder: SampleCNN, n_blocks: int) -> SampleCNN:
    """Exclude the stem and the first ``n_blocks`` blocks from training.

    Frozen layers stop receiving gradients and their batch-norm running
    statistics stay fixed even while the encoder is in train mode.
    """
    if not 0 <= n_blocks <= len(encoder.blocks):
        raise InvalidInputError(f"n_blocks must lie in [0, {len(encoder.blocks)}], got {n_blocks}")
    for p in encoder.parameters():
        p.requires_grad_(True)
    encoder.frozen_blocks = n_blocks
    for m in encoder.frozen_modules():
        for p in m.parameters():
            p.requires_grad_(False)
    encoder.train(encoder.training)
    return encoder


@dataclass(frozen=True)
class VideoEncoderConfig:
    input_dim: int = EMBED_DIM
    n_layers: int = 2
    hidden_dim: int = 256
    out_dim: int = EMBED_DIM
    readout: str = "last"
    input_scale: str = "sqrt_dim"

    def __post_init__(self):
        if self.input_scale not in ("sqrt_dim", "none"):
            raise ConfigError(f"unknown input scaling {self.input_scale!r}")
        if self.n_layers != 2 or self.out_dim != EMBED_DIM:
            raise ConfigError("video encoder is a 2-layer LSTM with a 512-D output layer")
        if self.readout not in ("last", "mean"):
            raise ConfigError(f"unknown readout {self.readout!r}")


class VideoEncoder(nn.Module):
    """Two-layer LSTM over per-second context vectors plus one linear layer."""

    def __init__(self, cfg: VideoEncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or VideoEncoderConfig()
        c = self.cfg
        self.lstm = nn.LSTM(c.input_dim, c.hidden_dim, num_layers=c.n_layers, batch_first=True)
        self.fc = nn.Linear(c.hidden_dim, c.out_dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Encode a padded batch ``(B, T, input_dim)`` with true ``lengths``."""
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[1] == 0:
            raise InvalidInputError("video encoder received an empty sequence")
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        lengths = torch.as_tensor(lengths, dtype=torch.long).cpu()
        if (lengths < 1).any():
            raise InvalidInputError("video encoder received an empty sequence")
        if self.cfg.input_scale == "sqrt_dim":
            # unit-norm context vectors have ~1/sqrt(D) components; bring them to unit scale
            x = x * math.sqrt(x.shape[-1])
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.lstm(packed)
        if self.cfg.readout == "last":
            feat = h_n[-1]
        else:
            padded, _ = torch.nn.utils.rnn.pad_packed_sequence(out, batch_first=True)
            feat = padded.sum(1) / lengths.to(padded.dtype).unsqueeze(1)
        return self.fc(feat)


@dataclass(frozen=True)
class ProjectorConfig:
    in_dim: int = EMBED_DIM
    hidden_dim: int = EMBED_DIM
    proj_dim: int = 128

    def __post_init__(self):
        if not self.proj_dim < self.in_dim:
            raise ConfigError("projection must reduce dimension (proj_dim < in_dim)")


class Projector(nn.Sequential):
    def __init__(self, cfg: ProjectorConfig | None = None):
        cfg = cfg or ProjectorConfig()
        super().__init__(
            nn.Linear(cfg.in_dim, cfg.hidden_dim),
            nn.ReLU(),
            nn.Linear(cfg.hidden_dim, cfg.proj_dim),
        )
        self.cfg = cfg


@dataclass(frozen=True)
class TagHeadConfig:
    in_dim: int = EMBED_DIM
    hidden_dim: int = 256
    n_tags: int = 50


class TagHead(nn.Module):
    """Two affine layers with a ReLU in between; outputs per-tag logits."""

    def __init__(self, cfg: TagHeadConfig | None = None):
        super().__init__()
        self.cfg = cfg or TagHeadConfig()
        self.hidden = nn.Linear(self.cfg.in_dim, self.cfg.hidden_dim)
        self.out = nn.Linear(self.cfg.hidden_dim, self.cfg.n_tags)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.out(F.relu(self.hidden(e)))

    def scores(self, e: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward(e))


@dataclass
class ModelBundle:
    """Configs needed to rebuild every network of a run."""

    encoder: SampleCNNConfig = field(default_factory=SampleCNNConfig)
    video: VideoEncoderConfig = field(default_factory=VideoEncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
