"""Random waveform transformations for building contrastive training views.

The chain is applied in a fixed order: pitch shift, high/low-pass filter,
delay (single-echo reverb), additive gaussian noise.  Each transform fires
independently with its own probability and draws its parameters uniformly
from a configured range.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy import signal

from .errors import ConfigError
from .features import SAMPLE_RATE, AudioWaveform

# Signal power floor used by the noise transform, so silent input still
# receives noise (-40 dBFS reference).
NOISE_REFERENCE_FLOOR = 1e-4


@dataclass(frozen=True)
class AugmentChainConfig:
    pitch_p: float = 0.6
    pitch_semitones: tuple[float, float] = (-7.0, 7.0)
    filter_p: float = 0.6
    filter_cutoff_hz: tuple[float, float] = (200.0, 4000.0)
    filter_highpass_p: float = 0.5
    delay_p: float = 0.4
    delay_ms: tuple[float, float] = (200.0, 500.0)
    delay_decay: tuple[float, float] = (0.3, 0.6)
    noise_p: float = 0.5
    noise_snr_db: tuple[float, float] = (10.0, 30.0)
    rng_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("_p"):
                if not 0.0 <= v <= 1.0:
                    raise ConfigError(f"augment.{f.name} must lie in [0, 1], got {v}")
            elif isinstance(v, (tuple, list)):
                lo, hi = v
                if lo > hi:
                    raise ConfigError(f"augment.{f.name} range is not ordered: {v}")
                object.__setattr__(self, f.name, (float(lo), float(hi)))
        lo, hi = self.filter_cutoff_hz
        if lo <= 0 or hi >= SAMPLE_RATE / 2:
            raise ConfigError(f"augment.filter_cutoff_hz must lie inside (0, {SAMPLE_RATE // 2})")

    def off(self) -> "AugmentChainConfig":
        """Same ranges with every transform disabled."""
        return replace(self, pitch_p=0.0, filter_p=0.0, delay_p=0.0, noise_p=0.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentChainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown augment keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.size >= n:
        return x[:n]
    return np.pad(x, (0, n - x.size))


def time_stretch(x: np.ndarray, rate: float, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Phase-vocoder time stretch; ``rate > 1`` shortens the signal."""
    window = signal.windows.hann(n_fft, sym=False)
    pad = n_fft // 2
    # extra trailing frame keeps the synthesis window sum away from zero at the end
    xp = np.pad(x.astype(np.float64), (pad, pad + n_fft))
    n_frames = 1 + (xp.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(xp[idx] * window, axis=1)

    steps = np.arange(0.0, n_frames - 1, rate)
    omega = 2 * np.pi * hop * np.arange(n_fft // 2 + 1) / n_fft
    phase = np.angle(spec[0])
    out = np.empty((steps.size, spec.shape[1]), dtype=np.complex128)
    for t, step in enumerate(steps):
        i = int(step)
        frac = step - i
        a, b = spec[i], spec[i + 1]
        mag = (1 - frac) * np.abs(a) + frac * np.abs(b)
        out[t] = mag * np.exp(1j * phase)
        dphi = np.angle(b) - np.angle(a) - omega
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + omega + dphi

    frames = np.fft.irfft(out, n=n_fft, axis=1) * window
    length = hop * (steps.size - 1) + n_fft
    y = np.zeros(length)
    norm = np.zeros(length)
    for t in range(steps.size):
        y[t * hop : t * hop + n_fft] += frames[t]
        norm[t * hop : t * hop + n_fft] += window**2
    covered = norm > 1e-3 * norm.max()
    y[covered] /= norm[covered]
    y[~covered] = 0.0
    return y[pad : pad + int(round(x.size / rate))]


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    """Shift pitch by ``semitones`` keeping the duration (stretch, then resample)."""
    if semitones == 0.0:
        return x.copy()
    ratio = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(x, 1.0 / ratio)
    y = signal.resample(stretched, x.size)
    return _fit_length(y, x.size).astype(np.float32)


def pass_filter(x: np.ndarray, cutoff_hz: float, highpass: bool, order: int = 4) -> np.ndarray:
    sos = signal.butter(order, cutoff_hz, btype="highpass" if highpass else "lowpass", fs=SAMPLE_RATE, output="sos")
    return signal.sosfilt(sos, x).astype(np.float32)


def delay(x: np.ndarray, delay_ms: float, decay: float) -> np.ndarray:
    """Single echo mixed back in and rescaled by ``1 / (1 + decay)``."""
    d = int(round(delay_ms * SAMPLE_RATE / 1000.0))
    y = x.astype(np.float64).copy()
    if 0 < d < x.size:
        y[d:] += decay * x[:-d]
    return (y / (1.0 + decay)).astype(np.float32)


def add_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    power = max(float(np.mean(x.astype(np.float64) ** 2)), NOISE_REFERENCE_FLOOR)
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return (x + sigma * rng.standard_normal(x.size)).astype(np.float32)


def random_crop_pair(
    w: AudioWaveform, segment_samples: int, rng: np.random.Generator
) -> tuple[AudioWaveform, AudioWaveform]:
    """Two independent uniformly-placed crops of ``segment_samples`` each.

    Waveforms shorter than the segment are zero-padded first.
    """
    x = w.samples
    if x.size < segment_samples:
        x = np.pad(x, (0, segment_samples - x.size))
    hi = x.size - segment_samples + 1
    a, b = rng.integers(0, hi, size=2)
    return (
        AudioWaveform(x[a : a + segment_samples].copy(), w.sample_rate_hz, w.track_id),
        AudioWaveform(x[b : b + segment_samples].copy(), w.sample_rate_hz, w.track_id),
    )


def random_crop(w: AudioWaveform, segment_samples: int, rng: np.random.Generator) -> tuple[AudioWaveform, int]:
    """Single uniformly-placed crop; also returns its start sample."""
    x = w.samples
    if x.size < segment_samples:
        x = np.pad(x, (0, segment_samples - x.size))
    a = int(rng.integers(0, x.size - segment_samples + 1))
    return AudioWaveform(x[a : a + segment_samples].copy(), w.sample_rate_hz, w.track_id), a


def apply_chain(w: AudioWaveform, cfg: AugmentChainConfig, rng: np.random.Generator) -> AudioWaveform:
    x = w.samples
    # Every draw is made regardless of whether the transform fires, so the
    # rng stream layout does not depend on the probabilities.
    u = rng.random(4)
    semis = rng.uniform(*cfg.pitch_semitones)
    cutoff = rng.uniform(*cfg.filter_cutoff_hz)
    highpass = rng.random() < cfg.filter_highpass_p
    delay_ms = rng.uniform(*cfg.delay_ms)
    decay = rng.uniform(*cfg.delay_decay)
    snr = rng.uniform(*cfg.noise_snr_db)

    if u[0] < cfg.pitch_p:
        x = pitch_shift(x, semis)
    if u[1] < cfg.filter_p:
        x = pass_filter(x, cutoff, highpass)
    if u[2] < cfg.delay_p:
        x = delay(x, delay_ms, decay)
    if u[3] < cfg.noise_p:
        x = add_noise(x, snr, rng)
    return AudioWaveform(limit_peak(x), w.sample_rate_hz, w.track_id)


def limit_peak(x: np.ndarray) -> np.ndarray:
    """Rescale into [-1, 1] when the peak exceeds 1 (no hard clipping)."""
    peak = float(np.max(np.abs(x)))
    if peak > 1.0:
        x = x / peak
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def make_training_pair(
    w: AudioWaveform, segment_samples: int, cfg: AugmentChainConfig, rng: np.random.Generator
) -> tuple[AudioWaveform, AudioWaveform]:
    a, b = random_crop_pair(w, segment_samples, rng)
    return apply_chain(a, cfg, rng), apply_chain(b, cfg, rng)
