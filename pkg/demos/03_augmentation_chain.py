#!/usr/bin/env python3
# What the view-generation chain does to a test tone.

import numpy as np

from vcmr.augment import AugmentChainConfig, add_noise, apply_chain, pitch_shift
from vcmr.features import AudioWaveform

sr = 16000
t = np.arange(2 * sr) / sr
tone = (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32)


def peak_hz(x):
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size)))
    return np.argmax(spec) * sr / x.size


for semis in (-7, -2, 0, 5, 7):
    print(f"pitch {semis:+d} st -> {peak_hz(pitch_shift(tone, semis)):7.1f} Hz (expected {440 * 2 ** (semis / 12):7.1f})")

noisy = add_noise(tone, 20.0, np.random.default_rng(0))
snr = 10 * np.log10(np.mean(tone**2) / np.mean((noisy - tone) ** 2))
print(f"noise at 20 dB -> measured {snr:.2f} dB")

cfg = AugmentChainConfig()
rng = np.random.default_rng(1)
w = AudioWaveform(tone)
for i in range(5):
    out = apply_chain(w, cfg, rng).samples
    print(f"view {i}: peak {np.abs(out).max():.3f}  dominant {peak_hz(out):7.1f} Hz  rms {np.sqrt(np.mean(out**2)):.3f}")
