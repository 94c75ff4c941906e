#!/usr/bin/env python3
# Input length and size of the raw-waveform encoder.

import torch

from vcmr.models import SampleCNN, SampleCNNConfig, count_parameters, resolution_table, trainable_parameter_count

# every block pools by 3, so the stem width k fixes the input length k * 3^9
for k, samples, seconds in resolution_table():
    print(f"k={k}  {samples:6d} samples  {seconds:.4f} s")

cfg = SampleCNNConfig()
enc = SampleCNN(cfg).eval()
print("closed form :", count_parameters(cfg))
print("instantiated:", trainable_parameter_count(enc))

with torch.no_grad():
    e = enc(torch.randn(2, cfg.input_samples))
print("embedding shape:", tuple(e.shape))

try:
    enc(torch.randn(1, cfg.input_samples - 1))
except ValueError as err:
    print("rejected:", err)
