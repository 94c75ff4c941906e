#!/usr/bin/env python3
# NT-Xent on toy embeddings: chance level, perfect pairs, temperature.

import math

import numpy as np
import torch

from vcmr.contrastive import nt_xent

n, d = 8, 16
rng = np.random.default_rng(0)

# identical embeddings everywhere: every logit equal, loss = log(2N - 1)
z = torch.ones(n, d)
print("collapsed :", nt_xent(z, z).item(), "  log(2N-1) =", math.log(2 * n - 1))

# random, unrelated views
a = torch.tensor(rng.standard_normal((n, d)))
b = torch.tensor(rng.standard_normal((n, d)))
for tau in (0.1, 0.5, 1.0):
    print(f"random    tau={tau}: {nt_xent(a, b, tau).item():.4f}")

# views that agree up to small noise
b_close = a + 0.05 * torch.tensor(rng.standard_normal((n, d)))
for tau in (0.1, 0.5, 1.0):
    print(f"aligned   tau={tau}: {nt_xent(a, b_close, tau).item():.4f}")

# scale and rotation do not matter, only angles do
q, _ = np.linalg.qr(rng.standard_normal((d, d)))
q = torch.tensor(q)
print("rotated+scaled:", nt_xent(3 * a @ q, 3 * b @ q, 0.1).item(), "vs", nt_xent(a, b, 0.1).item())
