"""Routed attention next to dense attention: equivalence at the extremes and cost in between."""

import numpy as np

from volmark.bench import attention_cost, time_attention
from volmark.tensor import Tensor
from volmark.vbra import AttentionParams, VbraConfig, dense_attention, vbra_attention

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((4, 4, 4, 8)))
p = AttentionParams(*(Tensor(rng.standard_normal((8, 8)) / np.sqrt(8)) for _ in range(4)))
dense = dense_attention(x, p, heads=2).data
for region, k in [((4, 4, 4), 1), ((1, 1, 1), 64), ((2, 2, 2), 2)]:
    out, _ = vbra_attention(x, p, VbraConfig(region, k, 2, 8))
    print(f"region {region} k={k:<2}  max |routed - dense| = {np.abs(out.data - dense).max():.2e}")

print("\nscore cost on a 16^3 volume with 4^3 regions")
for k in (1, 2, 4, 8):
    c = attention_cost((16, 16, 16), (4, 4, 4), k, channels=16, heads=2)
    print(f"  k={k}: routed/dense score MACs = {c.score_ratio}")

dense_ms, routed_ms = time_attention((16, 16, 16), (4, 4, 4), 4, repeats=3)
print(f"\nwall time at k=4: dense {dense_ms:.0f} ms, routed {routed_ms:.0f} ms")
