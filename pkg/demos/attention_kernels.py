"""The two attention kernels next to their naive counterparts."""

import numpy as np

from spikeiaa import numerics as nx
from spikeiaa.encoder import global_attention, ila, sliding_window_attention, window_keys

rng = np.random.default_rng(0)

with nx.precision("float64"):
    t, d = 10, 16
    H = rng.standard_normal((t, d))
    W = [rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(3)]
    fast = ila(H, *W).data
    Q, K, V = (H @ w for w in W)
    slow = (Q @ K.T) @ V   # t x t score matrix never built by ila
    print("interval linear attention, max |diff| vs (QK^T)V:", np.abs(fast - slow).max())

    S, w = 24, 4
    Ht = rng.standard_normal((S, d))
    band = sliding_window_attention(Ht, *W, w=w).data
    print(f"row 10 attends to keys {window_keys(10, w)}")
    wide = sliding_window_attention(Ht, *W, w=S).data
    dense = global_attention(Ht, *W, causal=True).data
    print("window >= sequence equals causal attention:", np.abs(wide - dense).max() < 1e-12)
    print("narrow window differs from it:", np.abs(band - dense).max() > 1e-3)
