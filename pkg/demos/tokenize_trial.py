"""Walk one synthetic reach trial from raw counts to encoder tokens."""

import numpy as np

from spikeiaa.config import ModelConfig
from spikeiaa.normalize import normalize
from spikeiaa.objective import init_params
from spikeiaa.spike_io import gen_center_out
from spikeiaa.tokenizer import StubEmbedder, render_template, tokenize

cfg = ModelConfig()
rec = gen_center_out(1, 70, 1000, seed=0)[0]
print(f"raw counts {rec.counts.shape}, label {rec.label}, {int(rec.counts.sum())} spikes")

norm = normalize(rec, cfg.T_norm, cfg.A, cfg.C_norm)
# 70 channels over 8 areas: groups of 9 or 8, padded up to 32 slots each
print("normalized", norm.shape, "kept", int(norm.values.sum()), "spikes")
print("area 0 channels:", norm.channel_map[0][norm.channel_map[0] >= 0].tolist())

text = render_template(rec.meta)
ctx = StubEmbedder(cfg.d_text).embed(text)
print("context text:", text)

params = init_params(cfg, seed=0)
tokens = tokenize(params, norm.values[None].astype(np.float32), ctx[None], cfg)
print("tokens [batch, N, A, t, d] =", tokens.shape)
