"""How much volume the context term adds to the token distribution."""

from spikeiaa import bench
from spikeiaa.config import ModelConfig
from spikeiaa.objective import init_params
from spikeiaa.spike_io import gen_center_out
from spikeiaa.tokenizer import StubEmbedder

cfg = ModelConfig()
params = init_params(cfg, 0)
emb = StubEmbedder(cfg.d_text)

for n_sessions in (1, 8):
    corpus = gen_center_out(64, 70, 1000, n_sessions=n_sessions, seed=10)
    rep = bench.expansion_diag(params, corpus, cfg, emb)
    print(f"{n_sessions} source(s): logdet spike {rep.logdet_spike:9.2f}  joint {rep.logdet_joint:9.2f}  "
          f"eff. rank {rep.effective_rank_spike:5.2f} -> {rep.effective_rank_joint:5.2f}")
# one source: the context is a constant shift, so the covariance is unchanged
