"""Masked pretraining, then few-shot fine-tuning against a from-scratch model.

A reduced model keeps this to a few seconds on one core.
"""

from spikeiaa import downstream as ds
from spikeiaa.config import FinetuneConfig, ModelConfig, TrainConfig
from spikeiaa.objective import init_params, pretrain
from spikeiaa.spike_io import few_shot_spec, gen_center_out, split

cfg = ModelConfig(T_norm=50, t=5, A=4, C_norm=16, d=32, n_heads=4, d_ff=64, n_layers=2,
                  d_text=32, recon_hidden=32, head_hidden=32)
corpus = gen_center_out(200, 60, 500, seed=21)

res = pretrain(corpus, cfg, TrainConfig(epochs=10, batch_size=16, lr=1e-3),
               on_epoch=lambda e, v: print(f"pretrain epoch {e}: masked loss {v:.4f}"))

train, test = split(corpus, few_shot_spec(0))
print(f"fine-tuning on {len(train)} labelled trials, testing on {len(test)}")
task = ds.TaskSpec.infer(corpus, "cls")
for name, start in (("from scratch", init_params(cfg, 0)), ("pretrained", res.params)):
    tuned = ds.finetune(start, train, task, cfg, FinetuneConfig(epochs=30))
    rep = ds.evaluate(tuned.params, test, task, cfg)
    print(f"{name:>12}: balanced accuracy {rep.balanced_accuracy:.3f}, weighted F1 {rep.weighted_f1:.3f}")
