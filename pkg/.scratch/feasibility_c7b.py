"""Chunked window-5 variant at the identical budget."""
import numpy as np, time, json, sys
sys.path.insert(0, "tests")
from _helpers import make_samples
from bevrefine.metrics import score_track, evaluate_set
from bevrefine.model import ModelConfig
from bevrefine.training import TrainConfig, train, refine_sample

train_set = make_samples(56, base_seed=1000, frames_lo=10, frames_hi=40)[:200]
val_set = make_samples(14, base_seed=2000, frames_lo=10, frames_hi=40)[:50]
tcfg = TrainConfig(epochs=16, base_lr=3e-4, warmup_epochs=2.0, seed=0)
mcfg = ModelConfig.preset("desk", window=5, window_mode="chunk")
t0 = time.perf_counter()
res = train(train_set, val_set, mcfg, tcfg, progress=True)
scores = [score_track(i, refine_sample(res.net, s).boxes(), s.gt_boxes)
          for i, s in enumerate(val_set)]
summ = evaluate_set(scores)
print(f"window5-chunk: refined {summ.mean_iou:.4f} ({time.perf_counter()-t0:.0f}s)")
with open(".scratch/feasibility_c7b.json", "w") as f:
    json.dump({"window5_chunk": summ.mean_iou}, f)
print("DONE")
