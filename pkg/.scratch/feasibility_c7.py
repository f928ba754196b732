"""Ablation trend check: full-context vs window-5 vs mlp_pool at identical budget."""
import numpy as np, time, json, sys
sys.path.insert(0, "tests")
from _helpers import make_samples
from bevrefine.metrics import score_track, evaluate_set
from bevrefine.model import ModelConfig
from bevrefine.training import TrainConfig, train
from bevrefine.trajectory import build_input

train_set = make_samples(56, base_seed=1000, frames_lo=10, frames_hi=40)[:200]
val_set = make_samples(14, base_seed=2000, frames_lo=10, frames_hi=40)[:50]
init = evaluate_set([score_track(i, s.boxes, s.gt_boxes) for i, s in enumerate(val_set)])
print(f"n_train={len(train_set)} n_val={len(val_set)} init={init.mean_iou:.4f}", flush=True)

tcfg = TrainConfig(epochs=16, base_lr=3e-4, warmup_epochs=2.0, seed=0)
results = {"init": init.mean_iou}
for name, overrides in [("window5", {"window": 5}), ("mlp_pool", {"variant": "mlp_pool"})]:
    mcfg = ModelConfig.preset("desk", **overrides)
    t0 = time.perf_counter()
    res = train(train_set, val_set, mcfg, tcfg, progress=True)
    scores = [score_track(i, res.net.refine(build_input(s)).boxes(), s.gt_boxes)
              for i, s in enumerate(val_set)]
    summ = evaluate_set(scores)
    results[name] = summ.mean_iou
    print(f"{name}: refined {summ.mean_iou:.4f} (best-val epoch {res.best_epoch}; "
          f"{time.perf_counter()-t0:.0f}s)", flush=True)
with open(".scratch/feasibility_c7.json", "w") as f:
    json.dump(results, f, indent=1)
print("DONE")
