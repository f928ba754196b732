"""Sparse-points regime: full vs step-equalized chunked window-5."""
import numpy as np, time, json, sys
sys.path.insert(0, "tests")
from _helpers import make_samples
from bevrefine.metrics import score_track, track_iou, evaluate_set
from bevrefine.model import ModelConfig
from bevrefine.training import TrainConfig, train, refine_sample

PTS = 25
train_set = make_samples(56, base_seed=1000, frames_lo=10, frames_hi=40, points_at_10m=PTS)[:200]
val_set = make_samples(14, base_seed=2000, frames_lo=10, frames_hi=40, points_at_10m=PTS)[:50]
init = evaluate_set([score_track(i, s.boxes, s.gt_boxes) for i, s in enumerate(val_set)])
pts = [p.shape[0] for s in val_set for p in s.points]
print(f"init={init.mean_iou:.4f}, rc80={init.recall[0.8]:.3f}, "
      f"median pts/frame={np.median(pts):.0f}, frac<=3 pts={np.mean(np.array(pts)<=3):.2f}", flush=True)

tcfg = TrainConfig(epochs=10, base_lr=3e-4, warmup_epochs=2.0, seed=0)
out = {"init": init.mean_iou}
for name, cfg in [("full", ModelConfig.preset("desk")),
                  ("win5chunk", ModelConfig.preset("desk", window=5, window_mode="chunk"))]:
    t0 = time.perf_counter()
    res = train(train_set, val_set, cfg, tcfg)
    summ = evaluate_set([score_track(i, refine_sample(res.net, s).boxes(), s.gt_boxes)
                         for i, s in enumerate(val_set)])
    out[name] = summ.mean_iou
    out[name + "_rc80"] = summ.recall[0.8]
    print(f"{name}: {summ.mean_iou:.4f} rc80={summ.recall[0.8]:.3f} "
          f"({time.perf_counter()-t0:.0f}s, best ep {res.best_epoch})", flush=True)
print(f"full - win5 = {out['full'] - out['win5chunk']:+.4f}")
json.dump(out, open(".scratch/analysis_sparse.json", "w"), indent=1)
print("DONE")
