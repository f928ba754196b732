"""Bucketed comparison: where does full context win or lose vs chunked window-5?"""
import numpy as np, time, json, sys
sys.path.insert(0, "tests")
from _helpers import make_samples
from bevrefine.metrics import score_track, track_iou, motion_state
from bevrefine.model import ModelConfig
from bevrefine.training import TrainConfig, train, refine_sample

train_set = make_samples(56, base_seed=1000, frames_lo=10, frames_hi=40)[:200]
val_set = make_samples(14, base_seed=2000, frames_lo=10, frames_hi=40)[:50]
tcfg = TrainConfig(epochs=8, base_lr=3e-4, warmup_epochs=2.0, seed=0)

nets = {}
for name, cfg in [("full", ModelConfig.preset("desk")),
                  ("win5chunk", ModelConfig.preset("desk", window=5, window_mode="chunk"))]:
    t0 = time.perf_counter()
    nets[name] = train(train_set, val_set, cfg, tcfg).net
    print(f"{name} trained in {time.perf_counter()-t0:.0f}s", flush=True)

rows = []
for s in val_set:
    span = max(np.hypot(b.x - b2.x, b.y - b2.y) for b in s.gt_boxes for b2 in s.gt_boxes)
    n_pts = np.mean([p.shape[0] for p in s.points])
    init = track_iou(s.boxes, s.gt_boxes)
    full = track_iou(refine_sample(nets["full"], s).boxes(), s.gt_boxes)
    win = track_iou(refine_sample(nets["win5chunk"], s).boxes(), s.gt_boxes)
    rows.append(dict(M=s.num_frames, span=span, pts=n_pts,
                     state=motion_state(s.gt_boxes), init=init, full=full, win=win))

def agg(sel, label):
    sub = [r for r in rows if sel(r)]
    if not sub: 
        print(f"{label:28s} (0 tracks)")
        return
    f = np.mean([r["full"] for r in sub]); w = np.mean([r["win"] for r in sub])
    i = np.mean([r["init"] for r in sub])
    print(f"{label:28s} n={len(sub):3d} init={i:.3f} full={f:.3f} win5={w:.3f} (full-win {f-w:+.3f})")

agg(lambda r: True, "ALL")
agg(lambda r: r["state"] == "stationary", "stationary")
agg(lambda r: r["state"] == "dynamic", "dynamic")
agg(lambda r: r["span"] > 15, "span > 15 m")
agg(lambda r: r["span"] <= 15, "span <= 15 m")
agg(lambda r: r["M"] >= 30, "M >= 30")
agg(lambda r: r["M"] < 20, "M < 20")
agg(lambda r: r["pts"] < 15, "sparse (<15 pts/frame)")
agg(lambda r: r["pts"] >= 15, "dense (>=15 pts/frame)")
json.dump(rows, open(".scratch/analysis_buckets.json", "w"), indent=1)
print("DONE")
