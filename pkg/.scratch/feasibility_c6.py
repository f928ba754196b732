"""Feasibility run mirroring acceptance criterion 6's planned setup."""
import numpy as np, time, json
from bevrefine import datagen, tracker, trajectory
from bevrefine.metrics import score_track, evaluate_set, track_iou
from bevrefine.model import ModelConfig
from bevrefine.training import TrainConfig, train
from bevrefine.trajectory import build_input

def make_samples(n_scenes, base, frames_lo=10, frames_hi=40, actors=4):
    rng_meta = np.random.default_rng(np.random.SeedSequence(entropy=base, spawn_key=(1,)))
    samples = []
    for i in range(n_scenes):
        frames = int(rng_meta.integers(frames_lo, frames_hi + 1))
        seed = int(np.random.SeedSequence(entropy=base, spawn_key=(i,)).generate_state(1)[0])
        cfg = datagen.SceneConfig(num_actors=actors, num_frames=frames, rng_seed=seed)
        scene = datagen.generate_scene(cfg)
        tl = tracker.track_scene(tracker.detections_from_scene(scene))
        gt = tracker.gt_tracks_from_scene(scene)
        assoc = {t.id: tracker.associate_gt(t, gt) for t in tl}
        recs = [{"tracklet_id": t.id, "gt_actor_id": assoc[t.id], "frames": t.frames,
                 "boxes": t.boxes} for t in tl]
        ss, _ = trajectory.extract_samples(scene, recs)
        samples.extend(s for s in ss if 10 <= s.num_frames <= 40)
    return samples

t0 = time.perf_counter()
train_set = make_samples(56, base=1000)[:200]
val_set = make_samples(14, base=2000)[:50]
print(f"train {len(train_set)}, val {len(val_set)}, gen {time.perf_counter()-t0:.1f}s", flush=True)

init_scores = [score_track(i, s.boxes, s.gt_boxes) for i, s in enumerate(val_set)]
init = evaluate_set(init_scores)
print(f"val init mean IoU {init.mean_iou:.4f}, RC {init.recall}", flush=True)

mcfg = ModelConfig.preset("desk")
tcfg = TrainConfig(epochs=16, base_lr=3e-4, warmup_epochs=2.0, seed=0)
t0 = time.perf_counter()
res = train(train_set, val_set, mcfg, tcfg, progress=True)
train_time = time.perf_counter() - t0
print(f"train time: {train_time:.0f}s", flush=True)

ref_scores = []
for i, s in enumerate(val_set):
    refined = res.net.refine(build_input(s))
    ref_scores.append(score_track(i, refined.boxes(), s.gt_boxes))
ref = evaluate_set(ref_scores)
print(f"refined mean IoU {ref.mean_iou:.4f} (gain {ref.mean_iou-init.mean_iou:+.4f})")
print(f"refined RC {ref.recall}")
print(f"init RC {init.recall}")
with open(".scratch/feasibility_c6.json", "w") as f:
    json.dump({"init_mean": init.mean_iou, "refined_mean": ref.mean_iou,
               "init_rc": {str(k): v for k, v in init.recall.items()},
               "refined_rc": {str(k): v for k, v in ref.recall.items()},
               "train_time_s": train_time}, f, indent=1)
print("DONE")
