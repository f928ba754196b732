"""Shared test utilities: finite-difference gradient checks and data builders."""
from __future__ import annotations

import numpy as np

from bevrefine import datagen, nncore as nn, tracker, trajectory


def fd_gradcheck(fn, arrays, h: float = 1e-5, rel_tol: float = 1e-4,
                 max_coords: int | None = None, rng=None):
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` takes a list of Tensors (built fresh per call from ``arrays``) and
    returns a scalar Tensor. All computations run in float64. Checks every
    coordinate unless ``max_coords`` limits the per-array sample. Returns the
    worst relative error seen.
    """
    # C-contiguity guarantees reshape(-1) below is a view, so in-place
    # perturbations reach the function under test.
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]
    params = [nn.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = fn(params)
    nn.backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for arr, p in zip(arrays, params):
        grad = np.zeros_like(arr) if p.grad is None else p.grad
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = fn([nn.Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            dn = fn([nn.Tensor(a) for a in arrays]).item()
            flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6)
            worst = max(worst, err)
    assert worst <= rel_tol, f"gradient mismatch: worst rel err {worst:.3e} > {rel_tol}"
    return worst


def make_samples(n_scenes: int, base_seed: int, frames_lo: int = 10, frames_hi: int = 40,
                 actors: int = 4, noise=None, points_at_10m: int = 60,
                 min_frames: int = 2, max_frames: int = 10_000):
    """Scene -> track -> extract, returning trajectory samples (deterministic)."""
    rng_meta = np.random.default_rng(np.random.SeedSequence(entropy=base_seed, spawn_key=(1,)))
    samples = []
    for i in range(n_scenes):
        frames = int(rng_meta.integers(frames_lo, frames_hi + 1))
        seed = int(np.random.SeedSequence(entropy=base_seed, spawn_key=(i,)).generate_state(1)[0])
        cfg = datagen.SceneConfig(num_actors=actors, num_frames=frames, rng_seed=seed,
                                  points_at_10m=points_at_10m)
        scene = datagen.generate_scene(cfg, noise=noise)
        tracklets = tracker.track_scene(tracker.detections_from_scene(scene))
        gt = tracker.gt_tracks_from_scene(scene)
        assoc = {t.id: tracker.associate_gt(t, gt) for t in tracklets}
        records = [{"tracklet_id": t.id, "gt_actor_id": assoc[t.id], "frames": t.frames,
                    "boxes": t.boxes} for t in tracklets]
        extracted, _ = trajectory.extract_samples(scene, records)
        samples.extend(s for s in extracted if min_frames <= s.num_frames <= max_frames)
    return samples


def monte_carlo_rotated_iou(box_a, box_b, n_samples: int, rng) -> float:
    """Sampling oracle for rotated IoU, independent of the clipping code path."""
    from bevrefine.geometry import box_corners

    ca, cb = box_corners(box_a), box_corners(box_b)
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    if np.any(hi <= lo):
        return 0.0
    pts = rng.uniform(lo, hi, size=(n_samples, 2))

    def inside(box, p):
        c, s = np.cos(box.theta), np.sin(box.theta)
        dx = p[:, 0] - box.x
        dy = p[:, 1] - box.y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= box.l / 2.0) & (np.abs(v) <= box.w / 2.0)

    both = inside(box_a, pts) & inside(box_b, pts)
    area = float(np.prod(hi - lo))
    inter = both.mean() * area
    union = box_a.l * box_a.w + box_b.l * box_b.w - inter
    return max(0.0, inter / union)
