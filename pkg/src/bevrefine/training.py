"""Losses, augmentation, the training loop, and the TrajectoryRefiner estimator.

The loss combines lambda-weighted smooth-L1 regression on position and size,
unweighted smooth-L1 on the doubled-angle heading encoding (so a 180-degree
flip costs nothing), and one minus the mean axis-aligned IoU. Augmentation
follows the standard recipe: random subsequences (re-centered on their new
middle frame) and independent per-frame box perturbations.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .geometry import BevBox, Pose, pose_in_world, to_trajectory_frame, transform_box
from .ioutil import atomic_write_text
from .nncore import Tensor
from .trajectory import (
    RefinedTrajectory,
    TrajectoryInput,
    TrajectorySample,
    build_input,
    check_trajectory_input,
)
from .model import ModelConfig, RefinerNet, load_model, save_model


@dataclass(frozen=True)
class LossConfig:
    lambda_reg: float = 0.1
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.lambda_reg <= 0 or self.smooth_l1_beta <= 0:
            raise ValueError("lambda_reg and smooth_l1_beta must be positive")


@dataclass(frozen=True)
class AugmentConfig:
    trans_range: float = 0.25
    rot_range: float = math.radians(10.0)
    len_limit: float = 0.2
    wid_limit: float = 0.1
    perturb: bool = True
    subsequence: bool = True
    min_len_ratio: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    base_lr: float = 5e-5
    weight_decay: float = 1e-5
    warmup_epochs: float = 2.0
    lr_floor_ratio: float = 0.1
    clip_norm: float = 5.0
    seed: int = 0


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; a diagnostic dump path is attached when available."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


# -- losses ---------------------------------------------------------------

def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5 d^2 / beta inside |d| < beta, |d| - beta/2 outside."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    d = p - Tensor(t)
    ad = nn.abs_(d)
    quad_mask = (ad.data < beta).astype(p.dtype)
    quad = d * d * (0.5 / beta)
    lin = ad - 0.5 * beta
    return quad * Tensor(quad_mask) + lin * Tensor(1.0 - quad_mask)


def _gt_arrays(gt_boxes: list[BevBox], dtype):
    arr = np.array([b.to_list() for b in gt_boxes], dtype=dtype)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4]


def regression_loss(poses: Tensor, size: Tensor, gt_boxes: list[BevBox],
                    cfg: LossConfig = LossConfig()) -> Tensor:
    """Smooth-L1 on x, y, l, w (weighted by lambda) plus doubled-angle heading terms."""
    m = len(gt_boxes)
    if poses.shape[0] != m:
        raise ValueError(f"prediction has {poses.shape[0]} frames, GT has {m}")
    gx, gy, gl, gw, gtheta = _gt_arrays(gt_boxes, poses.data.dtype)
    beta = cfg.smooth_l1_beta
    pos_terms = (
        nn.mean_pool(smooth_l1(poses[:, 0], gx, beta))
        + nn.mean_pool(smooth_l1(poses[:, 1], gy, beta))
        + nn.mean_pool(smooth_l1(size[0], gl, beta))
        + nn.mean_pool(smooth_l1(size[1], gw, beta))
    )
    two_theta = poses[:, 2] * 2.0
    heading_terms = (
        nn.mean_pool(smooth_l1(nn.sin(two_theta), np.sin(2.0 * gtheta), beta))
        + nn.mean_pool(smooth_l1(nn.cos(two_theta), np.cos(2.0 * gtheta), beta))
    )
    return pos_terms * cfg.lambda_reg + heading_terms


def aligned_iou_tensor(poses: Tensor, size: Tensor, gt_boxes: list[BevBox]) -> Tensor:
    """Differentiable per-frame axis-aligned IoU between prediction and GT, shape (M,)."""
    gx, gy, gl, gw, _ = _gt_arrays(gt_boxes, poses.data.dtype)
    px, py = poses[:, 0], poses[:, 1]
    hl = nn.relu(size[0]) * 0.5
    hw = nn.relu(size[1]) * 0.5
    ghl, ghw = 0.5 * gl, 0.5 * gw
    ix = nn.relu(nn.minimum(px + hl, Tensor(gx + ghl)) - nn.maximum(px - hl, Tensor(gx - ghl)))
    iy = nn.relu(nn.minimum(py + hw, Tensor(gy + ghw)) - nn.maximum(py - hw, Tensor(gy - ghw)))
    inter = ix * iy
    area_p = nn.relu(size[0]) * nn.relu(size[1])
    union = nn.maximum(area_p + Tensor(gl * gw) - inter, Tensor(np.asarray(1e-9, poses.data.dtype)))
    return inter / union


def iou_loss(poses: Tensor, size: Tensor, gt_boxes: list[BevBox]) -> Tensor:
    """One minus the mean axis-aligned IoU across frames."""
    if poses.shape[0] != len(gt_boxes):
        raise ValueError(f"prediction has {poses.shape[0]} frames, GT has {len(gt_boxes)}")
    return 1.0 - nn.mean_pool(aligned_iou_tensor(poses, size, gt_boxes))


def total_loss(poses: Tensor, size: Tensor, gt_boxes: list[BevBox],
               cfg: LossConfig = LossConfig()) -> Tensor:
    return regression_loss(poses, size, gt_boxes, cfg) + iou_loss(poses, size, gt_boxes)


# -- augmentation ----------------------------------------------------------

def slice_sample(sample: TrajectorySample, start: int, stop: int):
    """Take frames [start, stop) and re-center on the slice's middle init box.

    Returns ``(sliced_sample, ref)`` where ``ref`` is the middle box pose in
    the parent trajectory frame (needed to map results back).
    """
    sl = slice(start, stop)
    boxes = sample.boxes[sl]
    points = sample.points[sl]
    new_boxes, new_points, ref = to_trajectory_frame(boxes, points)
    gt = [transform_box(b, ref) for b in sample.gt_boxes[sl]]
    sliced = TrajectorySample(
        tracklet_id=sample.tracklet_id,
        gt_actor_id=sample.gt_actor_id,
        frames=sample.frames[sl],
        t_end=sample.t_end[sl],
        boxes=new_boxes,
        gt_boxes=gt,
        gt_size=sample.gt_size,
        points=new_points,
    )
    return sliced, ref


def subsample_trajectory(sample: TrajectorySample, rng: np.random.Generator,
                         min_len_ratio: float = 0.5) -> TrajectorySample:
    """Random subsequence, re-centered so the new middle init box is the origin.

    Length is uniform in [max(2, ceil(ratio * M)), M]; trajectories shorter
    than 2 frames come back unchanged.
    """
    m = sample.num_frames
    if m < 2:
        return sample
    lo = max(2, math.ceil(min_len_ratio * m))
    length = int(rng.integers(lo, m + 1))
    start = int(rng.integers(0, m - length + 1))
    return slice_sample(sample, start, start + length)[0]


def chunk_sample(sample: TrajectorySample, window: int) -> list[TrajectorySample]:
    """Split into consecutive independent pieces of at most ``window`` frames."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    return [slice_sample(sample, start, min(start + window, sample.num_frames))[0]
            for start in range(0, sample.num_frames, window)]


def perturb_boxes(sample: TrajectorySample, cfg: AugmentConfig,
                  rng: np.random.Generator) -> TrajectorySample:
    """Independently jitter each initialization box; GT and context points untouched.

    Size offsets are clamped to at most half the current extent, so perturbed
    boxes always keep positive dimensions.
    """
    boxes = []
    for b in sample.boxes:
        dx = rng.uniform(-cfg.trans_range, cfg.trans_range)
        dy = rng.uniform(-cfg.trans_range, cfg.trans_range)
        dtheta = rng.uniform(-cfg.rot_range, cfg.rot_range)
        dl = rng.uniform(max(-cfg.len_limit, -b.l / 2.0), min(cfg.len_limit, b.l / 2.0))
        dw = rng.uniform(max(-cfg.wid_limit, -b.w / 2.0), min(cfg.wid_limit, b.w / 2.0))
        boxes.append(BevBox(b.x + dx, b.y + dy, b.l + dl, b.w + dw, b.theta + dtheta))
    return TrajectorySample(
        tracklet_id=sample.tracklet_id,
        gt_actor_id=sample.gt_actor_id,
        frames=list(sample.frames),
        t_end=list(sample.t_end),
        boxes=boxes,
        gt_boxes=list(sample.gt_boxes),
        gt_size=sample.gt_size,
        points=list(sample.points),
    )


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    net: RefinerNet
    history: list[dict] = field(default_factory=list)
    best_val_iou: float = -1.0
    best_epoch: int = -1


def refine_sample(net: RefinerNet, sample: TrajectorySample) -> RefinedTrajectory:
    """Refine one sample, honoring a hard chunked context window when configured.

    In chunk mode each window is re-centered, refined independently, and the
    poses are mapped back to the sample's trajectory frame; the shared size is
    the frame-weighted mean of the per-chunk sizes.
    """
    cfg = net.cfg
    if (cfg.window is None or cfg.window_mode != "chunk"
            or sample.num_frames <= cfg.window):
        return net.refine(build_input(sample))
    poses: list[Pose] = []
    length_sum = 0.0
    l_acc = w_acc = 0.0
    for start in range(0, sample.num_frames, cfg.window):
        chunk, ref = slice_sample(sample, start, min(start + cfg.window, sample.num_frames))
        refined = net.refine(build_input(chunk))
        poses.extend(pose_in_world(p, ref) for p in refined.poses)
        n = chunk.num_frames
        l_acc += refined.size[0] * n
        w_acc += refined.size[1] * n
        length_sum += n
    return RefinedTrajectory(tuple(poses), (l_acc / length_sum, w_acc / length_sum))


def mean_refined_iou(net: RefinerNet, samples: list[TrajectorySample]) -> float:
    """Mean rotated track IoU of the net's refinements against GT."""
    from .metrics import track_iou  # local import to avoid a cycle

    if not samples:
        return float("nan")
    total = 0.0
    for s in samples:
        refined = refine_sample(net, s)
        total += track_iou(refined.boxes(), s.gt_boxes)
    return float(total / len(samples))


def _augment(sample, aug, rng):
    if aug.subsequence and sample.num_frames >= 2:
        sample = subsample_trajectory(sample, rng, aug.min_len_ratio)
    if aug.perturb:
        sample = perturb_boxes(sample, aug, rng)
    return sample


def _dump_diagnostics(net, epoch, batch, loss_value, dump_dir):
    if dump_dir is None:
        return None
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, "diverged_dump.json")
    stats = {
        name: {"norm": float(np.linalg.norm(p.data)),
               "grad_norm": None if p.grad is None else float(np.linalg.norm(p.grad))}
        for name, p in net.named_parameters()
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"epoch": epoch, "batch": batch, "loss": repr(loss_value),
                   "params": stats}, f, indent=1)
    return path


def train(train_samples: list[TrajectorySample],
          val_samples: list[TrajectorySample],
          model_cfg: ModelConfig,
          train_cfg: TrainConfig = TrainConfig(),
          augment_cfg: AugmentConfig = AugmentConfig(),
          loss_cfg: LossConfig = LossConfig(),
          dump_dir: str | None = None,
          progress: bool = False) -> TrainResult:
    """Gradient-accumulated mini-batch training with warmup-cosine AdamW.

    Batches of unequal-length trajectories are processed one sample at a time
    with gradients accumulated to the batch size. Per epoch the validation
    mean IoU is logged and the best-validation parameters are retained. The
    ``lr`` column of each history row is the rate used for the epoch's final
    optimizer step, i.e. ``lr_at(schedule, epoch + 1)``.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    seed_seq = np.random.SeedSequence(train_cfg.seed)
    init_seed, shuffle_ss, aug_ss, drop_ss = seed_seq.spawn(4)
    net = RefinerNet(model_cfg, seed=init_seed.generate_state(1)[0])
    params = list(net.parameters())
    opt = nn.AdamW(params, lr=train_cfg.base_lr, weight_decay=train_cfg.weight_decay)
    # warmup capped at half the budget so very short runs stay schedulable
    warmup = min(train_cfg.warmup_epochs, 0.5 * train_cfg.epochs)
    schedule = nn.LrSchedule(train_cfg.base_lr, total_epochs=train_cfg.epochs,
                             warmup_epochs=warmup,
                             floor_ratio=train_cfg.lr_floor_ratio)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    drop_rng = np.random.default_rng(drop_ss)

    result = TrainResult(net=net)
    best_arrays = None
    n = len(train_samples)
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        batches = [order[i:i + train_cfg.batch_size] for i in range(0, n, train_cfg.batch_size)]
        epoch_loss = 0.0
        t0 = time.perf_counter()
        for b_idx, batch in enumerate(batches):
            opt.zero_grad()
            batch_loss = 0.0
            for s_idx in batch:
                sample = _augment(train_samples[s_idx], augment_cfg, aug_rng)
                # In chunk mode the trajectory's windows share one optimizer
                # step, frame-weighted, so the step count and schedule match
                # the full-context run under the same epoch budget.
                if model_cfg.window is not None and model_cfg.window_mode == "chunk":
                    pieces = chunk_sample(sample, model_cfg.window)
                else:
                    pieces = [sample]
                total_frames = sum(p.num_frames for p in pieces)
                for piece in pieces:
                    inp = build_input(piece)
                    try:
                        out = net.forward(inp, train=True, rng=drop_rng)
                        loss = total_loss(out["poses"], out["size"], piece.gt_boxes, loss_cfg)
                        loss = loss * (piece.num_frames / total_frames / len(batch))
                        value = loss.item()
                        if not math.isfinite(value):
                            raise nn.NonFiniteError(f"loss = {value}")
                        nn.backward(loss)
                    except nn.NonFiniteError as exc:
                        path = _dump_diagnostics(net, epoch, b_idx, str(exc), dump_dir)
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch}, batch {b_idx}: {exc}",
                            path) from exc
                    batch_loss += value
            lr = nn.lr_at(schedule, epoch + (b_idx + 1) / len(batches))
            nn.clip_gradients_(params, train_cfg.clip_norm)
            opt.step(lr=lr)
            epoch_loss += batch_loss * len(batch)
        train_loss = epoch_loss / n
        val_iou = mean_refined_iou(net, val_samples)
        lr_logged = nn.lr_at(schedule, float(epoch + 1))
        result.history.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_mean_iou": val_iou,
            "lr": lr_logged,
        })
        if progress:
            print(f"epoch {epoch:3d}  loss {train_loss:.4f}  val_iou {val_iou:.4f}  "
                  f"lr {lr_logged:.2e}  ({time.perf_counter() - t0:.1f}s)", flush=True)
        if val_samples and (not math.isnan(val_iou)) and val_iou > result.best_val_iou:
            result.best_val_iou = val_iou
            result.best_epoch = epoch
            best_arrays = {k: v.copy() for k, v in net.state_arrays().items()}
    if best_arrays is not None:
        net.load_state_arrays(best_arrays)
    return result


def write_metrics_csv(history: list[dict], path) -> None:
    """CSV log with full-precision floats: epoch, train_loss, val_mean_iou, lr."""
    lines = ["epoch,train_loss,val_mean_iou,lr"]
    for row in history:
        lines.append(f"{row['epoch']},{float(row['train_loss'])!r},"
                     f"{float(row['val_mean_iou'])!r},{float(row['lr'])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# -- estimator ----------------------------------------------------------------

class NotFittedError(RuntimeError):
    """predict/score/save called before fit (or load)."""


class TrajectoryRefiner:
    """Estimator with the scikit-learn surface: fit / predict / score / get_params.

    Wraps model construction, training, and inference. ``X`` is a list of
    :class:`TrajectorySample`; ``y`` optionally overrides the samples'
    ground-truth box sequences.
    """

    _PARAM_NAMES = (
        "preset", "epochs", "batch_size", "base_lr", "weight_decay", "warmup_epochs",
        "lr_floor_ratio", "clip_norm", "seed", "variant", "pos_encoding", "window",
        "window_mode", "use_box_encoder", "use_point_encoder", "perturb", "subsequence",
        "val_fraction", "lambda_reg", "smooth_l1_beta", "dtype", "max_points_per_frame",
    )

    def __init__(self, preset="desk", epochs=30, batch_size=4, base_lr=5e-5,
                 weight_decay=1e-5, warmup_epochs=2.0, lr_floor_ratio=0.1,
                 clip_norm=5.0, seed=0, variant="attention", pos_encoding="alibi",
                 window=None, window_mode="mask", use_box_encoder=True,
                 use_point_encoder=True, perturb=True, subsequence=True,
                 val_fraction=0.15, lambda_reg=0.1, smooth_l1_beta=1.0,
                 dtype="float32", max_points_per_frame=None):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.lr_floor_ratio = lr_floor_ratio
        self.clip_norm = clip_norm
        self.seed = seed
        self.variant = variant
        self.pos_encoding = pos_encoding
        self.window = window
        self.window_mode = window_mode
        self.use_box_encoder = use_box_encoder
        self.use_point_encoder = use_point_encoder
        self.perturb = perturb
        self.subsequence = subsequence
        self.val_fraction = val_fraction
        self.lambda_reg = lambda_reg
        self.smooth_l1_beta = smooth_l1_beta
        self.dtype = dtype
        self.max_points_per_frame = max_points_per_frame

    # scikit-learn protocol ------------------------------------------------
    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "TrajectoryRefiner":
        for key, value in params.items():
            if key not in self._PARAM_NAMES:
                raise ValueError(f"invalid parameter {key!r} for TrajectoryRefiner")
            setattr(self, key, value)
        return self

    # ------------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        overrides = dict(
            variant=self.variant, pos_encoding=self.pos_encoding, window=self.window,
            window_mode=self.window_mode, use_box_encoder=self.use_box_encoder,
            use_point_encoder=self.use_point_encoder, dtype=self.dtype,
        )
        if self.max_points_per_frame is not None:
            overrides["max_points_per_frame"] = self.max_points_per_frame
        return ModelConfig.preset(self.preset, **overrides)

    @staticmethod
    def _coerce_samples(X, y=None) -> list[TrajectorySample]:
        samples = list(X)
        if y is not None:
            if len(y) != len(samples):
                raise ValueError(f"X and y length mismatch: {len(samples)} vs {len(y)}")
            replaced = []
            for s, gt in zip(samples, y):
                gt = list(gt)
                if len(gt) != s.num_frames:
                    raise ValueError("ground-truth length does not match sample frames")
                replaced.append(TrajectorySample(
                    s.tracklet_id, s.gt_actor_id, list(s.frames), list(s.t_end),
                    list(s.boxes), gt, (gt[0].l, gt[0].w), list(s.points)))
            samples = replaced
        for s in samples:
            check_trajectory_input(build_input(s))
            if len(s.gt_boxes) != s.num_frames:
                raise ValueError("sample GT boxes misaligned with frames")
        return samples

    def fit(self, X, y=None, validation_data=None) -> "TrajectoryRefiner":
        samples = self._coerce_samples(X, y)
        if validation_data is not None:
            val = self._coerce_samples(validation_data)
            train_set = samples
        elif self.val_fraction > 0 and len(samples) >= 5:
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, 7041)))
            order = rng.permutation(len(samples))
            n_val = max(1, int(round(self.val_fraction * len(samples))))
            val_idx = set(order[:n_val].tolist())
            val = [samples[i] for i in sorted(val_idx)]
            train_set = [samples[i] for i in range(len(samples)) if i not in val_idx]
        else:
            val, train_set = [], samples
        result = train(
            train_set, val,
            model_cfg=self.model_config(),
            train_cfg=TrainConfig(
                epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs,
                lr_floor_ratio=self.lr_floor_ratio, clip_norm=self.clip_norm, seed=self.seed),
            augment_cfg=AugmentConfig(perturb=self.perturb, subsequence=self.subsequence),
            loss_cfg=LossConfig(lambda_reg=self.lambda_reg, smooth_l1_beta=self.smooth_l1_beta),
        )
        self.model_ = result.net
        self.history_ = result.history
        self.best_val_iou_ = result.best_val_iou
        self.n_iter_ = len(result.history)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this TrajectoryRefiner is not fitted yet; call fit or load")

    def predict(self, X) -> list[RefinedTrajectory]:
        self._require_fitted()
        out = []
        for item in X:
            if isinstance(item, TrajectoryInput):
                check_trajectory_input(item)
                out.append(self.model_.refine(item))
            else:
                check_trajectory_input(build_input(item))
                out.append(refine_sample(self.model_, item))
        return out

    def transform(self, X) -> list[RefinedTrajectory]:
        return self.predict(X)

    def score(self, X, y=None) -> float:
        """Mean rotated track IoU of refined trajectories against ground truth."""
        from .metrics import track_iou

        self._require_fitted()
        samples = self._coerce_samples(X, y)
        refined = self.predict(samples)
        return float(np.mean([
            track_iou(r.boxes(), s.gt_boxes) for r, s in zip(refined, samples)
        ]))

    def save(self, path) -> None:
        self._require_fitted()
        extra = {f"estimator.{k}": repr(v) for k, v in self.get_params().items()}
        save_model(self.model_, path, extra_header=extra)

    @classmethod
    def load(cls, path) -> "TrajectoryRefiner":
        import ast

        net, header = load_model(path)
        est = cls()
        for key, raw in header.items():
            if key.startswith("estimator."):
                name = key[len("estimator."):]
                if name in cls._PARAM_NAMES:
                    try:
                        setattr(est, name, ast.literal_eval(raw))
                    except (ValueError, SyntaxError):
                        setattr(est, name, raw)
        est.model_ = net
        return est
