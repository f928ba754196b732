"""Trajectory refinement network.

Per frame, a shared encoder turns the initialization box and the object-frame
point cloud into one feature token (linear box embedding + pillar/CNN point
branch, fused additively). A stack of pre-norm self-attention blocks with
linear distance biases mixes information across frames, and two linear heads
decode per-frame pose residuals plus one trajectory-wide size residual.

Ablation switches cover: windowed attention, sinusoidal absolute positions
instead of distance biases, a mean-pool MLP in place of attention, and
disabling either encoder branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nncore as nn
from .geometry import Pose, as_points, to_object_frame
from .nncore import Tensor
from .trajectory import RefinedTrajectory, TrajectoryInput

POINT_FEAT = 16       # per-point / per-voxel channel width
PILLAR_FEAT = 32      # BEV channels entering the backbone
_WINDOW_MASK = -1e9   # additive mask value; underflows to exactly 0 after softmax


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; see :meth:`preset` for the standard sizes."""

    d_model: int = 256
    num_blocks: int = 6
    num_heads: int = 4
    ffn_width: int = 512
    dropout_p: float = 0.1
    voxel_size: float = 0.1
    roi_x: tuple[float, float] = (-12.0, 12.0)
    roi_y: tuple[float, float] = (-4.0, 4.0)
    roi_z: tuple[float, float] = (-0.2, 3.0)
    stem_channels: tuple[int, int, int] = (120, 96, 96)
    stage_channels: tuple[int, int, int] = (288, 384, 576)
    stage_blocks: tuple[int, int, int] = (6, 6, 4)
    fpn_out: int = 256
    max_points_per_frame: int = 1024
    pos_encoding: str = "alibi"      # "alibi" | "absolute"
    variant: str = "attention"       # "attention" | "mlp_pool"
    window: int | None = None        # temporal context restriction (see window_mode)
    # "mask": every attention block is masked to |i - j| <= window (context
    # still leaks up to num_blocks * window through block composition).
    # "chunk": the trajectory is split into independent length-<=window pieces
    # for both training and inference, a hard context restriction.
    window_mode: str = "mask"
    use_box_encoder: bool = True
    use_point_encoder: bool = True
    alibi_slope: float | None = None  # None -> per-head slopes 2^(-8h/H)
    dtype: str = "float32"
    name: str = "custom"

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.num_heads}")
        if self.pos_encoding not in ("alibi", "absolute"):
            raise ValueError(f"unknown pos_encoding {self.pos_encoding!r}")
        if self.variant not in ("attention", "mlp_pool"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (self.use_box_encoder or self.use_point_encoder):
            raise ValueError("at least one of box/point encoders must be enabled")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for axis, (lo, hi) in (("x", self.roi_x), ("y", self.roi_y), ("z", self.roi_z)):
            extent = hi - lo
            if extent <= 0:
                raise ValueError(f"roi_{axis} must have positive extent")
            cells = extent / self.voxel_size
            if abs(cells - round(cells)) > 1e-9:
                raise ValueError(f"roi_{axis} extent {extent} not divisible by voxel {self.voxel_size}")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")
        if self.window_mode not in ("mask", "chunk"):
            raise ValueError(f"unknown window_mode {self.window_mode!r}")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        """(N_x, N_y, N_z) voxel grid dimensions."""
        return (
            round((self.roi_x[1] - self.roi_x[0]) / self.voxel_size),
            round((self.roi_y[1] - self.roi_y[0]) / self.voxel_size),
            round((self.roi_z[1] - self.roi_z[0]) / self.voxel_size),
        )

    @property
    def roi_min(self) -> tuple[float, float, float]:
        return (self.roi_x[0], self.roi_y[0], self.roi_z[0])

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        """Named configurations: ``paper`` (full size), ``desk`` (CPU-trainable),
        ``tiny`` (test-sized)."""
        if name == "paper":
            base = cls(name="paper")
        elif name == "desk":
            base = cls(
                d_model=64, num_blocks=3, num_heads=4, ffn_width=128,
                voxel_size=0.25, roi_x=(-12.0, 12.0), roi_y=(-4.0, 4.0), roi_z=(0.0, 2.0),
                stem_channels=(16, 16, 16), stage_channels=(32, 48, 64),
                stage_blocks=(2, 2, 2), fpn_out=64, name="desk",
            )
        elif name == "tiny":
            base = cls(
                d_model=16, num_blocks=1, num_heads=2, ffn_width=32,
                voxel_size=0.5, roi_x=(-4.0, 4.0), roi_y=(-4.0, 4.0), roi_z=(0.0, 2.0),
                stem_channels=(8, 8, 8), stage_channels=(8, 12, 16),
                stage_blocks=(1, 1, 1), fpn_out=16, max_points_per_frame=256, name="tiny",
            )
        else:
            raise ValueError(f"unknown preset {name!r} (expected paper/desk/tiny)")
        return replace(base, **overrides) if overrides else base

    # -- key=value round trip (checkpoint header) ------------------------
    def to_kv(self) -> dict[str, str]:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
            if v is None:
                return ""
            return str(v)
        return {f"model.{k}": fmt(getattr(self, k)) for k in self.__dataclass_fields__}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        def tup(s, typ):
            return tuple(typ(p) for p in s.split(","))
        fields = {}
        for key, raw in kv.items():
            if not key.startswith("model."):
                continue
            name = key[len("model."):]
            if name in ("roi_x", "roi_y", "roi_z"):
                fields[name] = tup(raw, float)
            elif name in ("stem_channels", "stage_channels", "stage_blocks"):
                fields[name] = tup(raw, int)
            elif name in ("d_model", "num_blocks", "num_heads", "ffn_width",
                          "fpn_out", "max_points_per_frame"):
                fields[name] = int(raw)
            elif name in ("dropout_p", "voxel_size"):
                fields[name] = float(raw)
            elif name == "window":
                fields[name] = None if raw in ("", "None") else int(raw)
            elif name == "alibi_slope":
                fields[name] = None if raw in ("", "None") else float(raw)
            elif name in ("use_box_encoder", "use_point_encoder"):
                fields[name] = raw in ("True", "true", "1")
            else:
                fields[name] = raw
        return cls(**fields)


def alibi_slopes(num_heads: int, slope: float | None = None) -> np.ndarray:
    """Per-head bias slopes m_h = 2^(-8h / H), or a single shared constant."""
    if slope is not None:
        return np.full(num_heads, float(slope))
    return np.array([2.0 ** (-8.0 * h / num_heads) for h in range(1, num_heads + 1)])


def alibi_bias(num_frames: int, num_heads: int, slope: float | None = None) -> np.ndarray:
    """(H, M, M) additive attention biases: entry (i, j) is -m_h * |i - j|."""
    if num_frames < 1:
        raise ValueError("need at least one frame")
    idx = np.arange(num_frames)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    return -alibi_slopes(num_heads, slope)[:, None, None] * dist[None, :, :]


def window_mask(num_frames: int, window: int) -> np.ndarray:
    """(M, M) additive mask: 0 inside |i - j| <= window, a large negative outside."""
    idx = np.arange(num_frames)
    dist = np.abs(idx[:, None] - idx[None, :])
    return np.where(dist <= window, 0.0, _WINDOW_MASK)


def sinusoidal_encoding(num_positions: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos absolute positional encodings, (M, dim)."""
    if dim % 2:
        raise ValueError(f"sinusoidal encoding needs an even dim, got {dim}")
    pos = np.arange(num_positions)[:, None].astype(np.float64)
    i = np.arange(dim // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    enc = np.zeros((num_positions, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


def voxelize(points, t_ref: float, roi_min, voxel_size: float,
             grid_shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Bin object-frame points into voxels with centroid-relative offsets.

    Returns ``(indices, features)``: indices (P, 3) int voxel coordinates and
    features (P, 4) rows ``(dx, dy, dz, dt)`` with offsets relative to the
    voxel centroid and ``dt = t - t_ref``. Points outside the ROI are dropped;
    bins are half-open so a point exactly at the ROI max falls out.
    """
    pts = as_points(points)
    if pts.shape[0] == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros((0, 4))
    rel = (pts[:, :3] - np.asarray(roi_min)) / voxel_size
    idx = np.floor(rel).astype(np.int64)
    dims = np.asarray(grid_shape)
    keep = np.all((idx >= 0) & (idx < dims), axis=1)
    idx = idx[keep]
    kept = pts[keep]
    centroid = np.asarray(roi_min) + (idx + 0.5) * voxel_size
    feats = np.empty((idx.shape[0], 4))
    feats[:, :3] = kept[:, :3] - centroid
    feats[:, 3] = kept[:, 3] - t_ref
    return idx, feats


class _Bottleneck(nn.Module):
    """1x1 -> 3x3 (optional stride) -> 1x1, each conv followed by GN + ReLU;
    the result is a residual added to the (possibly downsampled) input."""

    def __init__(self, in_ch, out_ch, rng, stride=1, dtype=np.float32):
        super().__init__()
        mid = max(out_ch // 4, 4)
        self.conv1 = nn.Conv2d(in_ch, mid, 1, rng, dtype=dtype)
        self.gn1 = nn.GroupNorm(mid, dtype=dtype)
        self.conv2 = nn.Conv2d(mid, mid, 3, rng, stride=stride, dtype=dtype)
        self.gn2 = nn.GroupNorm(mid, dtype=dtype)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, rng, dtype=dtype)
        self.gn3 = nn.GroupNorm(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.short_conv = nn.Conv2d(in_ch, out_ch, 1, rng, stride=stride, dtype=dtype)
            self.short_gn = nn.GroupNorm(out_ch, dtype=dtype)
        else:
            self.short_conv = None
            self.short_gn = None

    def __call__(self, x):
        r = nn.relu(self.gn1(self.conv1(x)))
        r = nn.relu(self.gn2(self.conv2(r)))
        r = nn.relu(self.gn3(self.conv3(r)))
        shortcut = x if self.short_conv is None else self.short_gn(self.short_conv(x))
        return r + shortcut


class AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention followed by a residual feed-forward MLP."""

    def __init__(self, d_model, num_heads, ffn_width, dropout_p, rng, dtype=np.float32):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.d_model = d_model
        self.ln_attn = nn.LayerNorm(d_model, dtype=dtype)
        self.proj_q = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.proj_k = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.proj_v = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.proj_out = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.ln_ffn = nn.LayerNorm(d_model, dtype=dtype)
        self.ffn_in = nn.Linear(d_model, ffn_width, rng, dtype=dtype)
        self.ffn_out = nn.Linear(ffn_width, d_model, rng, dtype=dtype)
        self.drop = nn.Dropout(dropout_p)

    def attention_weights(self, g: Tensor, bias: np.ndarray | None) -> Tensor:
        """(H, M, M) post-softmax attention maps (diagnostic / test hook)."""
        z = self.ln_attn(g)
        q, k, _ = self._qkv(z)
        return self._scores(q, k, bias, g.shape[0])

    def _qkv(self, z):
        m = z.shape[0]
        def split(t):
            return nn.transpose(nn.reshape(t, (m, self.num_heads, self.head_dim)), (1, 0, 2))
        return split(self.proj_q(z)), split(self.proj_k(z)), split(self.proj_v(z))

    def _scores(self, q, k, bias, m):
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = nn.matmul(q, nn.transpose(k, (0, 2, 1))) * scale
        if bias is not None:
            scores = scores + Tensor(bias.astype(scores.dtype))
        return nn.softmax(scores, axis=-1)

    def __call__(self, g: Tensor, bias: np.ndarray | None, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        m = g.shape[0]
        z = self.ln_attn(g)
        q, k, v = self._qkv(z)
        att = self._scores(q, k, bias, m)
        mixed = nn.matmul(att, v)                          # (H, M, dk)
        mixed = nn.reshape(nn.transpose(mixed, (1, 0, 2)), (m, self.d_model))
        h = z + self.proj_out(mixed)
        z2 = self.ln_ffn(h)
        ff = self.drop(nn.relu(self.ffn_in(z2)), train, rng)
        ff = self.drop(self.ffn_out(ff), train, rng)
        return z2 + ff


class RefinerNet(nn.Module):
    """The full per-frame-encode / cross-frame-attend / decode network."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        nx, ny, nz = cfg.grid_shape

        if cfg.use_box_encoder:
            self.box_enc = nn.Linear(5, cfg.d_model, rng, dtype=dtype)
        if cfg.use_point_encoder:
            self.point_fc1 = nn.Linear(4, POINT_FEAT, rng, dtype=dtype)
            self.point_ln1 = nn.LayerNorm(POINT_FEAT, dtype=dtype)
            self.point_fc2 = nn.Linear(POINT_FEAT, POINT_FEAT, rng, dtype=dtype)
            self.voxel_ln = nn.LayerNorm(POINT_FEAT, dtype=dtype)
            self.z_embed = nn.parameter(rng.normal(0.0, 0.02, (nz, POINT_FEAT)), dtype)
            self.pillar_fc1 = nn.Linear(2 * POINT_FEAT, POINT_FEAT, rng, dtype=dtype)
            self.pillar_ln1 = nn.LayerNorm(POINT_FEAT, dtype=dtype)
            self.pillar_fc2 = nn.Linear(POINT_FEAT, PILLAR_FEAT, rng, dtype=dtype)
            self.pillar_ln2 = nn.LayerNorm(PILLAR_FEAT, dtype=dtype)

            s1, s2, s3 = cfg.stem_channels
            self.stem1 = nn.Conv2d(PILLAR_FEAT, s1, 3, rng, stride=2, dtype=dtype)
            self.stem_gn1 = nn.GroupNorm(s1, dtype=dtype)
            self.stem2 = nn.Conv2d(s1, s2, 3, rng, dtype=dtype)
            self.stem_gn2 = nn.GroupNorm(s2, dtype=dtype)
            self.stem3 = nn.Conv2d(s2, s3, 3, rng, dtype=dtype)
            self.stem_gn3 = nn.GroupNorm(s3, dtype=dtype)

            stages = []
            in_ch = s3
            for ch, blocks in zip(cfg.stage_channels, cfg.stage_blocks):
                mods = [_Bottleneck(in_ch, ch, rng, stride=2, dtype=dtype)]
                mods += [_Bottleneck(ch, ch, rng, dtype=dtype) for _ in range(blocks - 1)]
                stages.append(nn.ModuleList(mods))
                in_ch = ch
            self.stages = nn.ModuleList(stages)

            c4, c8, c16 = cfg.stage_channels
            self.fpn_lat16 = nn.Conv2d(c16, c8, 1, rng, dtype=dtype)
            self.fpn_gn16 = nn.GroupNorm(c8, dtype=dtype)
            self.fpn_lat8 = nn.Conv2d(c8, c4, 1, rng, dtype=dtype)
            self.fpn_gn8 = nn.GroupNorm(c4, dtype=dtype)
            self.fpn_out_conv = nn.Conv2d(c4, cfg.fpn_out, 3, rng, dtype=dtype)
            self.point_proj = nn.Linear(cfg.fpn_out, cfg.d_model, rng, dtype=dtype)

        if cfg.variant == "attention":
            self.blocks = nn.ModuleList([
                AttentionBlock(cfg.d_model, cfg.num_heads, cfg.ffn_width,
                               cfg.dropout_p, rng, dtype=dtype)
                for _ in range(cfg.num_blocks)
            ])
        else:
            self.pool_linears = nn.ModuleList([
                nn.Linear(cfg.d_model, cfg.d_model, rng, dtype=dtype)
                for _ in range(cfg.num_blocks)
            ])
            self.pool_norms = nn.ModuleList([
                nn.LayerNorm(cfg.d_model, dtype=dtype) for _ in range(cfg.num_blocks)
            ])

        self.pose_head = nn.Linear(cfg.d_model, 3, rng, dtype=dtype)
        self.size_head = nn.Linear(cfg.d_model, 2, rng, dtype=dtype)

    # -- encoder pieces ---------------------------------------------------
    def encode_box(self, boxes: np.ndarray | Tensor) -> Tensor:
        """(M, 5) box parameters -> (M, D) features through a single linear layer."""
        t = boxes if isinstance(boxes, Tensor) else Tensor(np.asarray(boxes, self.cfg.np_dtype))
        return self.box_enc(t)

    def prepare_points(self, inp: TrajectoryInput,
                       rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Object-frame transform, per-frame point cap, and voxelization for all frames.

        Returns ``(voxel_keys, features)`` with voxel_keys (P, 4) rows
        ``(frame, ix, iy, iz)``. Deterministic when no rng is given.
        """
        cfg = self.cfg
        keys = []
        feats = []
        for i, (box, pts) in enumerate(zip(inp.boxes, inp.object_points)):
            obj = to_object_frame(pts, box)
            n = obj.shape[0]
            if n > cfg.max_points_per_frame:
                local = rng if rng is not None else np.random.default_rng(
                    np.random.SeedSequence(entropy=(i, n)))
                pick = np.sort(local.choice(n, cfg.max_points_per_frame, replace=False))
                obj = obj[pick]
            idx, f = voxelize(obj, inp.t_ref, cfg.roi_min, cfg.voxel_size, cfg.grid_shape)
            if idx.shape[0]:
                keys.append(np.column_stack([np.full(idx.shape[0], i, dtype=np.int64), idx]))
                feats.append(f)
        if not keys:
            return np.zeros((0, 4), dtype=np.int64), np.zeros((0, 4))
        return np.concatenate(keys, axis=0), np.concatenate(feats, axis=0)

    def pillar_encode(self, voxel_keys: np.ndarray, point_feats: np.ndarray,
                      num_frames: int) -> Tensor:
        """Point MLP, per-voxel sum + LN, z-embedding concat, pillar MLP, pillar sum.

        Returns the BEV map as an NCHW tensor (num_frames, 32, N_x, N_y).
        """
        cfg = self.cfg
        nx, ny, nz = cfg.grid_shape
        dtype = cfg.np_dtype
        cells = num_frames * nx * ny
        if voxel_keys.shape[0] == 0:
            return Tensor(np.zeros((num_frames, PILLAR_FEAT, nx, ny), dtype=dtype))
        uniq, inverse = np.unique(voxel_keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)

        h = nn.relu(self.point_ln1(self.point_fc1(Tensor(point_feats.astype(dtype)))))
        h = self.point_fc2(h)
        vox = self.voxel_ln(nn.scatter_add(h, inverse, uniq.shape[0]))
        zemb = nn.gather(self.z_embed, uniq[:, 3])
        vh = nn.concat([vox, zemb], axis=1)
        vh = nn.relu(self.pillar_ln1(self.pillar_fc1(vh)))
        vh = self.pillar_ln2(self.pillar_fc2(vh))
        pillar_idx = uniq[:, 0] * (nx * ny) + uniq[:, 1] * ny + uniq[:, 2]
        bev = nn.scatter_add(vh, pillar_idx, cells)
        bev = nn.reshape(bev, (num_frames, nx, ny, PILLAR_FEAT))
        return nn.transpose(bev, (0, 3, 1, 2))

    def backbone_fpn(self, bev: Tensor) -> Tensor:
        """Stems (2x downsample), three bottleneck stages (to 16x), FPN back to 4x."""
        h, w = bev.shape[2], bev.shape[3]
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise nn.ShapeError(f"backbone needs spatial dims divisible by 16, got {h}x{w}")
        x = nn.relu(self.stem_gn1(self.stem1(bev)))
        x = nn.relu(self.stem_gn2(self.stem2(x)))
        x = nn.relu(self.stem_gn3(self.stem3(x)))
        c4 = x
        for block in self.stages[0]:
            c4 = block(c4)
        c8 = c4
        for block in self.stages[1]:
            c8 = block(c8)
        c16 = c8
        for block in self.stages[2]:
            c16 = block(c16)
        p8 = c8 + nn.bilinear_upsample_2x(self.fpn_gn16(self.fpn_lat16(c16)))
        p4 = c4 + nn.bilinear_upsample_2x(self.fpn_gn8(self.fpn_lat8(p8)))
        return self.fpn_out_conv(p4)

    @staticmethod
    def center_feature(fmap: Tensor) -> Tensor:
        """Feature column at the spatial center: index (H // 2, W // 2)."""
        h, w = fmap.shape[2], fmap.shape[3]
        return fmap[:, :, h // 2, w // 2]

    def fuse(self, box_feat: Tensor, point_feat: Tensor) -> Tensor:
        """f_i = box feature + projected point feature."""
        return box_feat + self.point_proj(point_feat)

    # -- full forward -------------------------------------------------------
    def frame_features(self, inp: TrajectoryInput, train: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        m = inp.num_frames
        boxes_arr = np.array([b.to_list() for b in inp.boxes], dtype=cfg.np_dtype)
        feat = None
        if cfg.use_point_encoder:
            keys, pfeats = self.prepare_points(inp, rng)
            bev = self.pillar_encode(keys, pfeats, m)
            fmap = self.backbone_fpn(bev)
            feat = self.point_proj(self.center_feature(fmap))
        if cfg.use_box_encoder:
            box_feat = self.encode_box(boxes_arr)
            feat = box_feat if feat is None else box_feat + feat
        return feat

    def _context_stack(self, f: Tensor, train: bool, rng) -> Tensor:
        cfg = self.cfg
        m = f.shape[0]
        if cfg.variant == "mlp_pool":
            h = nn.mean_pool(f, axis=0)
            for lin, ln in zip(self.pool_linears, self.pool_norms):
                h = nn.relu(ln(lin(h)))
            return f + h
        bias = None
        if cfg.pos_encoding == "alibi":
            bias = alibi_bias(m, cfg.num_heads, cfg.alibi_slope)
        if cfg.window is not None and cfg.window_mode == "mask" and cfg.window < m - 1:
            wm = window_mask(m, cfg.window)[None, :, :]
            bias = wm if bias is None else bias + wm
        g = f
        for block in self.blocks:
            g = block(g, bias, train, rng)
        return g

    def forward(self, inp: TrajectoryInput, train: bool = False,
                rng: np.random.Generator | None = None) -> dict[str, Tensor]:
        """Refine one trajectory; returns differentiable ``poses`` (M, 3) and ``size`` (2,)."""
        cfg = self.cfg
        m = inp.num_frames
        if m < 1:
            raise ValueError("forward needs at least one frame")
        f = self.frame_features(inp, train, rng)
        if cfg.pos_encoding == "absolute":
            f = f + Tensor(sinusoidal_encoding(m, cfg.d_model).astype(cfg.np_dtype))
        g = self._context_stack(f, train, rng)

        boxes_arr = np.array([b.to_list() for b in inp.boxes], dtype=cfg.np_dtype)
        pose_delta = self.pose_head(g)
        poses = Tensor(boxes_arr[:, (0, 1, 4)]) + pose_delta
        size_delta = self.size_head(nn.mean_pool(g, axis=0))
        size = Tensor(boxes_arr[:, 2:4].mean(axis=0)) + size_delta
        return {"poses": poses, "size": size}

    def refine(self, inp: TrajectoryInput) -> RefinedTrajectory:
        """Inference-mode forward decoded to plain poses and a positive size."""
        with nn.no_grad():
            out = self.forward(inp, train=False)
        poses = tuple(Pose(float(x), float(y), float(t)) for x, y, t in out["poses"].data)
        l, w = (float(v) for v in out["size"].data)
        return RefinedTrajectory(poses, (max(l, 1e-3), max(w, 1e-3)))


def save_model(net: RefinerNet, path, extra_header: dict[str, str] | None = None) -> None:
    header = dict(net.cfg.to_kv())
    header["format"] = "refiner-model"
    if extra_header:
        header.update(extra_header)
    nn.save_checkpoint(path, net.state_arrays(), header)


def load_model(path) -> tuple[RefinerNet, dict[str, str]]:
    arrays, header = nn.load_checkpoint(path)
    if header.get("format") != "refiner-model":
        raise nn.CheckpointError(f"not a model checkpoint: format={header.get('format')!r}")
    cfg = ModelConfig.from_kv(header)
    net = RefinerNet(cfg)
    try:
        net.load_state_arrays(arrays)
    except ValueError as exc:
        raise nn.CheckpointError(str(exc)) from exc
    return net, header
