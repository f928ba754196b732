"""BEV auto-labelling at desk scale: scene synthesis, tracking, and learned trajectory refinement."""

from .geometry import (
    BevBox,
    Pose,
    aligned_iou,
    box_corners,
    canonicalize_headings,
    crop_points,
    normalize_angle,
    rotated_iou,
    to_object_frame,
    to_trajectory_frame,
)
from .datagen import MotionProfile, NoiseModel, Scene, SceneConfig, generate_scene, read_scene, write_scene
from .tracker import Detection, Tracklet, TrackerConfig, TrackerState, associate_gt, track_scene
from .trajectory import RefinedTrajectory, TrajectoryInput, TrajectorySample, build_input, extract_samples
from .model import ModelConfig, RefinerNet, alibi_bias, load_model, save_model, sinusoidal_encoding
from .training import (
    AugmentConfig,
    LossConfig,
    TrainConfig,
    TrajectoryRefiner,
    iou_loss,
    regression_loss,
    smooth_l1,
    total_loss,
    train,
)
from .metrics import TrackScore, compare_reports, evaluate_set, motion_state, track_iou

__version__ = "0.1.0"
