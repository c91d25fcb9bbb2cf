"""Camera-only 3D semantic occupancy with forward and backward view transforms.

Everything is plain numpy. The most used names are re-exported here; the
submodules hold the rest.
"""
from .backward_vtm import BackwardLayerWeights, BevFeatureMap, backward_project, backward_refine, compress_voxel_to_bev
from .classes import CLASS_NAMES, FREE, NUM_CLASSES, STATIC_CLASSES
from .forward_vtm import (
    DepthBinSpec,
    DepthDistribution,
    EncoderConfig,
    EncoderWeights,
    ImageFeatureMap,
    VoxelFeatureVolume,
    lift,
    multi_camera_forward,
    predict_depth_and_context,
    splat,
)
from .geometry import CameraModel, LidarFrame, RigidTransform, VoxelGridSpec, project_ego_point, ring_rig, voxel_index
from .losses import LossWeights, occupancy_losses, total_loss
from .metrics import ConfusionMatrix, accumulate, iou_per_class, iou_report, miou
from .occ_head import HeadConfig, HeadWeights, OccupancyGrid, PredictionResult, align_voxel_features, decode, head_forward
from .pipeline import ModelWeights, PipelineConfig, PipelineResult, run_pipeline
from .postprocess import EnsembleMember, ensemble, search_weights, temporal_tta, tta_flips
from .scene import Primitive, SceneSpec, demo_scene, ground_truth

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
