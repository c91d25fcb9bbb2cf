"""End-to-end composition: encoder -> F-VTM -> compress -> B-VTM -> fuse -> head.

``run_pipeline`` renders a synthetic scene, runs the model (optionally with
flip and temporal TTA), scores it against the exact ground truth and returns
a JSON-ready report plus per-stage timings.
"""
from __future__ import annotations

import hashlib
import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import container
from .backward_vtm import BackwardLayerWeights, backward_refine, compress_voxel_to_bev
from .forward_vtm import DepthBinSpec, EncoderConfig, EncoderWeights, encode_cameras, splat_cameras
from .geometry import VoxelGridSpec
from .losses import occupancy_losses
from .metrics import accumulate, iou_report
from .occ_head import (
    HeadConfig,
    HeadWeights,
    OccupancyGrid,
    PredictionResult,
    align_voxel_features,
    decode,
    expand_bev_to_voxel,
    fuse,
    head_forward,
    relative_pose,
)
from .postprocess import CameraInputs, TemporalRecord, check_flip_symmetric, flip_camera_inputs, temporal_tta, tta_flips
from .scene import SceneSpec, desk_grid, ground_truth, rasterize_scene, render_images


@dataclass(frozen=True)
class PipelineConfig:
    grid: dict = field(default_factory=lambda: desk_grid().to_json())
    depth_bins: int = 80
    min_depth: float = 2.0
    max_depth: float = 42.0
    stride: int = 16
    encoder_hidden: int = 16
    channels: int = 16
    head_hidden: int = 16
    n_heights: int = 4
    backward_layers: int = 1
    history_frames: int = 1
    flip_tta: bool = False
    temporal_tta: bool = False
    near_radius: float = 8.0
    frame: int = -1

    @property
    def voxel_grid(self) -> VoxelGridSpec:
        return VoxelGridSpec.from_json(self.grid)

    @property
    def bins(self) -> DepthBinSpec:
        return DepthBinSpec(self.depth_bins, self.min_depth, self.max_depth)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(3, self.encoder_hidden, self.channels, self.depth_bins, stride=self.stride)

    @property
    def head(self) -> HeadConfig:
        return HeadConfig(self.channels, self.head_hidden)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        obj = json.loads(Path(path).read_text())
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class ModelWeights:
    encoder: EncoderWeights
    backward: list
    head: HeadWeights

    @classmethod
    def random(cls, config: PipelineConfig, seed: int = 0) -> "ModelWeights":
        return cls(
            EncoderWeights.random(config.encoder, seed),
            [BackwardLayerWeights.random(config.channels, seed + 1 + i) for i in range(config.backward_layers)],
            HeadWeights.random(config.head, seed + 1 + config.backward_layers),
        )

    def tensors(self) -> dict:
        out = {f"encoder.{k}": np.asarray(v) for k, v in self.encoder.tensors.items()}
        for i, b in enumerate(self.backward):
            out[f"backward.{i}.weight"] = b.weight
            out[f"backward.{i}.bias"] = b.bias
        out.update({f"head.{k}": np.asarray(v) for k, v in self.head.tensors.items()})
        return out

    def save(self, path) -> None:
        container.write_container(path, self.tensors())

    @classmethod
    def load(cls, path, config: PipelineConfig) -> "ModelWeights":
        t = container.read_container(path)
        enc = {k[len("encoder."):]: v for k, v in t.items() if k.startswith("encoder.")}
        head = {k[len("head."):]: v for k, v in t.items() if k.startswith("head.")}
        layers = []
        for i in range(config.backward_layers):
            try:
                layers.append(BackwardLayerWeights(t[f"backward.{i}.weight"], t[f"backward.{i}.bias"]))
            except KeyError as exc:
                raise ValueError(f"{exc.args[0]}: missing from weights file") from None
        return cls(EncoderWeights(config.encoder, enc), layers, HeadWeights(config.head, head))


class StageTimer:
    """Accumulates wall-clock seconds per named stage."""

    def __init__(self):
        self.seconds = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0


@contextmanager
def _maybe(timer, name):
    if timer is None:
        yield
    else:
        with timer.stage(name):
            yield


def predict(inputs: CameraInputs, weights: ModelWeights, config: PipelineConfig, threads: int = 1, timer=None):
    """One model evaluation; ``inputs.history`` holds ``(images, prev_from_current)``."""
    grid, bins = config.voxel_grid, config.bins
    with _maybe(timer, "encode"):
        encoded = encode_cameras(inputs.images, weights.encoder, threads)
    with _maybe(timer, "forward_vtm"):
        vol = splat_cameras(encoded, inputs.rig, bins, grid, threads)
    with _maybe(timer, "compress"):
        bev = compress_voxel_to_bev(vol)
    with _maybe(timer, "backward_vtm"):
        views = [(feat, depth) for feat, depth, _ in encoded]
        bev = backward_refine(bev, views, inputs.rig, bins, grid, weights.backward, config.n_heights)
    with _maybe(timer, "fuse"):
        fused = fuse(vol, expand_bev_to_voxel(bev))
    if inputs.history:
        with _maybe(timer, "temporal_align"):
            extra = np.zeros_like(fused.values)
            for images, rel in inputs.history:
                past = splat_cameras(encode_cameras(images, weights.encoder, threads), inputs.rig, bins, grid, threads)
                extra += align_voxel_features(past, rel, grid).values
            fused = type(fused)(fused.values + extra, grid)
    with _maybe(timer, "head"):
        return head_forward(fused, weights.head)


def bundled_scene_path() -> Path:
    return Path(resources.files("fbocc") / "data" / "demo_scene.json")


def _frame_index(spec: SceneSpec, frame: int) -> int:
    n = len(spec.ego_trajectory)
    f = frame % n if frame < 0 else frame
    if not 0 <= f < n:
        raise ValueError(f"frame {frame} outside trajectory of length {n}")
    return f


def _sha256(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


@dataclass(eq=False)
class PipelineResult:
    prediction: PredictionResult
    labels: np.ndarray
    ground_truth: OccupancyGrid
    report: dict
    timings: dict

    def report_json(self) -> str:
        return json.dumps(self.report, sort_keys=True, indent=2) + "\n"


def run_pipeline(scene=None, weights: ModelWeights = None, config: PipelineConfig = None, seed: int = 0, threads: int = 1, predictor=None) -> PipelineResult:
    """Render ``scene``, predict the configured frame and score it.

    ``scene`` may be a ``SceneSpec`` or a path to its JSON (default: the
    bundled demo scene). ``predictor(inputs) -> PredictionResult`` replaces
    the model when given, e.g. to inject a ground-truth oracle.
    """
    t_start = time.perf_counter()
    timer = StageTimer()
    config = config or PipelineConfig()
    if scene is None:
        scene = bundled_scene_path()
    spec = scene if isinstance(scene, SceneSpec) else SceneSpec.load(scene)
    grid = config.voxel_grid
    frame = _frame_index(spec, config.frame)
    if weights is None and predictor is None:
        with timer.stage("weights"):
            weights = ModelWeights.random(config, seed)
    if config.flip_tta:
        check_flip_symmetric(grid)

    lookback = max(config.history_frames, 1) if config.temporal_tta else 0
    needed = list(range(max(0, frame - lookback - config.history_frames), frame + 1))
    with timer.stage("scene"):
        # only the scored frame needs a visibility mask; earlier frames just need images
        gt = ground_truth(spec, grid, frame, threads)
        labels_at = {f: gt.labels if f == frame else rasterize_scene(spec, grid, f) for f in needed}
        images = {f: render_images(labels_at[f], grid, spec.rig, threads) for f in needed}

    def inputs_for(f):
        hist = []
        for p in range(max(0, f - config.history_frames), f):
            hist.append((images[p], relative_pose(spec.ego_trajectory[f], spec.ego_trajectory[p])))
        return CameraInputs(images[f], list(spec.rig), hist)

    def model(inp):
        if predictor is not None:
            return predictor(inp)
        return predict(inp, weights, config, threads, None if config.flip_tta else timer)

    def run(f):
        inp = inputs_for(f)
        if config.flip_tta:
            return tta_flips(model, inp, flip_camera_inputs)
        return model(inp)

    with timer.stage("flip_tta" if config.flip_tta else "model"):
        pred = run(frame)
    if config.temporal_tta and frame > 0:
        with timer.stage("temporal_tta"):
            history = [TemporalRecord(run(p), spec.ego_trajectory[p]) for p in range(max(0, frame - lookback), frame)]
            pred = temporal_tta(pred, history, spec.ego_trajectory[frame], grid, near_radius=config.near_radius)

    with timer.stage("decode"):
        labels = decode(pred)
    with timer.stage("metrics"):
        cm = accumulate(labels, gt, use_mask=True)
        table = iou_report(cm)
        losses = occupancy_losses(pred, gt, grid)
    # "model" nests the finer stages when they were timed individually
    timings = dict(timer.seconds)
    report = {
        "frame": frame,
        "grid_shape": list(grid.shape),
        "visible_voxels": int(gt.camera_mask.sum()),
        "per_class_iou": table["per_class_iou"],
        "miou": table["miou"],
        "losses": losses,
        "prediction_sha256": _sha256(labels.astype(np.uint8)),
        "config": config.to_json(),
        "seed": seed,
    }
    total = time.perf_counter() - t_start
    stage_sum = sum(v for k, v in timings.items() if k not in _NESTED)
    timing_report = {"stages": timings, "stage_sum": stage_sum, "total": total}
    return PipelineResult(pred, labels, gt, report, timing_report)


# finer stages recorded inside "model"
_NESTED = frozenset({"encode", "forward_vtm", "compress", "backward_vtm", "fuse", "temporal_align", "head"})
