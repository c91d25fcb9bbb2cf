"""Forward view transform: image features times depth probabilities, summed into voxels.

Run: python demos/02_forward_splat.py
"""
import numpy as np

from fbocc.forward_vtm import DepthBinSpec, EncoderConfig, EncoderWeights, multi_camera_forward, predict_depth_and_context
from fbocc.geometry import ring_rig
from fbocc.scene import demo_scene, desk_grid, ground_truth, render_images

grid = desk_grid()
rig = ring_rig(6, height=128, width=352)
spec = demo_scene(0, n_frames=1, rig=rig, grid=grid)
gt = ground_truth(spec, grid, 0)
images = render_images(gt.labels, grid, rig)
print(f"rendered {len(images)} camera images of shape {images[0].shape}")

cfg = EncoderConfig()
weights = EncoderWeights.random(cfg, seed=0)
feat, depth, _ = predict_depth_and_context(images[0], weights)
print(f"front camera: context {feat.values.shape}, depth distribution over {depth.probs.shape[0]} bins")
print(f"  depth probabilities sum to 1 per cell: {np.allclose(depth.probs.sum(axis=0), 1)}")

bins = DepthBinSpec()
vol = multi_camera_forward(images, rig, weights, bins, grid)
touched = np.any(vol.values != 0, axis=0)
print(f"\nvoxel volume {vol.values.shape}: {touched.sum()} of {touched.size} voxels received features")
print("splatting is linear, so the volume is the sum of per-camera volumes:")
parts = sum(multi_camera_forward([im], [cam], weights, bins, grid).values for im, cam in zip(images, rig))
print(f"  max difference {np.abs(parts - vol.values).max():.2e}")
