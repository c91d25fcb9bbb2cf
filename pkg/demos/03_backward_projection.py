"""Backward view transform: BEV cells query the images and are refined by what they see.

Run: python demos/03_backward_projection.py
"""
import numpy as np

from fbocc.backward_vtm import BackwardLayerWeights, aggregate_hits, backward_project, compress_voxel_to_bev
from fbocc.forward_vtm import DepthBinSpec, EncoderConfig, EncoderWeights, encode_cameras, splat_cameras
from fbocc.geometry import ring_rig
from fbocc.occ_head import expand_bev_to_voxel
from fbocc.scene import demo_scene, desk_grid, ground_truth, render_images

grid = desk_grid()
rig = ring_rig(6, height=128, width=352)
spec = demo_scene(1, n_frames=1, rig=rig, grid=grid)
images = render_images(ground_truth(spec, grid, 0).labels, grid, rig)

bins = DepthBinSpec()
encoded = encode_cameras(images, EncoderWeights.random(EncoderConfig(), 0))
views = [(feat, depth) for feat, depth, _ in encoded]
vol = splat_cameras(encoded, rig, bins, grid)
bev = compress_voxel_to_bev(vol)
print(f"voxel volume {vol.values.shape} averaged over height into BEV {bev.values.shape}")

_, hits, weight = aggregate_hits(views, rig, bins, grid, 4)
print(f"BEV cells seen by at least one camera: {(hits > 0).sum()} of {hits.size}")
print(f"cells with nonzero depth support:     {(weight > 0).sum()}")

layer = BackwardLayerWeights.random(bev.values.shape[0], seed=1)
refined = backward_project(bev, views, rig, bins, grid, layer, 4)
changed = np.any(refined.values != bev.values, axis=0)
print(f"refined cells: {changed.sum()}; cells without support pass through unchanged: "
      f"{np.array_equal(refined.values[:, ~changed], bev.values[:, ~changed])}")

back = expand_bev_to_voxel(refined, grid.shape[2])
print(f"broadcast back over height: {back.values.shape}, ready to add to the forward volume")
