"""Cameras, voxel grids and LiDAR depth targets.

Run: python demos/01_geometry.py
"""
import numpy as np

from fbocc.geometry import LidarFrame, VoxelGridSpec, lidar_to_image, project_ego_point, ring_rig, voxel_index

grid = VoxelGridSpec.occ3d()
print(f"occupancy grid {grid.min_corner} -> {grid.max_corner} at {grid.voxel_size} m: shape {grid.shape}")
for p in [(0, 0, 0), (12.3, -4.1, 1.0), (40, 0, 0)]:
    print(f"  ego point {p} -> voxel {voxel_index(p, grid)}")

rig = ring_rig()
print(f"\nsix-camera ring rig, images {rig[0].height}x{rig[0].width}")
target = (10.0, 2.0, 0.5)
for k, cam in enumerate(rig):
    hit = project_ego_point(target, cam)
    where = "not visible" if hit is None else f"pixel ({hit[0]:.1f}, {hit[1]:.1f}) at depth {hit[2]:.2f} m"
    print(f"  camera {k}: {target} is {where}")

front = rig[0]
u, v, z = project_ego_point(target, front)
back = front.unproject(u, v, z)
print(f"\nunprojecting that pixel and depth gives {np.round(back, 9)} again")

# two returns along the same ray: the nearer one wins the pixel
center = front.cam_to_ego.translation
far = center + 2 * (np.array(target) - center)
frame = LidarFrame([target, far], [4, 13])
print("\nsparse depth image from two LiDAR returns:", lidar_to_image(frame, front))
