"""Keyboard actions to camera trajectories and ray embeddings.

Parses a small action script, integrates it into per-frame poses, exports
the trajectory as CSV, and renders one pose as a Plücker ray map.
"""
import numpy as np

from worldloop.camera import (CameraPose, Intrinsics, parse_action_script,
                              action_to_trajectory, pose_to_plucker,
                              pool_plucker_map, trajectory_to_csv)

script = """
# forward, quarter turn left, forward again, then hover
W 25 0.05
ArrowLeft 15 0.05 0.1047
W 25 0.05
Space 10 0.05
Idle 5
"""

segments = parse_action_script(script)
traj = action_to_trajectory(segments, CameraPose.identity())
print(f"{len(segments)} segments -> {len(traj)} poses")
print("start position:", traj.poses[0].position)
print("end position:  ", np.round(traj.poses[-1].position, 3))
print("end forward:   ", np.round(traj.poses[-1].forward(), 3))

csv_text = trajectory_to_csv(traj)
print("\nfirst three CSV rows:")
print("\n".join(csv_text.splitlines()[:4]))

pmap = pose_to_plucker(traj.poses[-1], Intrinsics(), height=8, width=8)
d = pmap.channels[..., :3]
m = pmap.channels[..., 3:]
print("\nray map:", pmap.channels.shape)
print("max |d|-1:", np.abs(np.linalg.norm(d, axis=-1) - 1).max())
print("max |d.m|:", np.abs((d * m).sum(axis=-1)).max())

pooled = pool_plucker_map(pmap, (4, 4))
print("pooled to token grid:", pooled.shape)
