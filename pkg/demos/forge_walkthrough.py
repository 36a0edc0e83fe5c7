"""Forge a synthetic episode into a screen-aligned trace and check it against ground truth.

Walks one orbit-camera scene through the forging steps by hand: event
chunking, camera-motion compensation onto a keypoint grid, speed retargeting
and depth rescaling. The scene generator knows the true world motion, so each
stage can be compared with the closed-form answer.

    python3 demos/forge_walkthrough.py [--seed 3]
"""

from __future__ import annotations

import argparse

import numpy as np

from tracespace.core import GridSpec, project_world_to_screen
from tracespace.forge import (ForgeConfig, align_to_reference, apply_depth_rescale, assemble_triplets,
                              assign_tracks_to_grid, chunk_events, rescale_depth, retarget_speed)
from tracespace.synth import SceneSpec, gen_scene


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    grid = GridSpec(20, 20, 128, 128)
    spec = SceneSpec(seed=args.seed, camera_path="orbit", grid=grid, episode_len=48)
    scene = gen_scene(spec)
    print(f"scene: {scene.truth['object']} moves {scene.truth['direction']}, camera path {spec.camera_path}")
    print(f"instructions: {scene.instructions}")

    cfg = ForgeConfig(horizon=32, grid=grid)
    chunks = chunk_events(scene.tracks, cfg.motion_threshold, cfg.min_chunk_len)
    print(f"event chunks (frames): {[(c.start_frame, c.end_frame) for c in chunks]}")

    # the camera orbits, yet static table points must stay put on screen
    chunk = chunks[0]
    raw = align_to_reference(scene.tracks, chunk, grid)
    # the camera has moved by the chunk start, so recover which track each cell took
    cam = scene.tracks.cameras[chunk.start_frame]
    first = project_world_to_screen(scene.tracks.world_points[:, chunk.start_frame], cam)
    ids = assign_tracks_to_grid(grid.positions(), first[:, :2])
    moving = np.isin(ids, scene.truth["moving_indices"])
    still = raw.points[~moving, :, :2] - raw.points[~moving, :1, :2]
    print(f"static keypoints: max screen drift {np.abs(still).max():.2e} px over {raw.points.shape[1]} frames")

    trace = retarget_speed(raw, cfg.horizon)
    step = np.linalg.norm(np.diff(trace.points[moving], axis=1)[..., :2], axis=-1)
    print(f"retargeted to {trace.points.shape[1]} frames; "
          f"moving keypoint step length {step.mean():.2f} +- {step.std():.2f} px")

    # a mis-scaled depth estimate is pulled back onto the sensor scale
    sensor = scene.depths[chunk.start_frame].astype(np.float64)
    estimate = np.where(sensor > 0, 1.7 * sensor, 0.0)
    dmap = rescale_depth(estimate, sensor, cfg.blur_sigma)
    valid = sensor > 0
    print(f"depth ratio map: median {np.median(dmap.ratio[valid]):.4f} (expected {1 / 1.7:.4f})")
    scaled = trace.points.copy()
    scaled[..., 2] *= 1.7
    fixed, _ = apply_depth_rescale(type(trace)(scaled, grid, trace.mask, True, trace.camera), dmap)
    print(f"rescaled trace depth error: {np.abs(fixed.points[..., 2] - trace.points[..., 2]).max():.2e} m")

    # the packaged path does all of the above and should land on the true endpoint
    sample = assemble_triplets(scene.tracks, scene.images, scene.depths, scene.instructions, cfg, "demo")[0]
    want = project_world_to_screen(scene.tracks.world_points[ids, chunk.end_frame - 1], cam)
    want[:, :2] += grid.positions() - first[ids, :2]
    err = np.abs(sample.trace.points[:, -1] - want)
    print(f"forged endpoint vs closed form: {err[:, :2].max():.3f} px, {1000 * err[:, 2].max():.3f} mm")


if __name__ == "__main__":
    main()
