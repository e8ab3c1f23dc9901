"""Observation construction for the extraction policy.

Everything the network sees is canonicalized to the grasp point: the 128x128
heightmap is centered on the grasp XY, object positions get the grasp XY
subtracted, and past end-effector poses are shifted the same way.  Heights
stay absolute above the z=0 workspace plane.

Coordinate layout: heightmap cell (r, c) covers the XY point
(grasp_x + (c-64)*0.004, grasp_y + (64-r)*0.004), so +x grows rightward
along columns and +y grows upward along decreasing rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .geom import Pose

HEIGHTMAP_SIZE = 128
CELL_SIZE = 0.004
HEIGHT_CLIP = 0.5
HALF = HEIGHTMAP_SIZE // 2

SUCTION_AXIS = np.array([0.0, 0.0, -1.0])


class TargetNotVisible(RuntimeError):
    """No visible surface to grasp."""


def select_grasp(points: np.ndarray, normals: np.ndarray) -> Pose:
    """Suction grasp on the visible surface.

    Position is the centroid of the visible points; the suction axis is
    aligned anti-parallel to the outward normal at the point nearest the
    centroid (a flat top therefore yields the identity orientation).
    """
    points = np.atleast_2d(points)
    if points.size == 0:
        raise TargetNotVisible("empty visible surface")
    normals = np.atleast_2d(normals)
    centroid = points.mean(axis=0)
    nearest = int(np.argmin(np.linalg.norm(points - centroid, axis=1)))
    orientation = geom.shortest_arc(SUCTION_AXIS, -normals[nearest])
    return Pose(centroid, orientation)


def _cell_axes():
    cols = (np.arange(HEIGHTMAP_SIZE) - HALF) * CELL_SIZE
    rows = (HALF - np.arange(HEIGHTMAP_SIZE)) * CELL_SIZE
    return cols, rows  # grasp-relative x per column, y per row


def build_heightmap(scene, grasp: Pose, body_ids=None, return_owner: bool = False):
    """Top-down max-height grid centered on the grasp XY.

    One orthographic sample per cell footprint: per sphere, the height maxed
    over the cell's 4 mm square is taken at the in-square point nearest the
    sphere axis (exact for spheres).  Empty cells are 0; heights clip to
    [0, 0.5].  All arithmetic runs on grasp-relative coordinates so shifting
    scene and grasp together cannot change a single bit.
    """
    gx, gy = float(grasp.position[0]), float(grasp.position[1])
    cols, rows = _cell_axes()
    half_cell = CELL_SIZE / 2.0
    grid = np.zeros((HEIGHTMAP_SIZE, HEIGHTMAP_SIZE))
    owner = np.full((HEIGHTMAP_SIZE, HEIGHTMAP_SIZE), -1, dtype=np.int64)

    cell_x = cols[None, :]  # (1, W)
    cell_y = rows[:, None]  # (H, 1)
    for body in scene.bodies:
        if body_ids is not None and body.id not in body_ids:
            continue
        centers, radii = body.world_spheres()
        for c, r in zip(centers, radii):
            rel_x = c[0] - gx
            rel_y = c[1] - gy
            nx = np.clip(rel_x, cell_x - half_cell, cell_x + half_cell)
            ny = np.clip(rel_y, cell_y - half_cell, cell_y + half_cell)
            d2 = (nx - rel_x) ** 2 + (ny - rel_y) ** 2
            inside = d2 < r * r
            if not inside.any():
                continue
            h = np.where(inside, c[2] + np.sqrt(np.where(inside, r * r - d2, 0.0)), 0.0)
            better = h > grid
            grid[better] = h[better]
            owner[better] = body.id
    np.clip(grid, 0.0, HEIGHT_CLIP, out=grid)
    if return_owner:
        return grid, owner
    return grid


@dataclass
class PoseObservation:
    """Per-object tokens: target flag, category one-hot, 7-D pose."""

    flags: np.ndarray       # (O,) float, exactly one 1.0 when target present
    categories: np.ndarray  # (O, C) one-hot rows
    poses: np.ndarray       # (O, 7) grasp-canonicalized [x y z qx qy qz qw]

    @property
    def count(self) -> int:
        return len(self.flags)


def build_pose_obs(instances, grasp: Pose, n_categories: int = 8) -> PoseObservation:
    """instances: iterable of (category, Pose, is_target).

    Positions get (-grasp_x, -grasp_y, 0) added; orientations pass through.
    """
    instances = list(instances)
    o = len(instances)
    flags = np.zeros(o)
    cats = np.zeros((o, n_categories))
    poses = np.zeros((o, 7))
    gx, gy = float(grasp.position[0]), float(grasp.position[1])
    for i, (category, pose, is_target) in enumerate(instances):
        if not 0 <= category < n_categories:
            raise ValueError(f"category {category} outside [0, {n_categories})")
        flags[i] = 1.0 if is_target else 0.0
        cats[i, category] = 1.0
        arr = pose.to_array()
        arr[0] -= gx
        arr[1] -= gy
        poses[i] = arr
    if flags.sum() > 1.0:
        raise ValueError("more than one target flag set")
    return PoseObservation(flags, cats, poses)


@dataclass
class ObservationBundle:
    """Everything the Q-network consumes for one decision step."""

    heightmap: np.ndarray        # (128, 128) float32, meters
    pose_obs: PoseObservation
    past_ee: np.ndarray          # (N, 8): 7-D canonicalized pose + validity bit
    grasp_pose: Pose

    def __post_init__(self):
        self.heightmap = np.asarray(self.heightmap, dtype=np.float32)
        if self.heightmap.shape != (HEIGHTMAP_SIZE, HEIGHTMAP_SIZE):
            raise ValueError(f"heightmap must be {HEIGHTMAP_SIZE}x{HEIGHTMAP_SIZE}")


def empty_past_ee(n_steps: int) -> np.ndarray:
    return np.zeros((n_steps, 8))


def push_past_ee(past: np.ndarray, ee_pose: Pose, grasp: Pose) -> np.ndarray:
    """Append a grasp-canonicalized EE pose into the first free slot."""
    out = past.copy()
    arr = ee_pose.to_array()
    arr[0] -= float(grasp.position[0])
    arr[1] -= float(grasp.position[1])
    free = np.nonzero(out[:, 7] == 0.0)[0]
    if len(free) == 0:
        out[:-1] = out[1:]
        slot = len(out) - 1
    else:
        slot = int(free[0])
    out[slot, :7] = arr
    out[slot, 7] = 1.0
    return out


def heightmap_to_png(grid: np.ndarray, path) -> None:
    """16-bit grayscale PNG at millimeter quantization."""
    from PIL import Image

    mm = np.clip(np.round(np.asarray(grid, dtype=np.float64) * 1000.0), 0, 65535)
    Image.fromarray(mm.astype(np.uint16)).save(path)


def heightmap_from_png(path) -> np.ndarray:
    from PIL import Image

    mm = np.asarray(Image.open(path), dtype=np.float64)
    return mm / 1000.0
