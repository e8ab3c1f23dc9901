"""Synthetic camera and perception oracle.

A pinhole camera (+Z forward, +X right, +Y down) raycast against the scene's
sphere compounds gives depth (Euclidean range) and per-pixel instance ids.
Visibility of a body is its pixel count in the full scene divided by its
pixel count rendered alone; the detection and pose oracles degrade with
(1 - visibility) and replace a learned perception stack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .geom import Pose

BACKGROUND = np.inf
DEFAULT_WIDTH = 160
DEFAULT_HEIGHT = 120
DEFAULT_FOCAL = 240.0


@dataclass
class Camera:
    """Pinhole camera; pose maps camera coordinates into world coordinates."""

    pose: Pose
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    fx: float = DEFAULT_FOCAL
    fy: float = DEFAULT_FOCAL
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in world frame, flattened row-major (H*W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        xs, ys = np.meshgrid(u, v)
        dirs = np.stack([xs, ys, np.ones_like(xs)], axis=-1).reshape(-1, 3)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rot = geom.quat_to_matrix(self.pose.orientation)
        return dirs @ rot.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points -> (u, v, range). Points behind the camera get range -1."""
        points = np.atleast_2d(points)
        rot = geom.quat_to_matrix(self.pose.orientation)
        local = (points - self.pose.position) @ rot
        z = local[:, 2]
        ok = z > 1e-9
        u = np.where(ok, self.cx + self.fx * local[:, 0] / np.where(ok, z, 1.0), -1.0)
        v = np.where(ok, self.cy + self.fy * local[:, 1] / np.where(ok, z, 1.0), -1.0)
        rng = np.where(ok, np.linalg.norm(local, axis=1), -1.0)
        return u, v, rng


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at eye with +Z toward target and +Y as image-down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = geom.normalize(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = geom.normalize(right)
    down = np.cross(fwd, right)
    rot = np.column_stack([right, down, fwd])
    return Pose(eye, geom.matrix_to_quat(rot))


def top_camera(height: float = 1.0, width: int = DEFAULT_WIDTH,
               img_height: int = DEFAULT_HEIGHT, focal: float = DEFAULT_FOCAL) -> Camera:
    """Straight-down camera over the workspace origin."""
    pose = Pose([0.0, 0.0, height], geom.quat_from_axis_angle([1.0, 0.0, 0.0], math.pi))
    return Camera(pose, width, img_height, focal, focal)


def orbit_cameras(n: int = 8, radius: float = 0.5, elevation_deg: float = 45.0,
                  center=(0.0, 0.0, 0.0), width: int = DEFAULT_WIDTH,
                  height: int = DEFAULT_HEIGHT, focal: float = 110.0) -> list[Camera]:
    """Scripted scan: n poses on a circle looking at the workspace center.

    The default focal length is short so the whole workspace stays in frame
    from 0.5 m away; objects near the bbox edge must not leave the frustum.
    """
    center = np.asarray(center, dtype=np.float64)
    elev = math.radians(elevation_deg)
    cams = []
    for k in range(n):
        az = 2.0 * math.pi * k / n
        eye = center + radius * np.array(
            [math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)])
        cams.append(Camera(look_at(eye, center), width, height, focal, focal))
    return cams


def render(scene, camera: Camera, body_ids=None, with_hits: bool = False):
    """Raycast the scene: (depth (H,W) range in m, ids (H,W) int32, -1 empty).

    with_hits=True additionally returns (points (H*W,3), normals (H*W,3))
    valid at hit pixels: exact sphere surface points and outward normals.
    """
    h, w = camera.height, camera.width
    n_px = h * w
    dirs = camera.ray_directions()
    origin = camera.pose.position
    best_t = np.full(n_px, BACKGROUND)
    best_id = np.full(n_px, -1, dtype=np.int32)
    if with_hits:
        best_center = np.zeros((n_px, 3))

    for body in scene.bodies:
        if body_ids is not None and body.id not in body_ids:
            continue
        centers, radii = body.world_spheres()
        for c, r in zip(centers, radii):
            oc = origin - c
            b = dirs @ oc
            disc = b * b - (oc @ oc - r * r)
            hit = disc > 0.0
            if not hit.any():
                continue
            t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), BACKGROUND)
            closer = hit & (t > 1e-9) & (t < best_t)
            if closer.any():
                best_t[closer] = t[closer]
                best_id[closer] = body.id
                if with_hits:
                    best_center[closer] = c

    depth = best_t.reshape(h, w)
    ids = best_id.reshape(h, w)
    if not with_hits:
        return depth, ids
    hit_px = best_id >= 0
    points = np.zeros((n_px, 3))
    normals = np.zeros((n_px, 3))
    points[hit_px] = origin + best_t[hit_px, None] * dirs[hit_px]
    nv = points[hit_px] - best_center[hit_px]
    normals[hit_px] = nv / np.linalg.norm(nv, axis=1, keepdims=True)
    return depth, ids, points, normals


def visibility(scene, camera: Camera, body_id: int) -> float:
    """Pixels of the body in the full render / pixels rendered alone."""
    scene.body(body_id)  # raises UnknownBodyError
    _, ids_full = render(scene, camera)
    _, ids_alone = render(scene, camera, body_ids={body_id})
    alone = int(np.count_nonzero(ids_alone == body_id))
    if alone == 0:
        return 0.0
    return float(np.count_nonzero(ids_full == body_id)) / alone


def visible_surface(scene, target_id: int, camera: Camera | None = None):
    """(points (M,3), normals (M,3)) of the target visible from above."""
    if camera is None:
        camera = top_camera()
    _, ids, points, normals = render(scene, camera, with_hits=True)
    sel = (ids == target_id).reshape(-1)
    return points[sel], normals[sel]


@dataclass
class NoiseParams:
    """Visibility-conditioned perception noise.

    Detection probability is 1 - miss_scale*(1 - visibility); pose noise is
    Gaussian with per-axis translation sigma trans_sigma*(1 - visibility) and
    a random-axis rotation of angle |N(0, rot_sigma*(1 - visibility))| deg.
    """

    miss_scale: float = 0.5
    trans_sigma: float = 0.02
    rot_sigma: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.miss_scale <= 1.0:
            raise ValueError("miss_scale must be in [0,1]")
        if self.trans_sigma < 0 or self.rot_sigma < 0:
            raise ValueError("sigmas must be >= 0")

    @staticmethod
    def zero(seed: int = 0) -> "NoiseParams":
        return NoiseParams(0.0, 0.0, 0.0, seed)

    def rng(self, *key: int) -> np.random.Generator:
        """Independent stream for a (purpose, view, body, ...) tuple."""
        return np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=key))


# stream tags for NoiseParams.rng
_STREAM_DETECT = 0
_STREAM_POSE = 1


@dataclass
class Detection:
    """One oracle detection: mask + depth patch + category + confidence."""

    mask: np.ndarray          # (H, W) bool
    depth: np.ndarray         # (H, W) range, inf outside the mask
    category: int
    confidence: float
    pose_estimate: Pose | None = None
    body_id: int = -1         # ground-truth id, diagnostics only

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.mask))


def oracle_pose(true_pose: Pose, phi: float, noise: NoiseParams,
                rng: np.random.Generator) -> Pose:
    """Perturb a pose by visibility-scaled Gaussian noise."""
    if not 0.0 <= phi <= 1.0:
        raise ValueError("visibility must be in [0,1]")
    fade = 1.0 - phi
    dp = rng.normal(0.0, noise.trans_sigma * fade, size=3)
    axis = rng.normal(size=3)
    nrm = np.linalg.norm(axis)
    axis = axis / nrm if nrm > 1e-12 else np.array([0.0, 0.0, 1.0])
    angle = abs(rng.normal(0.0, math.radians(noise.rot_sigma) * fade))
    dq = geom.quat_from_axis_angle(axis, angle)
    return Pose(true_pose.position + dp,
                geom.quat_multiply(dq, true_pose.orientation))


def oracle_detect(scene, camera: Camera, noise: NoiseParams,
                  view_index: int = 0) -> list[Detection]:
    """Detections for one view; deterministic given (noise.seed, view_index)."""
    depth, ids = render(scene, camera)
    out = []
    for body in scene.bodies:
        mask = ids == body.id
        if not mask.any():
            continue
        _, ids_alone = render(scene, camera, body_ids={body.id})
        alone = int(np.count_nonzero(ids_alone == body.id))
        phi = float(np.count_nonzero(mask)) / alone if alone else 0.0
        coin = noise.rng(_STREAM_DETECT, view_index, body.id).random()
        if coin >= 1.0 - noise.miss_scale * (1.0 - phi):
            continue
        est = oracle_pose(body.pose, phi, noise,
                          noise.rng(_STREAM_POSE, view_index, body.id))
        out.append(Detection(
            mask=mask,
            depth=np.where(mask, depth, BACKGROUND),
            category=body.shape.category,
            confidence=phi,
            pose_estimate=est,
            body_id=body.id,
        ))
    return out
