"""Baseline extraction trajectories: naive, straight-up, and RRT-Connect.

All planners emit end-effector poses for the attached grasp frame.  The
RRT-Connect variant plans in 6-D (translation + Euler angles) against sphere
compounds posed at estimated object positions, with the grasped payload
rigidly attached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .geom import Pose

RESET_POSE = Pose(np.array([0.0, 0.0, 0.5]))  # suction pointing down
DEFAULT_STEPS = 5

CONTACT_TOL = 0.005   # obstacles closer than this at start are grace-listed
GRACE_RADIUS = 0.05   # grace list applies within this travel from start
FLOOR_ID = -1


def naive_trajectory(grasp: Pose, reset: Pose, steps: int = DEFAULT_STEPS) -> list[Pose]:
    """Uniform pose interpolation from grasp to reset; steps+1 waypoints."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return [geom.interpolate(grasp, reset, k / steps) for k in range(steps + 1)]


def heuristic_up(grasp: Pose, height: float, steps: int = DEFAULT_STEPS) -> list[Pose]:
    """Straight +Z lift by height, orientation frozen; steps+1 waypoints."""
    if height <= 0:
        raise ValueError("height must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out = []
    for k in range(steps + 1):
        p = grasp.position.copy()
        p[2] += height * k / steps
        out.append(Pose(p, grasp.orientation))
    return out


@dataclass
class RRTParams:
    step_trans: float = 0.03       # m per tree extension
    step_rot_deg: float = 15.0     # deg per tree extension
    goal_bias: float = 0.2
    max_iterations: int = 3000
    seed: int = 0
    edge_resolution: float = 0.01  # m of metric length per collision check
    shortcut_attempts: int = 100

    def __post_init__(self):
        for name in ("step_trans", "step_rot_deg", "goal_bias",
                     "max_iterations", "edge_resolution", "shortcut_attempts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class CollisionWorld:
    """Payload-vs-obstacle sphere distance queries for the planner.

    Obstacles are world-frame sphere compounds built from estimated object
    poses (never the target); the payload is the target's compound rigidly
    attached behind the end effector at the grasp transform.  The floor
    plane z=0 is an implicit obstacle with id FLOOR_ID.
    """

    def __init__(self, payload_offsets, payload_radii, attach: Pose,
                 obstacles, workspace_bbox=None, floor: bool = True):
        """obstacles: iterable of (obstacle_id, centers (M,3), radii (M,))."""
        self.payload_offsets = np.asarray(payload_offsets, dtype=np.float64)
        self.payload_radii = np.asarray(payload_radii, dtype=np.float64)
        self.attach = attach  # payload pose in the EE frame
        self.floor = floor
        ids, centers, radii = [], [], []
        for oid, c, r in obstacles:
            c = np.atleast_2d(np.asarray(c, dtype=np.float64))
            r = np.atleast_1d(np.asarray(r, dtype=np.float64))
            ids.extend([int(oid)] * len(r))
            centers.append(c)
            radii.append(r)
        self.obstacle_ids = np.array(ids, dtype=np.int64)
        self.obstacle_centers = (np.concatenate(centers)
                                 if centers else np.zeros((0, 3)))
        self.obstacle_radii = np.concatenate(radii) if radii else np.zeros(0)
        if workspace_bbox is None:
            from .sim import WORKSPACE_BBOX

            workspace_bbox = WORKSPACE_BBOX
        self.workspace_bbox = np.asarray(workspace_bbox, dtype=np.float64)

    @staticmethod
    def from_scene_body(scene, target_id: int, grasp: Pose,
                        estimated_poses: dict | None = None) -> "CollisionWorld":
        """World with the target as payload and every other body an obstacle.

        estimated_poses maps body_id -> Pose and overrides the true poses
        (planning from a perception estimate); bodies absent from the dict
        fall back to their true pose.
        """
        target = scene.body(target_id)
        attach = geom.compose(geom.inverse(grasp), target.pose)
        obstacles = []
        for body in scene.bodies:
            if body.id == target_id:
                continue
            pose = body.pose
            if estimated_poses is not None and body.id in estimated_poses:
                pose = estimated_poses[body.id]
            centers = geom.quat_rotate(pose.orientation,
                                       body.shape.offsets) + pose.position
            obstacles.append((body.id, centers, body.shape.radii))
        return CollisionWorld(target.shape.offsets, target.shape.radii,
                              attach, obstacles)

    def payload_spheres(self, ee_pose: Pose):
        t = geom.compose(ee_pose, self.attach)
        centers = geom.quat_rotate(t.orientation, self.payload_offsets) + t.position
        return centers, self.payload_radii

    def distances(self, ee_pose: Pose):
        """(obstacle ids, clearance per obstacle sphere) plus the floor row."""
        pc, pr = self.payload_spheres(ee_pose)
        ids = self.obstacle_ids
        if len(self.obstacle_radii):
            d = np.linalg.norm(pc[:, None, :] - self.obstacle_centers[None, :, :],
                               axis=2)
            clear = (d - pr[:, None] - self.obstacle_radii[None, :]).min(axis=0)
        else:
            clear = np.zeros(0)
        if self.floor:
            ids = np.append(ids, FLOOR_ID)
            clear = np.append(clear, float((pc[:, 2] - pr).min()))
        return ids, clear

    def min_distance(self, ee_pose: Pose, exempt=frozenset()) -> float:
        ids, clear = self.distances(ee_pose)
        keep = ~np.isin(ids, list(exempt)) if exempt else np.ones(len(ids), bool)
        if not keep.any():
            return math.inf
        return float(clear[keep].min())

    def start_exemptions(self, start: Pose, tol: float = CONTACT_TOL) -> frozenset:
        """Obstacle ids already touching the payload at the start pose."""
        ids, clear = self.distances(start)
        return frozenset(int(i) for i in ids[clear < tol])

    def collides(self, ee_pose: Pose, exempt=frozenset(),
                 start: Pose | None = None) -> bool:
        """Positive-clearance test; exemptions apply only near the start.

        Obstacles in exempt are ignored while the EE is within GRACE_RADIUS
        of start (the grasped payload necessarily touches its neighbors at
        the moment of grasping).
        """
        active_exempt = frozenset()
        if start is not None and exempt:
            if np.linalg.norm(ee_pose.position - start.position) < GRACE_RADIUS:
                active_exempt = exempt
        return self.min_distance(ee_pose, active_exempt) <= 0.0


# -- 6-D configuration helpers ----------------------------------------------


def _pose_to_config(p: Pose) -> np.ndarray:
    return np.array([*p.position, *geom.euler_from_quat(p.orientation)])


def _config_to_pose(c: np.ndarray) -> Pose:
    return Pose(c[:3], geom.quat_from_euler(c[3], c[4], c[5]))


def _wrap_angles(d: np.ndarray) -> np.ndarray:
    return (d + math.pi) % (2.0 * math.pi) - math.pi


def _config_delta(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    d[3:] = _wrap_angles(d[3:])
    return d


def _metric(d: np.ndarray, rot_weight: float) -> float:
    return float(np.linalg.norm(d[:3]) + rot_weight * np.linalg.norm(d[3:]))


def _config_lerp(a: np.ndarray, d: np.ndarray, t: float) -> np.ndarray:
    return a + d * t


class _Tree:
    def __init__(self, root: np.ndarray):
        self.configs = [root]
        self.parents = [-1]

    def nearest(self, c: np.ndarray, rot_weight: float) -> int:
        best, best_d = 0, math.inf
        for i, q in enumerate(self.configs):
            d = _metric(_config_delta(q, c), rot_weight)
            if d < best_d:
                best, best_d = i, d
        return best

    def add(self, c: np.ndarray, parent: int) -> int:
        self.configs.append(c)
        self.parents.append(parent)
        return len(self.configs) - 1

    def path_to_root(self, i: int) -> list[np.ndarray]:
        out = []
        while i >= 0:
            out.append(self.configs[i])
            i = self.parents[i]
        return out


def _edge_clear(world: CollisionWorld, a: np.ndarray, b: np.ndarray,
                params: RRTParams, rot_weight: float, exempt, start: Pose) -> bool:
    d = _config_delta(a, b)
    n = max(1, int(math.ceil(_metric(d, rot_weight) / params.edge_resolution)))
    for k in range(n + 1):
        pose = _config_to_pose(_config_lerp(a, d, k / n))
        if world.collides(pose, exempt, start):
            return False
    return True


def rrt_connect(start: Pose, goal: Pose, world: CollisionWorld,
                params: RRTParams | None = None,
                fallback_steps: int = DEFAULT_STEPS) -> tuple[list[Pose], bool]:
    """Bidirectional RRT in 6-D pose space; falls back to the naive path.

    Returns (waypoints, found).  found=True paths are shortcut-smoothed and
    every edge re-checks collision-free at edge_resolution; on failure the
    result is exactly naive_trajectory(start, goal, fallback_steps) with
    found=False.
    """
    if params is None:
        params = RRTParams()
    rng = np.random.default_rng(params.seed)
    rot_weight = params.step_trans / math.radians(params.step_rot_deg)
    step = params.step_trans * 2.0  # metric cap per extension (trans + rot)
    exempt = world.start_exemptions(start)
    c_start = _pose_to_config(start)
    c_goal = _pose_to_config(goal)

    lo, hi = world.workspace_bbox
    z_hi = max(float(hi[2]), start.position[2], goal.position[2]) + 0.1

    def sample() -> np.ndarray:
        if rng.random() < params.goal_bias:
            return c_goal.copy()
        return np.array([
            rng.uniform(lo[0] - 0.1, hi[0] + 0.1),
            rng.uniform(lo[1] - 0.1, hi[1] + 0.1),
            rng.uniform(0.0, z_hi),
            rng.uniform(-math.pi, math.pi),
            rng.uniform(-math.pi / 2, math.pi / 2),
            rng.uniform(-math.pi, math.pi),
        ])

    def extend(tree: _Tree, c: np.ndarray):
        """One bounded step toward c; returns (node index or None, reached)."""
        i = tree.nearest(c, rot_weight)
        d = _config_delta(tree.configs[i], c)
        dist = _metric(d, rot_weight)
        if dist < 1e-12:
            return i, True
        t = min(1.0, step / dist)
        new = _config_lerp(tree.configs[i], d, t)
        if not _edge_clear(world, tree.configs[i], new, params, rot_weight,
                           exempt, start):
            return None, False
        return tree.add(new, i), t >= 1.0

    def connect(tree: _Tree, c: np.ndarray):
        """Greedy repeated extension toward c; returns node index or None."""
        while True:
            i, reached = extend(tree, c)
            if i is None:
                return None
            if reached:
                return i

    t_start = _Tree(c_start)
    t_goal = _Tree(c_goal)
    path = None
    if not world.collides(goal, exempt, start):
        a, b = t_start, t_goal
        for _ in range(params.max_iterations):
            c = sample()
            i, _ = extend(a, c)
            if i is not None:
                j = connect(b, a.configs[i])
                if j is not None:
                    if a is t_start:
                        path = a.path_to_root(i)[::-1] + b.path_to_root(j)[1:]
                    else:
                        path = b.path_to_root(j)[::-1] + a.path_to_root(i)[1:]
                    break
            a, b = b, a
    if path is None:
        return naive_trajectory(start, goal, fallback_steps), False

    path = _shortcut(path, world, params, rot_weight, exempt, start, rng)
    path = _densify(path, params, rot_weight)
    return [_config_to_pose(c) for c in path], True


def _shortcut(path, world, params, rot_weight, exempt, start, rng):
    """Random-pair shortcutting; keeps endpoints, never adds collisions."""
    path = list(path)
    for _ in range(params.shortcut_attempts):
        if len(path) <= 2:
            break
        i, j = sorted(rng.integers(0, len(path), size=2))
        if j - i < 2:
            continue
        if _edge_clear(world, path[i], path[j], params, rot_weight, exempt, start):
            path = path[: i + 1] + path[j:]
    return path


def _densify(path, params, rot_weight):
    """Subdivide long smoothed edges so executed interpolation stays near
    the checked straight-line sweep."""
    out = [path[0]]
    for a, b in zip(path[:-1], path[1:]):
        d = _config_delta(a, b)
        n = max(1, int(math.ceil(_metric(d, rot_weight) / params.step_trans)))
        for k in range(1, n + 1):
            out.append(_config_lerp(a, d, k / n))
    return out
