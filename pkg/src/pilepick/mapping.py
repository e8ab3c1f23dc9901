"""Object-level occupancy mapping.

Each detected instance owns a sparse voxel grid of log-odds occupancy,
updated additively per observation and clamped to [-2.0, +3.5].  Detections
are associated to instances by mask IoU against the instances rendered into
the live frame.  Multi-view pose hypotheses that agree within a tolerance
are averaged to replace the partial volume with a full posed shape model.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geom, percept
from .geom import Pose
from .percept import Camera, Detection, NoiseParams

LOGODDS_MIN = -2.0
LOGODDS_MAX = 3.5
P_HIT = 0.7
P_MISS = 0.4
LEAF_RESOLUTION = 0.01
IOU_THRESHOLD = 0.4
CONFIDENCE_THRESHOLD = 0.75
K_REQUIRED = 3
CLUSTER_TOL = 0.02

MAP_FORMAT = "pilepick/map"
FORMAT_VERSION = 1


class TargetNotFound(KeyError):
    pass


def logodds_update(l_prev: float, p_obs: float) -> float:
    """One Bayesian occupancy update in log-odds form, clamped."""
    if not 0.0 < p_obs < 1.0:
        raise ValueError("p_obs must be strictly inside (0,1)")
    l_new = l_prev + math.log(p_obs / (1.0 - p_obs))
    return min(max(l_new, LOGODDS_MIN), LOGODDS_MAX)


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


class OcTree:
    """Sparse voxel map: occupied-leaf dictionary keyed by integer index.

    Unobserved voxels carry no node (prior p = 0.5, log-odds 0).
    """

    def __init__(self, resolution: float = LEAF_RESOLUTION):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = resolution
        self.nodes: dict[tuple[int, int, int], float] = {}

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.atleast_2d(points) / self.resolution).astype(np.int64)

    def index_to_center(self, indices: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(indices).astype(np.float64) + 0.5) * self.resolution

    def log_odds(self, index) -> float:
        return self.nodes.get(tuple(int(i) for i in index), 0.0)

    def occupancy(self, index) -> float:
        return float(logistic(self.log_odds(index)))

    def update(self, index, p_obs: float) -> float:
        key = tuple(int(i) for i in index)
        l_new = logodds_update(self.nodes.get(key, 0.0), p_obs)
        self.nodes[key] = l_new
        return l_new

    def update_many(self, indices: np.ndarray, p_obs: float, counts=None) -> None:
        """Apply p_obs to each voxel `counts` times, clamping per application.

        Repeated addition (not count*logit) keeps batched fusion bit-identical
        to the one-observation-at-a-time definition.
        """
        indices = np.atleast_2d(indices)
        if len(indices) == 0:
            return
        if counts is None:
            counts = np.ones(len(indices), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64).copy()
        for idx, cnt in zip(indices, counts):
            key = (int(idx[0]), int(idx[1]), int(idx[2]))
            l_cur = self.nodes.get(key, 0.0)
            for _ in range(int(cnt)):
                l_cur = logodds_update(l_cur, p_obs)
            self.nodes[key] = l_cur

    def occupied_indices(self, min_log_odds: float = 0.0) -> np.ndarray:
        """Voxel indices with L > min_log_odds, sorted lexicographically."""
        keys = [k for k, l in self.nodes.items() if l > min_log_odds]
        if not keys:
            return np.zeros((0, 3), dtype=np.int64)
        arr = np.array(sorted(keys), dtype=np.int64)
        return arr

    def occupied_centers(self, min_log_odds: float = 0.0) -> np.ndarray:
        idx = self.occupied_indices(min_log_odds)
        if len(idx) == 0:
            return np.zeros((0, 3))
        return self.index_to_center(idx)

    @property
    def voxel_count(self) -> int:
        return sum(1 for l in self.nodes.values() if l > 0.0)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both empty."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(a & b)) / union


def _ray_voxels(origin: np.ndarray, points: np.ndarray, resolution: float):
    """Voxels crossed by rays origin->point, excluding each endpoint voxel.

    Integer-grid traversal: sample along the dominant-axis step count and
    round to voxel indices; deterministic and endpoint-exact.
    """
    points = np.atleast_2d(points)
    if len(points) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    # continuous index coordinates: center of voxel i sits at i
    o = origin / resolution - 0.5
    p = points / resolution - 0.5
    delta = p - o
    n_steps = np.ceil(np.abs(delta).max(axis=1)).astype(np.int64)
    n_steps = np.maximum(n_steps, 1)
    n_max = int(n_steps.max())
    # fractions strictly before 1.0 so the endpoint sample is excluded
    ts = np.arange(n_max, dtype=np.float64)[None, :] / n_steps[:, None]
    valid = np.arange(n_max)[None, :] < n_steps[:, None]
    samples = o[None, None, :] + ts[:, :, None] * delta[:, None, :]
    vox = np.rint(samples).astype(np.int64)
    end_vox = np.rint(p).astype(np.int64)
    not_end = np.any(vox != end_vox[:, None, :], axis=2)
    keep = valid & not_end
    return vox[keep]


@dataclass
class Instance:
    """One mapped object: occupancy volume plus accumulated pose evidence."""

    id: int
    category: int
    octree: OcTree
    hypotheses: list = field(default_factory=list)  # [(view_index, Pose), ...]
    view_count: int = 0
    replaced_pose: Pose | None = None


class InstanceMap:
    """All mapped instances plus the camera history of the scan."""

    def __init__(self, resolution: float = LEAF_RESOLUTION,
                 confidence_threshold: float = CONFIDENCE_THRESHOLD,
                 iou_threshold: float = IOU_THRESHOLD):
        self.resolution = resolution
        self.confidence_threshold = confidence_threshold
        self.iou_threshold = iou_threshold
        self.instances: list[Instance] = []
        self.cameras: list[Camera] = []
        self._next_id = 0

    def instance(self, instance_id: int) -> Instance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(instance_id)

    def _new_instance(self, category: int) -> Instance:
        inst = Instance(self._next_id, category, OcTree(self.resolution))
        self._next_id += 1
        self.instances.append(inst)
        return inst

    def merge_overlapping(self, min_overlap: float = 0.3) -> int:
        """Fuse same-category instances whose occupied volumes coincide.

        Mask association only sees the faces mapped so far, so a thin object
        scanned from opposite sides can fragment into per-view instances
        covering the same space.  Volume overlap |A&B| / min(|A|,|B|) over
        occupied voxel indices catches those; distinct touching objects only
        share boundary voxels and stay apart.  Returns the merge count.
        """
        merged = 0
        changed = True
        while changed:
            changed = False
            for i, a in enumerate(self.instances):
                occ_a = {tuple(v) for v in a.octree.occupied_indices()}
                if not occ_a:
                    continue
                for b in self.instances[i + 1:]:
                    if b.category != a.category:
                        continue
                    occ_b = {tuple(v) for v in b.octree.occupied_indices()}
                    if not occ_b:
                        continue
                    inter = len(occ_a & occ_b)
                    if inter / min(len(occ_a), len(occ_b)) <= min_overlap:
                        continue
                    for key, l_b in b.octree.nodes.items():
                        l_new = a.octree.nodes.get(key, 0.0) + l_b
                        a.octree.nodes[key] = min(max(l_new, LOGODDS_MIN),
                                                  LOGODDS_MAX)
                    a.hypotheses.extend(b.hypotheses)
                    a.view_count += b.view_count
                    self.instances.remove(b)
                    merged += 1
                    changed = True
                    break
                if changed:
                    break
        return merged

    def render_instance_masks(self, camera: Camera) -> list[tuple[Instance, np.ndarray]]:
        """All instances splatted into the live frame with a shared z-buffer.

        Each occupied voxel becomes a filled square; the nearest voxel owns a
        contested pixel, so instances occlude each other the way the mapped
        objects would.
        """
        h, w = camera.height, camera.width
        zbuf = np.full((h, w), np.inf)
        owner = np.full((h, w), -1, dtype=np.int64)
        for pos, inst in enumerate(self.instances):
            centers = inst.octree.occupied_centers()
            if len(centers) == 0:
                continue
            u, v, rng = camera.project(centers)
            ok = rng > 0
            half = 0.5 * camera.fx * self.resolution
            for uu, vv, rr in zip(u[ok], v[ok], rng[ok]):
                hs = int(math.ceil(half / rr))
                r0 = max(int(vv) - hs, 0)
                r1 = min(int(vv) + hs + 1, h)
                c0 = max(int(uu) - hs, 0)
                c1 = min(int(uu) + hs + 1, w)
                if r1 <= r0 or c1 <= c0:
                    continue
                tile = zbuf[r0:r1, c0:c1]
                closer = rr < tile
                tile[closer] = rr
                owner[r0:r1, c0:c1][closer] = pos
        return [(inst, owner == pos) for pos, inst in enumerate(self.instances)]

    def to_dict(self) -> dict:
        out = {
            "format": MAP_FORMAT,
            "version": FORMAT_VERSION,
            "resolution": self.resolution,
            "instances": [],
        }
        for inst in self.instances:
            voxels = [[int(i), int(j), int(k), self.nodes_value(inst, (i, j, k))]
                      for (i, j, k) in sorted(inst.octree.nodes.keys())]
            out["instances"].append({
                "id": inst.id,
                "category": inst.category,
                "view_count": inst.view_count,
                "voxels": voxels,
                "hypotheses": [[int(view), [float(x) for x in pose.to_array()]]
                               for view, pose in inst.hypotheses],
                "replaced_pose": ([float(x) for x in inst.replaced_pose.to_array()]
                                  if inst.replaced_pose is not None else None),
            })
        return out

    @staticmethod
    def nodes_value(inst: Instance, key) -> float:
        return float(inst.octree.nodes[key])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    def replace_poses(self, catalog, k_required: int = K_REQUIRED,
                      tol: float = CLUSTER_TOL) -> None:
        """Run pose-consensus CAD replacement on every instance."""
        for inst in self.instances:
            shape = catalog[inst.category]
            poses = [pose for _, pose in inst.hypotheses]
            inst.replaced_pose = try_cad_replace(poses, shape.offsets, k_required, tol)


def integrate_view(imap: InstanceMap, detections: list[Detection], camera: Camera,
                   scene_depth: np.ndarray | None = None,
                   view_index: int | None = None) -> dict:
    """Fuse one view's detections into the map.

    Returns a report {"matched": [(det_idx, instance_id)], "new": [...],
    "ignored": [det_idx]}.  Low-confidence detections are ignored; the rest
    fuse into the best-IoU instance above the threshold or found new ones.
    scene_depth is accepted for interface stability; association renders the
    map alone, so mutual occlusion comes from the z-buffer, not live depth.
    """
    if view_index is None:
        view_index = len(imap.cameras)
    imap.cameras.append(camera)

    report = {"matched": [], "new": [], "ignored": []}
    rendered = imap.render_instance_masks(camera)
    dirs = camera.ray_directions().reshape(camera.height, camera.width, 3)
    origin = camera.pose.position

    for det_idx, det in enumerate(detections):
        if det.confidence < imap.confidence_threshold:
            report["ignored"].append(det_idx)
            continue
        best_inst = None
        best_iou = 0.0
        for inst, mask in rendered:
            iou = mask_iou(mask, det.mask)
            if iou > best_iou:
                best_iou = iou
                best_inst = inst
        if best_inst is not None and best_iou > imap.iou_threshold:
            report["matched"].append((det_idx, best_inst.id))
            target = best_inst
        else:
            target = imap._new_instance(det.category)
            report["new"].append((det_idx, target.id))
        _fuse_detection(target, det, dirs, origin, view_index)
    return report


def _fuse_detection(inst: Instance, det: Detection, dirs: np.ndarray,
                    origin: np.ndarray, view_index: int) -> None:
    sel = det.mask & np.isfinite(det.depth)
    if sel.any():
        t = det.depth[sel]
        points = origin + t[:, None] * dirs[sel]
        tree = inst.octree
        hit_idx = tree.world_to_index(points)
        miss_vox = _ray_voxels(origin, points, tree.resolution)
        # a surface voxel crossed by a neighboring ray gets its misses first
        if len(miss_vox):
            uniq, counts = np.unique(miss_vox, axis=0, return_counts=True)
            tree.update_many(uniq, P_MISS, counts)
        uniq, counts = np.unique(hit_idx, axis=0, return_counts=True)
        tree.update_many(uniq, P_HIT, counts)
    if det.pose_estimate is not None:
        inst.hypotheses.append((view_index, det.pose_estimate))
    inst.view_count += 1


def try_cad_replace(hypotheses: list[Pose], model_points: np.ndarray,
                    k_required: int = K_REQUIRED, tol: float = CLUSTER_TOL) -> Pose | None:
    """Consensus pose from multi-view hypotheses, or None.

    Pairwise agreement = mean point-to-point distance between the posed model
    clouds.  A hypothesis with at least k_required-1 partners within tol wins;
    the returned pose averages the agreeing cluster (positions component-wise,
    quaternions by sign-aligned normalized mean).
    """
    n = len(hypotheses)
    if n == 0:
        return None
    model_points = np.atleast_2d(model_points)
    clouds = [h.apply(model_points) for h in hypotheses]
    partners = [[] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.mean(np.linalg.norm(clouds[i] - clouds[j], axis=1)))
            if d <= tol:
                partners[i].append(j)
                partners[j].append(i)
    best = None
    for i in range(n):
        if len(partners[i]) >= k_required - 1:
            if best is None or len(partners[i]) > len(partners[best]):
                best = i
    if best is None:
        return None
    cluster = [best] + partners[best]
    positions = np.mean([hypotheses[i].position for i in cluster], axis=0)
    ref = hypotheses[best].orientation
    quats = []
    for i in cluster:
        q = hypotheses[i].orientation
        quats.append(-q if float(np.dot(q, ref)) < 0.0 else q)
    q_mean = np.mean(quats, axis=0)
    return Pose(positions, geom.quat_canonical(q_mean))


def query_target(imap: InstanceMap, category: int):
    """(instance id, replaced pose or None, occupied voxel centers).

    Picks the instance of the category with the most occupied voxels,
    breaking ties by lower id.
    """
    candidates = [inst for inst in imap.instances if inst.category == category]
    if not candidates:
        raise TargetNotFound(f"no mapped instance of category {category}")
    best = max(candidates, key=lambda inst: (inst.octree.voxel_count, -inst.id))
    return best.id, best.replaced_pose, best.octree.occupied_centers()


def orbit_scan(scene, catalog, noise: NoiseParams | None = None, n_views: int = 8,
               radius: float = 0.5, elevation_deg: float = 45.0,
               resolution: float = LEAF_RESOLUTION,
               confidence_threshold: float = CONFIDENCE_THRESHOLD,
               replace: bool = True, k_required: int = K_REQUIRED,
               tol: float = CLUSTER_TOL) -> InstanceMap:
    """Scripted multi-view scan of a scene into a fresh InstanceMap."""
    if noise is None:
        noise = NoiseParams.zero()
    imap = InstanceMap(resolution, confidence_threshold)
    for view_index, camera in enumerate(percept.orbit_cameras(n_views, radius, elevation_deg)):
        depth, _ = percept.render(scene, camera)
        detections = percept.oracle_detect(scene, camera, noise, view_index)
        integrate_view(imap, detections, camera, depth, view_index)
    imap.merge_overlapping()
    if replace:
        imap.replace_poses(catalog, k_required, tol)
    return imap
