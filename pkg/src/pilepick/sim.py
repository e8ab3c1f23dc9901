"""Deterministic rigid-body pile simulator.

Bodies are compounds of spheres; contacts (sphere-sphere and sphere-ground)
are resolved by sequential impulses with Coulomb friction, restitution 0,
followed by direct position projection.  Fixed timestep 1/240 s.  The solver
is written on scalar floats: it is the hot loop, and small-array numpy calls
cost more than plain arithmetic there.

Everything is deterministic: identical (scene, seed, command sequence)
produces a bit-identical MotionLog.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .geom import Pose

DT = 1.0 / 240.0
GRAVITY = np.array([0.0, 0.0, -9.81])
FRICTION = 0.5
SOLVER_ITERATIONS = 10
POSITION_PASSES = 2
POSITION_BETA = 0.5
PENETRATION_SLOP = 5e-4
ANGULAR_DAMPING = 0.998  # per step; provides rolling resistance
TIP_SPEED = 0.1  # m/s, kinematic extraction speed
TIP_ANGULAR_SPEED = math.radians(45.0)  # rad/s for pure-rotation segments
SETTLE_SPEED = 1e-3
SPEED_LIMIT = 100.0

WORKSPACE_BBOX = np.array([[-0.25, -0.25, 0.0], [0.25, 0.25, 0.5]])
SPAWN_BBOX = np.array([[-0.15, -0.15, 0.3], [0.15, 0.15, 0.6]])

SCENE_FORMAT = "pilepick/scene"
REPLAY_FORMAT = "pilepick/replay"
FORMAT_VERSION = 1


class SimulationDiverged(RuntimeError):
    """A body exceeded the speed limit; the integration blew up."""


class PileGenerationError(RuntimeError):
    """Could not place a body inside the workspace within the retry budget."""


class UnknownBodyError(KeyError):
    pass


@dataclass
class BodyShape:
    """Sphere-compound collision shape with a category label."""

    category: int
    spheres: list  # [(offset (3,), radius), ...]
    mass: float
    name: str = ""

    def __post_init__(self):
        if len(self.spheres) == 0:
            raise ValueError("shape needs at least one sphere")
        self.spheres = [(np.asarray(c, dtype=np.float64), float(r)) for c, r in self.spheres]
        if any(r <= 0 for _, r in self.spheres):
            raise ValueError("sphere radii must be positive")
        if self.mass <= 0:
            raise ValueError("mass must be positive")

    @property
    def offsets(self) -> np.ndarray:
        return np.array([c for c, _ in self.spheres])

    @property
    def radii(self) -> np.ndarray:
        return np.array([r for _, r in self.spheres])

    def inertia(self) -> np.ndarray:
        """Body-frame inertia tensor; mass split across spheres by volume."""
        r3 = self.radii**3
        masses = self.mass * r3 / r3.sum()
        inertia = np.zeros((3, 3))
        for (c, r), m in zip(self.spheres, masses):
            inertia += m * (0.4 * r * r * np.eye(3) + np.dot(c, c) * np.eye(3) - np.outer(c, c))
        return inertia


def default_catalog() -> list[BodyShape]:
    """The 8 parametric object categories used for pile generation (C=8)."""

    def grid(xs, ys, zs):
        return [(np.array([x, y, z]), 0.0) for x in xs for y in ys for z in zs]

    shapes = []
    # 0: cube ~0.06 m edge
    cube = [([sx * 0.015, sy * 0.015, sz * 0.015], 0.015)
            for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    shapes.append(BodyShape(0, cube, 0.10, "cube"))
    # 1: tall box / column ~0.032 x 0.032 x 0.096
    tall = [([0, 0, z], 0.016) for z in (-0.032, -0.016, 0.0, 0.016, 0.032)]
    shapes.append(BodyShape(1, tall, 0.08, "tall_box"))
    # 2: flat slab ~0.072 x 0.072 x 0.024
    flat = [([x, y, 0.0], 0.012) for x in (-0.024, 0.0, 0.024) for y in (-0.024, 0.0, 0.024)]
    shapes.append(BodyShape(2, flat, 0.09, "flat_box"))
    # 3: cylinder puck, ring of 6 + center
    ring = [([0.02 * math.cos(k * math.pi / 3), 0.02 * math.sin(k * math.pi / 3), 0.0], 0.016)
            for k in range(6)]
    shapes.append(BodyShape(3, ring + [([0, 0, 0], 0.016)], 0.09, "cylinder"))
    # 4: sphere
    shapes.append(BodyShape(4, [([0, 0, 0], 0.03)], 0.08, "sphere"))
    # 5: L-shape, two arms in the xy plane
    lshape = [([x, 0.0, 0.0], 0.014) for x in (-0.028, 0.0, 0.028, 0.056)]
    lshape += [([-0.028, y, 0.0], 0.014) for y in (0.028, 0.056)]
    shapes.append(BodyShape(5, lshape, 0.07, "lshape"))
    # 6: bar ~0.112 long
    bar = [([x, 0.0, 0.0], 0.014) for x in (-0.042, -0.014, 0.014, 0.042)]
    shapes.append(BodyShape(6, bar, 0.06, "bar"))
    # 7: dome (big base sphere + smaller cap)
    dome = [([0, 0, 0], 0.028), ([0, 0, 0.02], 0.02)]
    shapes.append(BodyShape(7, dome, 0.08, "dome"))
    return shapes


@dataclass
class RigidBody:
    id: int
    shape: BodyShape
    pose: Pose
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kinematic: bool = False

    def __post_init__(self):
        self.linear_velocity = np.asarray(self.linear_velocity, dtype=np.float64).copy()
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=np.float64).copy()
        self._inertia_inv_body = np.linalg.inv(self.shape.inertia())
        self._reach = float(np.linalg.norm(self.shape.offsets, axis=1).max())

    @property
    def inv_mass(self) -> float:
        return 0.0 if self.kinematic else 1.0 / self.shape.mass

    def world_spheres(self) -> tuple[np.ndarray, np.ndarray]:
        """(centers (S,3), radii (S,)) of the compound in world frame."""
        rot = geom.quat_to_matrix(self.pose.orientation)
        centers = self.pose.position + self.shape.offsets @ rot.T
        return centers, self.shape.radii

    def speed(self) -> float:
        return float(np.linalg.norm(self.linear_velocity))

    def copy(self) -> "RigidBody":
        return RigidBody(
            self.id, self.shape, self.pose.copy(),
            self.linear_velocity.copy(), self.angular_velocity.copy(), self.kinematic,
        )


class Scene:
    """A pile of rigid bodies over the ground plane z=0."""

    def __init__(self, workspace_bbox=None, gravity=None, rng_seed: int = 0):
        self.bodies: list[RigidBody] = []
        self.workspace_bbox = np.array(workspace_bbox if workspace_bbox is not None
                                       else WORKSPACE_BBOX, dtype=np.float64)
        self.gravity = np.array(gravity if gravity is not None else GRAVITY, dtype=np.float64)
        self.rng_seed = rng_seed
        self.time = 0.0
        self._next_id = 0

    def add_body(self, shape: BodyShape, pose: Pose, kinematic: bool = False) -> RigidBody:
        body = RigidBody(self._next_id, shape, pose, kinematic=kinematic)
        self._next_id += 1
        self.bodies.append(body)
        return body

    def body(self, body_id: int) -> RigidBody:
        for b in self.bodies:
            if b.id == body_id:
                return b
        raise UnknownBodyError(body_id)

    def remove_body(self, body_id: int) -> None:
        self.bodies = [b for b in self.bodies if b.id != body_id]

    def copy(self) -> "Scene":
        other = Scene(self.workspace_bbox.copy(), self.gravity.copy(), self.rng_seed)
        other.time = self.time
        other._next_id = self._next_id
        other.bodies = [b.copy() for b in self.bodies]
        return other

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        catalog = default_catalog()
        bodies = []
        for b in self.bodies:
            entry = {
                "id": b.id,
                "category": b.shape.category,
                "pose": [float(x) for x in b.pose.to_array()],
                "linear_velocity": [float(x) for x in b.linear_velocity],
                "angular_velocity": [float(x) for x in b.angular_velocity],
                "kinematic": bool(b.kinematic),
            }
            cat = catalog[b.shape.category] if 0 <= b.shape.category < len(catalog) else None
            if cat is None or not _same_shape(cat, b.shape):
                entry["spheres"] = [[list(map(float, c)), float(r)] for c, r in b.shape.spheres]
                entry["mass"] = float(b.shape.mass)
            bodies.append(entry)
        return {
            "format": SCENE_FORMAT,
            "version": FORMAT_VERSION,
            "seed": self.rng_seed,
            "time": self.time,
            "workspace_bbox": self.workspace_bbox.tolist(),
            "gravity": self.gravity.tolist(),
            "bodies": bodies,
        }

    @staticmethod
    def from_dict(data: dict) -> "Scene":
        if data.get("format") != SCENE_FORMAT:
            raise ValueError(f"not a scene file (format={data.get('format')!r})")
        scene = Scene(data["workspace_bbox"], data["gravity"], data.get("seed", 0))
        scene.time = data.get("time", 0.0)
        catalog = default_catalog()
        for entry in data["bodies"]:
            if "spheres" in entry:
                shape = BodyShape(entry["category"], [(c, r) for c, r in entry["spheres"]],
                                  entry["mass"])
            else:
                shape = catalog[entry["category"]]
            body = scene.add_body(shape, Pose.from_array(entry["pose"]),
                                  kinematic=entry.get("kinematic", False))
            body.id = entry["id"]
            body.linear_velocity[:] = entry["linear_velocity"]
            body.angular_velocity[:] = entry["angular_velocity"]
        scene._next_id = max((b.id for b in scene.bodies), default=-1) + 1
        return scene

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @staticmethod
    def load(path) -> "Scene":
        with open(path) as f:
            return Scene.from_dict(json.load(f))


def _same_shape(a: BodyShape, b: BodyShape) -> bool:
    if len(a.spheres) != len(b.spheres) or a.mass != b.mass:
        return False
    return all(np.array_equal(ca, cb) and ra == rb
               for (ca, ra), (cb, rb) in zip(a.spheres, b.spheres))


# -- motion logging --------------------------------------------------------


class MotionLog:
    """Per-step poses and speeds of every body during an extraction episode."""

    def __init__(self, body_ids, start_poses, start_time):
        self.body_ids = list(body_ids)
        self.start_poses = np.array(start_poses)  # (B, 7)
        self.start_time = float(start_time)
        self.times: list[float] = []
        self.positions: list[np.ndarray] = []   # each (B, 3)
        self.orientations: list[np.ndarray] = []  # each (B, 4)
        self.speeds: list[np.ndarray] = []      # each (B,)
        self.phases: list[int] = []             # 0 = driven, 1 = settle

    @staticmethod
    def begin(scene: Scene) -> "MotionLog":
        return MotionLog(
            [b.id for b in scene.bodies],
            [b.pose.to_array() for b in scene.bodies],
            scene.time,
        )

    def record(self, scene: Scene, phase: int) -> None:
        self.times.append(scene.time)
        self.positions.append(np.array([b.pose.position for b in scene.bodies]))
        self.orientations.append(np.array([b.pose.orientation for b in scene.bodies]))
        self.speeds.append(np.array([b.speed() for b in scene.bodies]))
        self.phases.append(phase)

    @property
    def n_steps(self) -> int:
        return len(self.times)

    def index_of(self, body_id: int) -> int:
        return self.body_ids.index(body_id)

    def initial_positions(self) -> np.ndarray:
        return self.start_poses[:, :3]

    def final_positions(self) -> np.ndarray:
        if not self.positions:
            return self.initial_positions()
        return self.positions[-1]

    def max_speeds(self) -> np.ndarray:
        if not self.speeds:
            return np.zeros(len(self.body_ids))
        return np.max(np.stack(self.speeds), axis=0)

    @staticmethod
    def concat(segments: list["MotionLog"]) -> "MotionLog":
        if not segments:
            raise ValueError("nothing to concatenate")
        first = segments[0]
        out = MotionLog(first.body_ids, first.start_poses, first.start_time)
        for seg in segments:
            if seg.body_ids != first.body_ids:
                raise ValueError("segments cover different body sets")
            out.times.extend(seg.times)
            out.positions.extend(seg.positions)
            out.orientations.extend(seg.orientations)
            out.speeds.extend(seg.speeds)
            out.phases.extend(seg.phases)
        return out

    def to_dict(self) -> dict:
        return {
            "body_ids": self.body_ids,
            "start_poses": self.start_poses.tolist(),
            "start_time": self.start_time,
            "times": list(self.times),
            "positions": np.array(self.positions).reshape(self.n_steps, -1).tolist(),
            "orientations": np.array(self.orientations).reshape(self.n_steps, -1).tolist(),
            "speeds": np.array(self.speeds).tolist(),
            "phases": list(self.phases),
        }

    @staticmethod
    def from_dict(data: dict) -> "MotionLog":
        log = MotionLog(data["body_ids"], data["start_poses"], data["start_time"])
        n_bodies = len(log.body_ids)
        log.times = list(data["times"])
        log.positions = [np.array(row).reshape(n_bodies, 3) for row in data["positions"]]
        log.orientations = [np.array(row).reshape(n_bodies, 4) for row in data["orientations"]]
        log.speeds = [np.array(row) for row in data["speeds"]]
        log.phases = list(data["phases"])
        return log

    def equals(self, other: "MotionLog") -> bool:
        if self.body_ids != other.body_ids or self.n_steps != other.n_steps:
            return False
        if self.times != other.times or self.phases != other.phases:
            return False
        for a, b in zip(self.positions, other.positions):
            if not np.array_equal(a, b):
                return False
        for a, b in zip(self.orientations, other.orientations):
            if not np.array_equal(a, b):
                return False
        for a, b in zip(self.speeds, other.speeds):
            if not np.array_equal(a, b):
                return False
        return np.array_equal(self.start_poses, other.start_poses)


# -- physics step ----------------------------------------------------------


def _gather_contacts(scene: Scene, margin_dt: float = 0.0):
    """Sphere-sphere and sphere-ground contacts, in deterministic order.

    Returns (ia, ib, point, normal, depth) tuples with body list indices;
    ib == -1 means the ground plane.  Normals point from A toward B.

    margin_dt > 0 adds a speculative detection margin of one step's worth of
    body motion, (|v| + |omega|*reach)*dt per body, so the velocity solver
    sees imminent impacts it would otherwise tunnel past between steps; depth
    stays the actual penetration (negative while still separated).  Position
    projection re-gathers with margin_dt = 0 and corrects true overlap only.
    """
    bodies = scene.bodies
    if not bodies:
        return []
    centers = []
    radii = []
    owner = []
    margins = []
    for i, b in enumerate(bodies):
        c, r = b.world_spheres()
        centers.append(c)
        radii.append(r)
        owner.extend([i] * len(r))
        if margin_dt > 0.0:
            w = b.angular_velocity
            wn = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
            m = (b.speed() + wn * b._reach) * margin_dt
        else:
            m = 0.0
        margins.extend([m] * len(r))
    centers = np.concatenate(centers)
    radii = np.concatenate(radii)
    owner = np.array(owner)
    margins = np.array(margins)
    n_sph = len(radii)

    contacts = []
    # sphere-sphere
    if n_sph > 1:
        diff = centers[:, None, :] - centers[None, :, :]
        dist2 = np.einsum("ijk,ijk->ij", diff, diff)
        reach = radii[:, None] + radii[None, :] + margins[:, None] + margins[None, :]
        hit = dist2 < reach * reach
        iu = np.triu_indices(n_sph, k=1)
        mask = hit[iu] & (owner[iu[0]] != owner[iu[1]])
        ii = iu[0][mask]
        jj = iu[1][mask]
        for i, j in zip(ii.tolist(), jj.tolist()):
            d = math.sqrt(dist2[i, j])
            if d < 1e-12:
                continue  # concentric; skip, position pass cannot resolve a direction
            n = (centers[j] - centers[i]) / d
            depth = radii[i] + radii[j] - d
            point = centers[i] + n * (radii[i] - 0.5 * depth)
            contacts.append((int(owner[i]), int(owner[j]), point, n, depth))
    # sphere-ground (normal from ground up; store as A=body, B=ground, n from A to B = -z)
    below = np.nonzero(centers[:, 2] < radii + margins)[0]
    for k in below.tolist():
        depth = radii[k] - centers[k, 2]
        point = centers[k].copy()
        point[2] = 0.0
        contacts.append((int(owner[k]), -1, point, np.array([0.0, 0.0, -1.0]), depth))
    return contacts


def _solve_velocities(scene: Scene, contacts) -> None:
    bodies = scene.bodies
    inv_mass = [b.inv_mass for b in bodies]
    inv_inertia = []
    for b in bodies:
        if b.kinematic:
            inv_inertia.append(((0.0,) * 3,) * 3)
        else:
            rot = geom.quat_to_matrix(b.pose.orientation)
            m = rot @ b._inertia_inv_body @ rot.T
            inv_inertia.append(tuple(tuple(row) for row in m))
    vel = [[float(v) for v in b.linear_velocity] for b in bodies]
    omg = [[float(w) for w in b.angular_velocity] for b in bodies]

    # precompute per-contact constants
    rows = []
    for ia, ib, point, n, depth in contacts:
        pa = bodies[ia].pose.position
        rax, ray, raz = point[0] - pa[0], point[1] - pa[1], point[2] - pa[2]
        if ib >= 0:
            pb = bodies[ib].pose.position
            rbx, rby, rbz = point[0] - pb[0], point[1] - pb[1], point[2] - pb[2]
        else:
            rbx = rby = rbz = 0.0
        nx, ny, nz = float(n[0]), float(n[1]), float(n[2])
        # friction basis orthogonal to n
        if abs(nz) < 0.9:
            t1x, t1y, t1z = ny * 1.0 - nz * 0.0, nz * 0.0 - nx * 1.0, nx * 0.0 - ny * 0.0
        else:
            t1x, t1y, t1z = ny * 0.0 - nz * 0.0, nz * 1.0 - nx * 0.0, nx * 0.0 - ny * 1.0
        tn = math.sqrt(t1x * t1x + t1y * t1y + t1z * t1z)
        t1x, t1y, t1z = t1x / tn, t1y / tn, t1z / tn
        t2x = ny * t1z - nz * t1y
        t2y = nz * t1x - nx * t1z
        t2z = nx * t1y - ny * t1x

        def eff_mass(dx, dy, dz):
            k = inv_mass[ia] + (inv_mass[ib] if ib >= 0 else 0.0)
            # rA x d
            cx = ray * dz - raz * dy
            cy = raz * dx - rax * dz
            cz = rax * dy - ray * dx
            ii = inv_inertia[ia]
            ix = ii[0][0] * cx + ii[0][1] * cy + ii[0][2] * cz
            iy = ii[1][0] * cx + ii[1][1] * cy + ii[1][2] * cz
            iz = ii[2][0] * cx + ii[2][1] * cy + ii[2][2] * cz
            k += (iy * raz - iz * ray) * dx + (iz * rax - ix * raz) * dy + (ix * ray - iy * rax) * dz
            if ib >= 0:
                cx = rby * dz - rbz * dy
                cy = rbz * dx - rbx * dz
                cz = rbx * dy - rby * dx
                ii = inv_inertia[ib]
                ix = ii[0][0] * cx + ii[0][1] * cy + ii[0][2] * cz
                iy = ii[1][0] * cx + ii[1][1] * cy + ii[1][2] * cz
                iz = ii[2][0] * cx + ii[2][1] * cy + ii[2][2] * cz
                k += (iy * rbz - iz * rby) * dx + (iz * rbx - ix * rbz) * dy + (ix * rby - iy * rbx) * dz
            return k

        kn = eff_mass(nx, ny, nz)
        kt1 = eff_mass(t1x, t1y, t1z)
        kt2 = eff_mass(t2x, t2y, t2z)
        rows.append([ia, ib, rax, ray, raz, rbx, rby, rbz, nx, ny, nz,
                     t1x, t1y, t1z, t2x, t2y, t2z, kn, kt1, kt2, 0.0, 0.0, 0.0])

    for _ in range(SOLVER_ITERATIONS):
        for row in rows:
            (ia, ib, rax, ray, raz, rbx, rby, rbz, nx, ny, nz,
             t1x, t1y, t1z, t2x, t2y, t2z, kn, kt1, kt2, an, at1, at2) = row
            va = vel[ia]
            wa = omg[ia]
            # relative velocity at contact: vB + wB x rB - vA - wA x rA
            rvx = -va[0] - (wa[1] * raz - wa[2] * ray)
            rvy = -va[1] - (wa[2] * rax - wa[0] * raz)
            rvz = -va[2] - (wa[0] * ray - wa[1] * rax)
            if ib >= 0:
                vb = vel[ib]
                wb = omg[ib]
                rvx += vb[0] + (wb[1] * rbz - wb[2] * rby)
                rvy += vb[1] + (wb[2] * rbx - wb[0] * rbz)
                rvz += vb[2] + (wb[0] * rby - wb[1] * rbx)
            # normal impulse (restitution 0): drive vn to zero
            vn = rvx * nx + rvy * ny + rvz * nz
            dj = -vn / kn if kn > 0 else 0.0
            new_an = an + dj
            if new_an < 0.0:
                new_an = 0.0
            dj = new_an - an
            row[20] = new_an
            if dj != 0.0:
                _apply_impulse(vel, omg, inv_mass, inv_inertia, ia, ib,
                               rax, ray, raz, rbx, rby, rbz, dj * nx, dj * ny, dj * nz)
            # friction along t1 / t2, box-clamped to mu * normal impulse
            limit = FRICTION * row[20]
            for (tx, ty, tz, kt, idx) in ((t1x, t1y, t1z, kt1, 21), (t2x, t2y, t2z, kt2, 22)):
                if kt <= 0:
                    continue
                va = vel[ia]
                wa = omg[ia]
                rvx = -va[0] - (wa[1] * raz - wa[2] * ray)
                rvy = -va[1] - (wa[2] * rax - wa[0] * raz)
                rvz = -va[2] - (wa[0] * ray - wa[1] * rax)
                if ib >= 0:
                    vb = vel[ib]
                    wb = omg[ib]
                    rvx += vb[0] + (wb[1] * rbz - wb[2] * rby)
                    rvy += vb[1] + (wb[2] * rbx - wb[0] * rbz)
                    rvz += vb[2] + (wb[0] * rby - wb[1] * rbx)
                vt = rvx * tx + rvy * ty + rvz * tz
                dj = -vt / kt
                acc = row[idx]
                new_acc = acc + dj
                if new_acc > limit:
                    new_acc = limit
                elif new_acc < -limit:
                    new_acc = -limit
                dj = new_acc - acc
                row[idx] = new_acc
                if dj != 0.0:
                    _apply_impulse(vel, omg, inv_mass, inv_inertia, ia, ib,
                                   rax, ray, raz, rbx, rby, rbz, dj * tx, dj * ty, dj * tz)

    for b, v, w in zip(bodies, vel, omg):
        if not b.kinematic:
            b.linear_velocity[:] = v
            b.angular_velocity[:] = w


def _apply_impulse(vel, omg, inv_mass, inv_inertia, ia, ib,
                   rax, ray, raz, rbx, rby, rbz, px, py, pz):
    ma = inv_mass[ia]
    if ma > 0.0:
        va = vel[ia]
        va[0] -= px * ma
        va[1] -= py * ma
        va[2] -= pz * ma
        cx = ray * pz - raz * py
        cy = raz * px - rax * pz
        cz = rax * py - ray * px
        ii = inv_inertia[ia]
        wa = omg[ia]
        wa[0] -= ii[0][0] * cx + ii[0][1] * cy + ii[0][2] * cz
        wa[1] -= ii[1][0] * cx + ii[1][1] * cy + ii[1][2] * cz
        wa[2] -= ii[2][0] * cx + ii[2][1] * cy + ii[2][2] * cz
    if ib >= 0:
        mb = inv_mass[ib]
        if mb > 0.0:
            vb = vel[ib]
            vb[0] += px * mb
            vb[1] += py * mb
            vb[2] += pz * mb
            cx = rby * pz - rbz * py
            cy = rbz * px - rbx * pz
            cz = rbx * py - rby * px
            ii = inv_inertia[ib]
            wb = omg[ib]
            wb[0] += ii[0][0] * cx + ii[0][1] * cy + ii[0][2] * cz
            wb[1] += ii[1][0] * cx + ii[1][1] * cy + ii[1][2] * cz
            wb[2] += ii[2][0] * cx + ii[2][1] * cy + ii[2][2] * cz


def _correct_positions(scene: Scene) -> None:
    bodies = scene.bodies
    for _ in range(POSITION_PASSES):
        contacts = _gather_contacts(scene)
        moved = False
        for ia, ib, point, n, depth in contacts:
            err = depth - PENETRATION_SLOP
            if err <= 0.0:
                continue
            inv_a = bodies[ia].inv_mass
            inv_b = bodies[ib].inv_mass if ib >= 0 else 0.0
            total = inv_a + inv_b
            if total == 0.0:
                continue
            corr = POSITION_BETA * err / total
            if inv_a > 0.0:
                bodies[ia].pose.position -= n * (corr * inv_a)
            if ib >= 0 and inv_b > 0.0:
                bodies[ib].pose.position += n * (corr * inv_b)
            moved = True
        if not moved:
            break


def step(scene: Scene, dt: float = DT) -> None:
    """Advance the scene by dt: gravity, impulses, integration, projection."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    for b in scene.bodies:
        if not b.kinematic:
            b.linear_velocity += scene.gravity * dt

    contacts = _gather_contacts(scene, margin_dt=dt)
    if contacts:
        _solve_velocities(scene, contacts)

    for b in scene.bodies:
        if b.kinematic:
            continue
        b.pose.position += b.linear_velocity * dt
        w = b.angular_velocity
        wn = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
        if wn > 1e-12:
            dq = geom.quat_from_axis_angle(w / wn, wn * dt)
            b.pose.orientation = geom.quat_canonical(geom.quat_multiply(dq, b.pose.orientation))
        b.angular_velocity *= ANGULAR_DAMPING

    if contacts:
        _correct_positions(scene)

    scene.time += dt

    for b in scene.bodies:
        if b.speed() > SPEED_LIMIT:
            raise SimulationDiverged(f"body {b.id} exceeded {SPEED_LIMIT} m/s")


def settle(scene: Scene, timeout: float, threshold: float = SETTLE_SPEED,
           log: MotionLog | None = None, phase: int = 1) -> bool:
    """Step until every body is slower than threshold, or the timeout runs out."""
    steps = int(round(timeout / DT))
    for _ in range(steps):
        step(scene)
        if log is not None:
            log.record(scene, phase)
        if all(b.speed() < threshold for b in scene.bodies):
            return True
    return False


# -- pile generation -------------------------------------------------------


def random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return geom.quat_canonical(q)


def spawn_pile(scene: Scene, catalog: list[BodyShape], n: int, seed: int,
               spawn_bbox=None, max_retries: int = 10) -> None:
    """Drop n random catalog objects one at a time, settling after each."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not catalog:
        raise ValueError("catalog is empty")
    rng = np.random.default_rng(seed)
    bbox = np.array(spawn_bbox if spawn_bbox is not None else SPAWN_BBOX, dtype=np.float64)
    lo, hi = scene.workspace_bbox
    for _ in range(n):
        for attempt in range(max_retries + 1):
            shape = catalog[int(rng.integers(len(catalog)))]
            pos = rng.uniform(bbox[0], bbox[1])
            snapshot = [b.copy() for b in scene.bodies]
            snap_time = scene.time
            body = scene.add_body(shape, Pose(pos, random_quat(rng)))
            try:
                settle(scene, timeout=2.0)
            except SimulationDiverged:
                # a drop onto a still-creeping stack can blow up the solver;
                # rewind to the pre-drop state and roll a fresh placement
                scene.bodies = snapshot
                scene.time = snap_time
                continue
            p = body.pose.position
            if np.all(p >= lo) and np.all(p <= hi):
                break
            scene.remove_body(body.id)
        else:
            raise PileGenerationError(
                f"could not place body after {max_retries} retries (seed={seed})")
    scene.rng_seed = seed


# -- trajectory execution --------------------------------------------------


def execute_trajectory(scene: Scene, target_id: int, waypoints: list[Pose],
                       settle_time: float, release: bool = True) -> MotionLog:
    """Drive the grasped target along waypoints, then release and settle.

    Waypoints are poses of the attached grasp frame; the first must be the
    grasp pose currently rigidly attached to the target.  The target follows
    kinematically at TIP_SPEED; every other body reacts dynamically.  With
    release=False the target stays kinematic (stepwise episode execution).
    """
    target = scene.body(target_id)
    log = MotionLog.begin(scene)

    if waypoints:
        t_rel = geom.compose(geom.inverse(waypoints[0]), target.pose)
        target.kinematic = True
        for wa, wb in zip(waypoints[:-1], waypoints[1:]):
            dist = float(np.linalg.norm(wb.position - wa.position))
            dq = geom.quat_multiply(geom.quat_conjugate(wa.orientation), wb.orientation)
            ang = geom.quat_angle(dq)
            duration = max(dist / TIP_SPEED, ang / TIP_ANGULAR_SPEED, DT)
            n_sub = max(1, int(math.ceil(duration / DT)))
            prev = geom.compose(wa, t_rel)
            for k in range(1, n_sub + 1):
                frame = geom.interpolate(wa, wb, k / n_sub)
                tgt = geom.compose(frame, t_rel)
                target.linear_velocity[:] = (tgt.position - prev.position) / DT
                dqs = geom.quat_multiply(tgt.orientation,
                                         geom.quat_conjugate(prev.orientation))
                angle = geom.quat_angle(dqs)
                if angle > 1e-12:
                    axis = np.asarray(dqs[:3], dtype=np.float64)
                    axis_n = np.linalg.norm(axis)
                    target.angular_velocity[:] = (axis / axis_n) * (angle / DT) if axis_n > 0 else 0.0
                else:
                    target.angular_velocity[:] = 0.0
                target.pose = tgt
                step(scene)
                prev = tgt
                log.record(scene, 0)
        if release:
            target.kinematic = False
            target.linear_velocity[:] = 0.0
            target.angular_velocity[:] = 0.0

    if settle_time > 0:
        steps = int(round(settle_time / DT))
        for _ in range(steps):
            step(scene)
            log.record(scene, 1)
    return log


PARK_HEIGHT = 10.0


def park_body(scene: Scene, body_id: int, height: float = PARK_HEIGHT) -> None:
    """Teleport an extracted body far above the workspace and freeze it.

    Keeps the body in the scene so motion logs retain a constant body set;
    parked bodies are kinematic with zero velocity and cannot contact the
    pile again.
    """
    body = scene.body(body_id)
    body.pose = Pose(np.array([0.0, 0.0, height]), body.pose.orientation)
    body.linear_velocity[:] = 0.0
    body.angular_velocity[:] = 0.0
    body.kinematic = True


def visible_surface_points(scene: Scene, target_id: int) -> np.ndarray:
    """World-frame surface points of the target seen from straight above."""
    from . import percept

    points, _ = percept.visible_surface(scene, target_id)
    return points
