"""Safety metrics and the paired benchmark harness.

Each benchmark seed builds one pile, selects one partially occluded target,
scans it into an instance map, and then runs every requested policy from a
bit-identical copy of that initial state.  Disturbance is scored two ways:
net translations / peak speeds of non-target bodies from the motion log, and
a top-down heightmap difference with the target's own footprint excluded.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom, mapping, obs as obsm, percept, plan, qnet, sim, train
from .geom import Pose

DIFF_THRESHOLD = 0.01      # m of height change that counts as disturbance
NOISE_FLOOR = 1e-6         # m (or m/s) below which motion counts as zero
HEURISTIC_HEIGHT = 0.25    # m, matches the learned policy's 5 x 0.05 budget
CSV_COLUMNS = ["seed", "policy", "noise", "sum_translations_m",
               "sum_max_vel_mps", "diff_mask_pct", "diff_volume_l",
               "episode_wall_s"]

# NoiseParams stream tags used here (0 and 1 belong to oracle detection)
_STREAM_EVAL_POSE = 2
_STREAM_EVAL_MISS = 3

# benchmark-internal rng stream tags under each pile seed
_STREAM_TARGET = 7


@dataclass
class SafetyMetrics:
    sum_translations: float   # m
    sum_max_velocities: float  # m/s

    def __post_init__(self):
        if self.sum_translations < 0 or self.sum_max_velocities < 0:
            raise ValueError("safety metrics must be nonnegative")


def safety_metrics(log: sim.MotionLog, target_id: int) -> SafetyMetrics:
    """Net displacement and peak speed summed over non-target bodies.

    Contributions below NOISE_FLOOR are zeroed so a numerically quiet scene
    scores exactly (0, 0).
    """
    start = log.initial_positions()
    end = log.final_positions()
    moved = np.linalg.norm(end - start, axis=1)
    peaks = log.max_speeds()
    keep = np.array([bid != target_id for bid in log.body_ids])
    moved = np.where(moved > NOISE_FLOOR, moved, 0.0)
    peaks = np.where(peaks > NOISE_FLOOR, peaks, 0.0)
    return SafetyMetrics(float(moved[keep].sum()), float(peaks[keep].sum()))


def heightmap_diff(before: np.ndarray, after: np.ndarray,
                   target_mask: np.ndarray,
                   threshold: float = DIFF_THRESHOLD) -> tuple[float, float]:
    """(changed-cell percentage, changed volume in liters) off-target.

    Cells under the target's original footprint are excluded from both the
    numerator and the denominator.
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape or before.shape != target_mask.shape:
        raise ValueError("heightmap/mask shapes differ")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    keep = ~np.asarray(target_mask, dtype=bool)
    d = np.abs(after - before)[keep]
    changed = d > threshold
    pct = 100.0 * changed.sum() / keep.sum() if keep.any() else 0.0
    volume_m3 = float(d[changed].sum()) * obsm.CELL_SIZE ** 2
    return float(pct), volume_m3 * 1000.0


# -- policies ----------------------------------------------------------------


def resolve_policy(spec) -> tuple[str, str, object]:
    """(display name, kind, payload) for a policy spec.

    Specs: "naive" | "heuristic" | "rrt" | "learned:<checkpoint>" |
    (name, QNetParams).
    """
    if isinstance(spec, tuple):
        name, params = spec
        if not isinstance(params, qnet.QNetParams):
            raise ValueError(f"policy {name!r}: expected QNetParams payload")
        return name, "learned", params
    if spec in ("naive", "heuristic", "rrt"):
        return spec, spec, None
    if isinstance(spec, str) and spec.startswith("learned:"):
        path = spec.split(":", 1)[1]
        params, _ = qnet.load_checkpoint(path)
        return "learned", "learned", params
    raise ValueError(f"unknown policy spec {spec!r}")


def _finish_extraction(scene: sim.Scene, target_id: int,
                       drive_logs: list[sim.MotionLog]) -> sim.MotionLog:
    """Park the extracted target and settle; returns the full episode log."""
    sim.park_body(scene, target_id)
    settle_log = sim.execute_trajectory(scene, target_id, [],
                                        settle_time=train.TERMINAL_SETTLE,
                                        release=False)
    return sim.MotionLog.concat(drive_logs + [settle_log])


def _noisy_pose_tokens(scene: sim.Scene, target_id: int, grasp: Pose,
                       noise: percept.NoiseParams, seed: int, step: int,
                       camera) -> obsm.PoseObservation:
    """Per-step object tokens under the perception noise model.

    The grasped target is always present (its pose is known from the grasp);
    other bodies flip a miss coin and get visibility-scaled pose noise, both
    on dedicated streams so episodes replay exactly.
    """
    instances = []
    for body in scene.bodies:
        is_target = body.id == target_id
        if is_target:
            instances.append((body.shape.category, body.pose, True))
            continue
        phi = percept.visibility(scene, camera, body.id)
        coin = noise.rng(_STREAM_EVAL_MISS, seed, step, body.id).random()
        if coin >= 1.0 - noise.miss_scale * (1.0 - phi):
            continue
        est = percept.oracle_pose(
            body.pose, phi, noise,
            noise.rng(_STREAM_EVAL_POSE, seed, step, body.id))
        instances.append((body.shape.category, est, False))
    return obsm.build_pose_obs(instances, grasp)


def learned_rollout(scene: sim.Scene, target_id: int, grasp: Pose,
                    params: qnet.QNetParams, steps: int = plan.DEFAULT_STEPS,
                    noise: percept.NoiseParams | None = None,
                    seed: int = 0) -> sim.MotionLog:
    """Greedy N-step extraction with the trained network; mutates the scene."""
    camera = percept.top_camera()
    # buffer length is a property of the network's token layout, not of
    # how many steps this particular rollout runs
    past = obsm.empty_past_ee(params.n_steps)
    ee = grasp
    logs = []
    for k in range(steps):
        heightmap = obsm.build_heightmap(scene, grasp)
        if noise is None:
            pose_obs = obsm.build_pose_obs(
                [(b.shape.category, b.pose, b.id == target_id)
                 for b in scene.bodies], grasp)
        else:
            pose_obs = _noisy_pose_tokens(scene, target_id, grasp, noise,
                                          seed, k, camera)
        bundle = obsm.ObservationBundle(heightmap, pose_obs, past, grasp)
        action = qnet.greedy_action(params, bundle)
        delta = qnet.encode_action(action)
        ee_next = geom.apply_delta(ee, delta.translation, delta.rotation_quat())
        logs.append(sim.execute_trajectory(scene, target_id, [ee, ee_next],
                                           settle_time=0.0, release=False))
        past = obsm.push_past_ee(past, ee_next, grasp)
        ee = ee_next
    return _finish_extraction(scene, target_id, logs)


def _map_estimates(imap: mapping.InstanceMap, scene: sim.Scene,
                   catalog, max_match_dist: float = 0.1) -> dict[int, Pose]:
    """body_id -> estimated Pose for CAD-replaced map instances.

    Instances are matched greedily to the nearest same-category true body;
    this association is benchmark bookkeeping (the planner itself only ever
    sees the estimated poses).
    """
    replaced = [inst for inst in imap.instances
                if inst.replaced_pose is not None]
    pairs = []
    for inst in replaced:
        for body in scene.bodies:
            if body.shape.category != inst.category:
                continue
            d = float(np.linalg.norm(
                inst.replaced_pose.position - body.pose.position))
            if d <= max_match_dist:
                pairs.append((d, inst.id, body.id, inst.replaced_pose))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    used_inst, used_body = set(), set()
    out = {}
    for d, iid, bid, pose in pairs:
        if iid in used_inst or bid in used_body:
            continue
        used_inst.add(iid)
        used_body.add(bid)
        out[bid] = pose
    return out


def run_episode(scene: sim.Scene, target_id: int, grasp: Pose, spec,
                *, estimates: dict[int, Pose] | None = None,
                noise: percept.NoiseParams | None = None, seed: int = 0,
                steps: int = plan.DEFAULT_STEPS,
                heuristic_height: float = HEURISTIC_HEIGHT) -> sim.MotionLog:
    """Execute one policy on (a copy-owned) scene; returns the full log."""
    name, kind, payload = resolve_policy(spec)
    if kind == "learned":
        return learned_rollout(scene, target_id, grasp, payload, steps,
                               noise, seed)
    if kind == "naive":
        waypoints = plan.naive_trajectory(grasp, plan.RESET_POSE, steps)
    elif kind == "heuristic":
        waypoints = plan.heuristic_up(grasp, heuristic_height, steps)
    elif kind == "rrt":
        obstacles = []
        target = scene.body(target_id)
        est = estimates or {}
        for body in scene.bodies:
            if body.id == target_id or body.id not in est:
                continue
            pose = est[body.id]
            centers = geom.quat_rotate(pose.orientation,
                                       body.shape.offsets) + pose.position
            obstacles.append((body.id, centers, body.shape.radii))
        world = plan.CollisionWorld(
            target.shape.offsets, target.shape.radii,
            geom.compose(geom.inverse(grasp), target.pose), obstacles)
        waypoints, _ = plan.rrt_connect(grasp, plan.RESET_POSE, world,
                                        plan.RRTParams(seed=seed))
    else:
        raise AssertionError(kind)
    drive = sim.execute_trajectory(scene, target_id, waypoints,
                                   settle_time=0.0, release=False)
    return _finish_extraction(scene, target_id, [drive])


@dataclass
class BenchmarkReport:
    rows: list[dict]
    seeds: list[int]
    noise_label: str
    skipped: list[tuple[int, str]]

    def policy_means(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, list]] = {}
        for row in self.rows:
            bucket = out.setdefault(row["policy"], {})
            for key in CSV_COLUMNS[3:]:
                bucket.setdefault(key, []).append(row[key])
        return {policy: {k: float(np.mean(v)) for k, v in vals.items()}
                for policy, vals in out.items()}

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([row["seed"], row["policy"], row["noise"]] + [
                f"{row[k]:.9g}" for k in CSV_COLUMNS[3:]])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())


def noise_label(noise: percept.NoiseParams | None) -> str:
    if noise is None:
        return "none"
    return f"{noise.miss_scale:g}/{noise.trans_sigma:g}/{noise.rot_sigma:g}"


def _benchmark_seed_rows(seed: int, policies, noise, catalog, n_objects,
                         steps, heuristic_height, scan_views) -> list[dict]:
    scene0 = sim.Scene()
    sim.spawn_pile(scene0, catalog, n_objects, seed)
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=(_STREAM_TARGET,)))
    target_id = train.select_target(scene0, rng)
    points, normals = percept.visible_surface(scene0, target_id)
    grasp = obsm.select_grasp(points, normals)

    imap = mapping.orbit_scan(scene0, catalog, noise=noise,
                              n_views=scan_views)
    estimates = _map_estimates(imap, scene0, catalog)

    before, owner = obsm.build_heightmap(scene0, Pose(), return_owner=True)
    target_mask = owner == target_id

    label = noise_label(noise)
    rows = []
    for spec in policies:
        name, _, _ = resolve_policy(spec)
        scene = scene0.copy()
        t0 = time.perf_counter()
        log = run_episode(scene, target_id, grasp, spec, estimates=estimates,
                          noise=noise, seed=seed, steps=steps,
                          heuristic_height=heuristic_height)
        wall = time.perf_counter() - t0
        metrics = safety_metrics(log, target_id)
        # The extracted target is parked above the workspace at the bin
        # center; it must not paint the after-map or the diff charges its
        # clipped silhouette to the remaining pile.
        rest = {b.id for b in scene.bodies} - {target_id}
        after = obsm.build_heightmap(scene, Pose(), body_ids=rest)
        pct, liters = heightmap_diff(before, after, target_mask)
        rows.append({
            "seed": seed, "policy": name, "noise": label,
            "sum_translations_m": metrics.sum_translations,
            "sum_max_vel_mps": metrics.sum_max_velocities,
            "diff_mask_pct": pct, "diff_volume_l": liters,
            "episode_wall_s": wall,
        })
    return rows


def run_benchmark(policies, n_piles: int = 100, *, seeds=None,
                  noise: percept.NoiseParams | None = None, catalog=None,
                  n_objects: int = 4, steps: int = plan.DEFAULT_STEPS,
                  heuristic_height: float = HEURISTIC_HEIGHT,
                  scan_views: int = 8, jobs: int = 1, out_csv=None,
                  progress=None) -> BenchmarkReport:
    """Paired policy comparison over freshly generated piles.

    Episode failures (no graspable target, diverged sim) skip that seed for
    every policy so means stay paired.  Rows are ordered by (seed, policy
    order) regardless of jobs.
    """
    if n_piles < 1:
        raise ValueError("n_piles must be >= 1")
    if catalog is None:
        catalog = sim.default_catalog()
    if seeds is None:
        seeds = list(range(1000, 1000 + n_piles))
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate benchmark seeds")

    def one(seed: int):
        try:
            return seed, _benchmark_seed_rows(
                seed, policies, noise, catalog, n_objects, steps,
                heuristic_height, scan_views), None
        except (obsm.TargetNotVisible, sim.SimulationDiverged,
                sim.PileGenerationError, mapping.TargetNotFound) as exc:
            return seed, None, f"{type(exc).__name__}: {exc}"

    results = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, seeds))
    else:
        for seed in seeds:
            results.append(one(seed))
            if progress is not None:
                progress(seed)

    rows, skipped = [], []
    for seed, seed_rows, err in sorted(results, key=lambda r: seeds.index(r[0])):
        if err is not None:
            skipped.append((seed, err))
        else:
            rows.extend(seed_rows)
    report = BenchmarkReport(rows, seeds, noise_label(noise), skipped)
    if out_csv is not None:
        report.to_csv(out_csv)
    return report
