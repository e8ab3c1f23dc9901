"""Command-line entry point: pile generation, mapping demo, training,
benchmarking, episode replay, and CSV plotting.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate, geom, mapping, obs as obsm, percept, plan, plots, qnet, sim, train
from .geom import Pose

EPISODE_FORMAT = "pilepick/episode"


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors (2 is reserved for runtime)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _noise_from_flag(value: str, seed: int):
    if value == "off":
        return None
    if value == "default":
        return percept.NoiseParams(seed=seed)
    parts = value.split(",")
    if len(parts) != 3:
        raise ValueError(
            f"--noise expects off | default | miss,trans_m,rot_deg; got {value!r}")
    return percept.NoiseParams(float(parts[0]), float(parts[1]),
                               float(parts[2]), seed=seed)


def build_parser() -> _Parser:
    parser = _Parser(prog="pilepick",
                     description="Pile extraction pipeline tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-piles", parents=[], help="write pile scene files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10, help="piles to generate (default 10)")
    p.add_argument("--objects", type=int, default=4, help="bodies per pile (default 4)")
    p.add_argument("--seed", type=int, default=0, help="seed of the first pile (default 0)")

    p = sub.add_parser("map-demo",
                       help="orbit-scan one pile and report pose errors")
    p.add_argument("--seed", type=int, default=0, help="pile seed (default 0)")
    p.add_argument("--objects", type=int, default=4, help="bodies in the pile (default 4)")
    p.add_argument("--views", type=int, default=8, help="orbit camera count (default 8)")
    p.add_argument("--noise", default="off",
                   help="off | default | miss,trans_m,rot_deg (default off)")
    p.add_argument("--out", help="write the instance map as JSON here")

    p = sub.add_parser("train", help="train the extraction policy")
    p.add_argument("--config", help="flat key=value trainer config file")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--updates", type=int, default=5000,
                   help="learner updates to run (default 5000)")
    p.add_argument("--variant", default="pose_raw", choices=qnet.VARIANTS,
                   help="observation ablation (default pose_raw)")
    p.add_argument("--objects", type=int, default=4,
                   help="bodies per training pile (default 4)")
    p.add_argument("--workers", type=int, default=1,
                   help="collector threads; 1 is fully deterministic (default 1)")
    p.add_argument("--pool", type=int, default=None,
                   help="pregenerated pile pool size (default: fresh pile per episode)")

    p = sub.add_parser("eval", help="run the policy benchmark")
    p.add_argument("--policy", action="append", required=True,
                   help="naive | heuristic | rrt | learned:<checkpoint>; repeatable")
    p.add_argument("--piles", type=int, default=100,
                   help="number of benchmark piles (default 100)")
    p.add_argument("--seed", type=int, default=1000,
                   help="first pile seed (default 1000)")
    p.add_argument("--objects", type=int, default=4,
                   help="bodies per pile (default 4)")
    p.add_argument("--noise", default="off",
                   help="off | default | miss,trans_m,rot_deg (default off)")
    p.add_argument("--out", help="write the metrics CSV here")
    p.add_argument("--record", help="write per-episode replay files to this directory")
    p.add_argument("--jobs", type=int, default=1,
                   help="episode threads (default 1)")

    p = sub.add_parser("replay", help="re-execute a recorded episode")
    p.add_argument("file", help="episode JSON written by eval --record")

    p = sub.add_parser("plot", help="render a metrics/training CSV to SVG")
    p.add_argument("--csv", required=True, help="input CSV")
    p.add_argument("--out", required=True, help="output directory for SVGs")

    return parser


def cmd_gen_piles(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    catalog = sim.default_catalog()
    for k in range(args.count):
        seed = args.seed + k
        scene = sim.Scene()
        sim.spawn_pile(scene, catalog, args.objects, seed)
        path = out / f"pile_{seed:05d}.json"
        scene.save(path)
        print(f"wrote {path} ({len(scene.bodies)} bodies)")
    return 0


def cmd_map_demo(args) -> int:
    noise = _noise_from_flag(args.noise, args.seed)
    catalog = sim.default_catalog()
    scene = sim.Scene()
    sim.spawn_pile(scene, catalog, args.objects, args.seed)
    imap = mapping.orbit_scan(scene, catalog, noise=noise, n_views=args.views)

    top = percept.top_camera()
    print(f"pile seed {args.seed}: {len(scene.bodies)} bodies, "
          f"{len(imap.instances)} mapped instances")
    print("instance  category  voxels  replaced  body  trans_err_mm  rot_err_deg  visibility")
    for inst in imap.instances:
        line = f"{inst.id:8d}  {inst.category:8d}  {inst.octree.voxel_count:6d}"
        if inst.replaced_pose is None:
            print(line + "  no")
            continue
        best = None
        for body in scene.bodies:
            if body.shape.category != inst.category:
                continue
            d = float(np.linalg.norm(inst.replaced_pose.position
                                     - body.pose.position))
            if best is None or d < best[0]:
                best = (d, body)
        if best is None:
            print(line + "  yes        -")
            continue
        d, body = best
        dq = geom.quat_multiply(inst.replaced_pose.orientation,
                                geom.quat_conjugate(body.pose.orientation))
        ang = np.degrees(geom.quat_angle(dq))
        vis = percept.visibility(scene, top, body.id)
        print(line + f"  yes   {body.id:5d}  {d * 1000:12.2f}  {ang:11.2f}  {vis:10.2f}")
    if args.out:
        imap.save(args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            print(f"config file not found: {path}", file=sys.stderr)
            return 1
        try:
            config = train.parse_config(path.read_text())
        except ValueError as exc:
            print(f"bad config: {exc}", file=sys.stderr)
            return 1
    else:
        config = train.TrainerConfig()
    if args.seed is not None:
        config = train.TrainerConfig(**{
            **{f: getattr(config, f) for f in config.__dataclass_fields__},
            "seed": args.seed})
    train.run_training(config, updates=args.updates, n_objects=args.objects,
                       variant=args.variant, workers=args.workers,
                       out_dir=args.out, pool_size=args.pool)
    print(f"trained {args.updates} updates -> {args.out}")
    return 0


def _record_episode(path: Path, scene0: sim.Scene, target_id: int,
                    policy: str, waypoints: list[Pose],
                    log: sim.MotionLog) -> None:
    data = {
        "format": EPISODE_FORMAT,
        "version": 1,
        "policy": policy,
        "target_id": target_id,
        "scene": scene0.to_dict(),
        "waypoints": [wp.to_array().tolist() for wp in waypoints],
        "log": log.to_dict(),
    }
    path.write_text(json.dumps(data))


def cmd_eval(args) -> int:
    noise = _noise_from_flag(args.noise, args.seed)
    policies = list(args.policy)
    for spec in policies:
        evaluate.resolve_policy(spec)  # fail fast on unknown names
    seeds = list(range(args.seed, args.seed + args.piles))

    record_dir = None
    if args.record:
        record_dir = Path(args.record)
        record_dir.mkdir(parents=True, exist_ok=True)

    report = evaluate.run_benchmark(policies, args.piles, seeds=seeds,
                                    noise=noise, n_objects=args.objects,
                                    jobs=args.jobs, out_csv=args.out)
    if record_dir is not None:
        _record_benchmark_episodes(record_dir, policies, report.seeds,
                                   {s for s, _ in report.skipped},
                                   noise, args.objects)
    for seed, reason in report.skipped:
        print(f"seed {seed} skipped: {reason}", file=sys.stderr)
    for policy, means in report.policy_means().items():
        print(f"{policy}: translations {means['sum_translations_m']:.4f} m, "
              f"max velocities {means['sum_max_vel_mps']:.4f} m/s, "
              f"diff {means['diff_mask_pct']:.2f} % / "
              f"{means['diff_volume_l']:.4f} L")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _record_benchmark_episodes(record_dir: Path, policies, seeds,
                               skipped: set, noise, n_objects: int) -> None:
    """Re-run waypoint policies per seed and write replayable episode files.

    Only pose-scripted policies (naive/heuristic/rrt) are recorded; the
    learned policy's closed-loop decisions are not a waypoint list.
    """
    catalog = sim.default_catalog()
    for seed in seeds:
        if seed in skipped:
            continue
        scene0 = sim.Scene()
        sim.spawn_pile(scene0, catalog, n_objects, seed)
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=seed, spawn_key=(evaluate._STREAM_TARGET,)))
        target_id = train.select_target(scene0, rng)
        points, normals = percept.visible_surface(scene0, target_id)
        grasp = obsm.select_grasp(points, normals)
        imap = mapping.orbit_scan(scene0, catalog, noise=noise)
        estimates = evaluate._map_estimates(imap, scene0, catalog)
        for spec in policies:
            name, kind, _ = evaluate.resolve_policy(spec)
            if kind == "learned":
                continue
            if kind == "naive":
                waypoints = plan.naive_trajectory(grasp, plan.RESET_POSE)
            elif kind == "heuristic":
                waypoints = plan.heuristic_up(grasp, evaluate.HEURISTIC_HEIGHT)
            else:
                target = scene0.body(target_id)
                obstacles = []
                for body in scene0.bodies:
                    if body.id == target_id or body.id not in estimates:
                        continue
                    pose = estimates[body.id]
                    centers = geom.quat_rotate(pose.orientation,
                                               body.shape.offsets) + pose.position
                    obstacles.append((body.id, centers, body.shape.radii))
                world = plan.CollisionWorld(
                    target.shape.offsets, target.shape.radii,
                    geom.compose(geom.inverse(grasp), target.pose), obstacles)
                waypoints, _ = plan.rrt_connect(grasp, plan.RESET_POSE, world,
                                                plan.RRTParams(seed=seed))
            scene = scene0.copy()
            drive = sim.execute_trajectory(scene, target_id, waypoints,
                                           settle_time=0.0, release=False)
            log = evaluate._finish_extraction(scene, target_id, [drive])
            _record_episode(record_dir / f"episode_{seed:05d}_{name}.json",
                            scene0, target_id, name, waypoints, log)


def cmd_replay(args) -> int:
    path = Path(args.file)
    if not path.exists():
        print(f"episode file not found: {path}", file=sys.stderr)
        return 1
    data = json.loads(path.read_text())
    if data.get("format") != EPISODE_FORMAT:
        print(f"not an episode file: {path}", file=sys.stderr)
        return 1
    scene = sim.Scene.from_dict(data["scene"])
    target_id = int(data["target_id"])
    waypoints = [Pose.from_array(np.array(wp)) for wp in data["waypoints"]]
    recorded = sim.MotionLog.from_dict(data["log"])
    drive = sim.execute_trajectory(scene, target_id, waypoints,
                                   settle_time=0.0, release=False)
    log = evaluate._finish_extraction(scene, target_id, [drive])
    if log.equals(recorded):
        print("MATCH")
        return 0
    print("MISMATCH: re-executed log differs from the recording",
          file=sys.stderr)
    return 2


def cmd_plot(args) -> int:
    csv_path = Path(args.csv)
    if not csv_path.exists():
        print(f"CSV not found: {csv_path}", file=sys.stderr)
        return 1
    written = plots.render_csv(csv_path, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-piles": cmd_gen_piles,
    "map-demo": cmd_map_demo,
    "train": cmd_train,
    "eval": cmd_eval,
    "replay": cmd_replay,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (sim.SimulationDiverged, sim.PileGenerationError,
            obsm.TargetNotVisible, mapping.TargetNotFound,
            FloatingPointError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
