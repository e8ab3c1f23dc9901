"""Acceptance gate: end-to-end checks of the package's core guarantees.

Each test prints one summary line; run with -v for per-check pass/fail
status.  The two policy-quality checks train networks from scratch and
dominate the suite's runtime.
"""

import math
import time

import numpy as np
import pytest

import pilepick.evaluate as ev
import pilepick.mapping as mapping
import pilepick.obs as obsm
import pilepick.percept as percept
import pilepick.plan as plan
import pilepick.qnet as qnet
import pilepick.sim as sim
import pilepick.train as train
from pilepick.geom import Pose

from test_obs import dyadic_scene, DYADIC_SHIFTS
from test_plan import dense_recheck
from test_qnet import fd_setup, fd_probe, make_bundle, randomized_head

# policy-quality budget: one training run per observation variant
TRAIN_UPDATES = 7000
TRAIN_CONFIG = dict(seed=0, replay_ratio=4, epsilon_end_iter=4000)
TRAIN_POOL = 512
BENCH_SEEDS = list(range(1000, 1100))
EVAL_NOISE = percept.NoiseParams(miss_scale=0.5, trans_sigma=0.02,
                                 rot_sigma=math.radians(10.0))


def test_01_octree_matches_dense_fusion():
    """Sparse octree fusion == dense-grid brute force, voxel for voxel."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(20260817)
    side = 16
    for scene_idx in range(50):
        tree = mapping.OcTree(resolution=0.01)
        dense = np.zeros((side, side, side))
        for _ in range(rng.integers(3, 9)):
            n = int(rng.integers(20, 120))
            idx = rng.integers(0, side, size=(n, 3))
            p_obs = float(rng.choice([mapping.P_HIT, mapping.P_MISS,
                                      0.55, 0.33, 0.9]))
            counts = rng.integers(1, 4, size=n)
            tree.update_many(idx, p_obs, counts)
            step = math.log(p_obs / (1.0 - p_obs))
            for (i, j, k), c in zip(idx, counts):
                l_cur = dense[i, j, k]
                for _ in range(int(c)):
                    l_cur = min(max(l_cur + step, mapping.LOGODDS_MIN),
                                mapping.LOGODDS_MAX)
                dense[i, j, k] = l_cur
        for i in range(side):
            for j in range(side):
                for k in range(side):
                    assert tree.log_odds((i, j, k)) == dense[i, j, k]
        occupied = {tuple(v) for v in tree.occupied_indices()}
        expected = {tuple(v) for v in np.argwhere(dense > 0.0)}
        assert occupied == expected, f"scene {scene_idx}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"fusion equivalence took {elapsed:.1f}s"
    print(f"octree == dense fusion on 50 scenes in {elapsed:.2f}s")


def test_02_logodds_unit_values():
    """Log-odds updates match direct probability arithmetic to 1e-12."""
    # single hit from the prior
    l1 = mapping.logodds_update(0.0, 0.7)
    assert abs(l1 - math.log(0.7 / 0.3)) < 1e-12
    # direct probability route: posterior odds = prior odds * likelihood odds
    p_direct = (0.7 / 0.3) / (1.0 + 0.7 / 0.3)
    assert abs(float(mapping.logistic(l1)) - p_direct) < 1e-12
    # hit then miss returns to the prior
    l2 = mapping.logodds_update(l1, 0.4)
    p_chain = 1.0 / (1.0 + math.exp(-(math.log(0.7 / 0.3)
                                      + math.log(0.4 / 0.6))))
    assert abs(float(mapping.logistic(l2)) - p_chain) < 1e-12
    # repeated hits clamp at the ceiling, repeated misses at the floor
    l_up, l_down = 0.0, 0.0
    for _ in range(40):
        l_up = mapping.logodds_update(l_up, 0.7)
        l_down = mapping.logodds_update(l_down, 0.4)
    assert l_up == mapping.LOGODDS_MAX
    assert l_down == mapping.LOGODDS_MIN
    occ_hi = float(mapping.logistic(mapping.LOGODDS_MAX))
    occ_lo = float(mapping.logistic(mapping.LOGODDS_MIN))
    assert abs(occ_hi - 1.0 / (1.0 + math.exp(-3.5))) < 1e-12
    assert abs(occ_lo - 1.0 / (1.0 + math.exp(2.0))) < 1e-12
    print("log-odds unit values match direct probabilities to 1e-12")


def test_03_gradient_check_vs_finite_differences():
    """Analytic backward vs central differences on >= 200 parameters."""
    t0 = time.perf_counter()
    checked_total, worst_total = 0, 0.0
    for variant, probes in (("pose_raw", 130), ("pose_only", 65),
                            ("raw_only", 65)):
        params, bundles, actions, targets, rng = fd_setup(variant, seed=7)
        checked, worst = fd_probe(params, bundles, actions, targets,
                                  probes, rng)
        checked_total += checked
        worst_total = max(worst_total, worst)
    elapsed = time.perf_counter() - t0
    assert checked_total >= 200, f"only {checked_total} informative probes"
    assert worst_total < 1e-4, f"worst relative error {worst_total:.2e}"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    print(f"gradient check: {checked_total} probes, worst rel err "
          f"{worst_total:.2e}, {elapsed:.1f}s")


def test_04_invariance_suite():
    """Token permutation, shift equivariance, codec bijection, identity."""
    # permutation invariance of Q at 1e-6
    rng = np.random.default_rng(11)
    params = randomized_head(qnet.init_params(seed=11), rng)
    for _ in range(5):
        bundle = make_bundle(rng, n_objects=5)
        po = bundle.pose_obs
        perm = rng.permutation(5)
        shuffled = obsm.ObservationBundle(
            bundle.heightmap,
            obsm.PoseObservation(po.flags[perm], po.categories[perm],
                                 po.poses[perm]),
            bundle.past_ee, bundle.grasp_pose)
        action = int(rng.integers(729))
        assert abs(qnet.forward(params, bundle, action)
                   - qnet.forward(params, shuffled, action)) < 1e-6

    # grasp-shift equivariance is bit-exact on a dyadic-coordinate scene
    scene = dyadic_scene()
    base_grasp = Pose(np.array([0.015625, -0.03125, 0.125]))
    hm0, owner0 = obsm.build_heightmap(scene, base_grasp, return_owner=True)
    po0 = obsm.build_pose_obs(
        [(b.shape.category, b.pose, b.id == 1) for b in scene.bodies],
        base_grasp)
    for dx, dy in DYADIC_SHIFTS:
        shifted = sim.Scene()
        for b in scene.bodies:
            moved = Pose(b.pose.position + np.array([dx, dy, 0.0]),
                         b.pose.orientation)
            shifted.add_body(b.shape, moved)
        grasp = Pose(base_grasp.position + np.array([dx, dy, 0.0]))
        hm1, owner1 = obsm.build_heightmap(shifted, grasp, return_owner=True)
        po1 = obsm.build_pose_obs(
            [(b.shape.category, b.pose, b.id == 1) for b in shifted.bodies],
            grasp)
        assert np.array_equal(hm0, hm1)
        assert np.array_equal(owner0, owner1)
        assert np.array_equal(po0.poses, po1.poses)

    # action codec is a bijection over all 729 indices
    seen = set()
    for index in range(729):
        delta = qnet.encode_action(index)
        back = qnet.decode_action(delta)
        assert back == index
        seen.add(qnet_key(delta))
    assert len(seen) == 729

    # identity action sits at index 364
    ident = qnet.encode_action(364)
    assert np.all(ident.translation == 0.0)
    assert np.array_equal(ident.rotation_quat(), np.array([0.0, 0, 0, 1]))
    assert qnet.IDENTITY_ACTION == 364
    print("invariance suite: permutation 1e-6, shift bit-exact, "
          "codec bijective, identity at 364")


def qnet_key(delta):
    return tuple(np.round(delta.signed_units()).astype(int))


def test_05_determinism(tmp_path):
    """Same seeds give identical piles, loss curves, and benchmark CSVs."""
    # pile generation
    for seed in (42, 7):
        scenes = []
        for _ in range(2):
            s = sim.Scene()
            sim.spawn_pile(s, sim.default_catalog(), 4, seed)
            scenes.append(s.to_dict())
        assert scenes[0] == scenes[1]

    # synchronous training: identical logs and final parameters
    logs, params = [], []
    for run in range(2):
        out = tmp_path / f"train{run}"
        config = train.TrainerConfig(seed=3, batch=8, replay_ratio=2)
        train.run_training(config, updates=4, n_objects=2, workers=1,
                           pool_size=2, out_dir=out, checkpoint_every=0)
        logs.append((out / "training_log.csv").read_text())
        p, _ = qnet.load_checkpoint(out / "checkpoint_final.npz")
        params.append(p)
    assert logs[0] == logs[1]
    assert all(np.array_equal(params[0].arrays[k], params[1].arrays[k])
               for k in params[0].arrays)

    # benchmark: identical CSV modulo the wall-clock column
    csvs = []
    for _ in range(2):
        rep = ev.run_benchmark(["naive", "heuristic"], seeds=[101, 102],
                               n_objects=3, scan_views=4)
        stripped = "\n".join(ln.rsplit(",", 1)[0]
                             for ln in rep.csv_text().strip().split("\n"))
        csvs.append(stripped)
    assert csvs[0] == csvs[1]
    print("determinism: piles, training logs, benchmark CSVs reproduce")


@pytest.fixture(scope="session")
def trained_policies(tmp_path_factory):
    """Train one network per observation variant with a shared budget."""
    root = tmp_path_factory.mktemp("policies")
    out = {}
    for variant in ("pose_raw", "pose_only", "raw_only"):
        run_dir = root / variant
        config = train.TrainerConfig(**TRAIN_CONFIG)
        t0 = time.perf_counter()
        train.run_training(config, updates=TRAIN_UPDATES, n_objects=4,
                           variant=variant, workers=1, pool_size=TRAIN_POOL,
                           out_dir=run_dir, checkpoint_every=0)
        params, _ = qnet.load_checkpoint(run_dir / "checkpoint_final.npz")
        out[variant] = params
        print(f"trained {variant}: {TRAIN_UPDATES} updates in "
              f"{time.perf_counter() - t0:.0f}s")
    return out


@pytest.fixture(scope="session")
def clean_benchmark(trained_policies):
    policies = ["naive", "heuristic",
                ("pose_raw", trained_policies["pose_raw"]),
                ("pose_only", trained_policies["pose_only"]),
                ("raw_only", trained_policies["raw_only"])]
    return ev.run_benchmark(policies, seeds=BENCH_SEEDS, n_objects=4)


@pytest.fixture(scope="session")
def noisy_benchmark(trained_policies):
    policies = [("pose_raw", trained_policies["pose_raw"]),
                ("pose_only", trained_policies["pose_only"])]
    return ev.run_benchmark(policies, seeds=BENCH_SEEDS, n_objects=4,
                            noise=EVAL_NOISE)


def test_06_learned_policy_beats_baselines(clean_benchmark):
    """Greedy trained policy disturbs less than naive and straight-up."""
    means = clean_benchmark.policy_means()
    learned = means["pose_raw"]["sum_translations_m"]
    naive = means["naive"]["sum_translations_m"]
    heuristic = means["heuristic"]["sum_translations_m"]
    n_seeds = len({r["seed"] for r in clean_benchmark.rows})
    print(f"mean translations over {n_seeds} piles: naive {naive:.4f}, "
          f"heuristic {heuristic:.4f}, learned {learned:.4f}")
    assert learned < naive
    assert learned < heuristic


def test_07_observation_ablation_ordering(clean_benchmark, noisy_benchmark):
    """Pose tokens help; the heightmap pays off once poses are noisy."""
    clean = clean_benchmark.policy_means()
    noisy = noisy_benchmark.policy_means()
    pr_noise = noisy["pose_raw"]["sum_translations_m"]
    po_noise = noisy["pose_only"]["sum_translations_m"]
    pr = clean["pose_raw"]["sum_translations_m"]
    po = clean["pose_only"]["sum_translations_m"]
    ro = clean["raw_only"]["sum_translations_m"]
    print(f"noisy: pose_raw {pr_noise:.4f} vs pose_only {po_noise:.4f}; "
          f"clean: pose_only {po:.4f}, pose_raw {pr:.4f}, raw_only {ro:.4f}")
    assert pr_noise <= po_noise
    assert po <= ro
    assert pr <= ro


def test_08_mapping_pose_accuracy():
    """Noiseless orbit scans recover visible objects within 1 cm."""
    catalog = sim.default_catalog()
    camera = percept.top_camera()
    checked = 0
    for seed in range(3000, 3030):
        scene = sim.Scene()
        sim.spawn_pile(scene, catalog, 4, seed)
        imap = mapping.orbit_scan(scene, catalog)
        estimates = ev._map_estimates(imap, scene, catalog)
        for body in scene.bodies:
            vis = percept.visibility(scene, camera, body.id)
            if vis <= 0.5:
                continue
            assert body.id in estimates, \
                f"seed {seed}: visible body {body.id} (vis {vis:.2f}) unmapped"
            err = float(np.linalg.norm(estimates[body.id].position
                                       - body.pose.position))
            assert err < 0.01, \
                f"seed {seed} body {body.id}: {err * 1000:.1f} mm"
            checked += 1
    assert checked > 0
    print(f"mapping accuracy: {checked} visible objects within 1 cm")


def test_09_heightmap_diff_unit_example():
    """One changed cell: exact percentage and 0.0008 L of moved volume."""
    before = np.zeros((128, 128))
    after = np.zeros((128, 128))
    after[90, 17] = 0.05
    mask = np.zeros((128, 128), dtype=bool)
    mask[60:64, 60:64] = True  # pretend 16 cells belong to the target
    pct, liters = ev.heightmap_diff(before, after, mask)
    assert pct == 100.0 * 1 / (128 * 128 - 16)
    assert liters == 0.05 * obsm.CELL_SIZE ** 2 * 1000
    assert abs(liters - 0.0008) < 1e-18  # one ulp from the decimal literal
    print(f"heightmap diff: pct {pct:.6f}, volume {liters!r} L")


def test_10_planner_fallback_and_clearance():
    """Blocked goals fall back to the straight path; found paths re-check."""
    # goal buried inside an obstacle: immediate fallback, found=False
    world = plan.CollisionWorld([[0, 0, 0]], [0.02], Pose(),
                                [(1, [[0.0, 0.0, 0.5]], [0.08])])
    start = Pose(np.array([0.2, 0.0, 0.05]))
    goal = plan.RESET_POSE
    path, found = plan.rrt_connect(start, goal, world,
                                   plan.RRTParams(seed=0))
    assert not found
    expect = plan.naive_trajectory(start, goal, plan.DEFAULT_STEPS)
    assert len(path) == len(expect)
    for w, e in zip(path, expect):
        assert np.array_equal(w.to_array(), e.to_array())

    # random clutter worlds: every found path passes an independent sweep
    found_count = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n_obs = int(rng.integers(3, 9))
        centers = np.column_stack([
            rng.uniform(-0.15, 0.15, n_obs),
            rng.uniform(-0.15, 0.15, n_obs),
            rng.uniform(0.08, 0.45, n_obs)])
        radii = rng.uniform(0.02, 0.06, n_obs)
        obstacles = [(i, [centers[i]], [float(radii[i])])
                     for i in range(n_obs)]
        world = plan.CollisionWorld([[0, 0, 0]], [0.02], Pose(), obstacles)
        start = Pose(np.array([float(rng.uniform(-0.1, 0.1)),
                               float(rng.uniform(-0.1, 0.1)), 0.05]))
        path, ok = plan.rrt_connect(start, goal, world,
                                    plan.RRTParams(seed=seed))
        if not ok:
            continue
        found_count += 1
        clearance = dense_recheck(world, path, resolution=0.002)
        assert clearance > 0.0, f"world {seed}: clearance {clearance:.5f}"
    assert found_count >= 10, f"only {found_count}/20 worlds solved"
    print(f"planner: fallback exact, {found_count}/20 found paths "
          f"re-checked at 2 mm")
