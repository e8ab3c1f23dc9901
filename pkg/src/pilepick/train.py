"""DQN training loop for the extraction policy.

Episodes drive the grasped target through N discrete relative motions; the
reward of each step is the negated sum of non-target net translations over
that step's simulation segment (the terminal step also covers the settle
window).  A FIFO replay buffer feeds L1 Bellman updates against a lazily
synced target network.
"""

from __future__ import annotations

import csv
import math
import queue
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import geom, obs as obsm, percept, qnet, sim
from .geom import Pose

EPSILON_START = 1.0
EPSILON_END = 0.02
TERMINAL_SETTLE = 1.0      # s of free simulation appended to the last step
VIS_LOW = 0.05             # target candidates must be partially occluded
VIS_HIGH = 0.95

# rng stream tags under the config seed
_STREAM_COLLECT = 0
_STREAM_SAMPLE = 1
_STREAM_PILE = 2


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    lr: float = 0.001
    batch: int = 128
    replay_ratio: int = 16
    target_sync: int = 100
    epsilon_end_iter: int = 5000
    episode_steps: int = 5
    capacity: int = 50000
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "seed" and v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")


def parse_config(text: str) -> TrainerConfig:
    """Flat key=value lines; '#' comments; unknown keys rejected."""
    known = {f.name: f.type for f in fields(TrainerConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        caster = float if known[key] in ("float", float) else int
        kwargs[key] = caster(value.strip())
    return TrainerConfig(**kwargs)


def epsilon_at(update: int, config: TrainerConfig) -> float:
    """Linear EPSILON_START -> EPSILON_END over epsilon_end_iter updates."""
    frac = min(max(update, 0), config.epsilon_end_iter) / config.epsilon_end_iter
    return EPSILON_START + (EPSILON_END - EPSILON_START) * frac


@dataclass
class Transition:
    obs: obsm.ObservationBundle
    action: int
    reward: float
    next_obs: obsm.ObservationBundle
    terminal: bool
    uid: int = -1  # assigned by ReplayBuffer.push

    def __post_init__(self):
        if self.reward > 0.0:
            raise ValueError(f"reward must be <= 0, got {self.reward}")


class ReplayBuffer:
    """Ring buffer with uniform sampling and strict FIFO eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._head = 0  # next slot to overwrite once full
        self._next_uid = 0

    def __len__(self) -> int:
        return len(self._data)

    def push(self, t: Transition) -> None:
        t.uid = self._next_uid
        self._next_uid += 1
        if len(self._data) < self.capacity:
            self._data.append(t)
        else:
            self._data[self._head] = t
            self._head = (self._head + 1) % self.capacity

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        if len(self._data) < batch:
            raise ValueError(f"buffer holds {len(self._data)} < batch {batch}")
        idx = rng.integers(0, len(self._data), size=batch)
        return [self._data[int(i)] for i in idx]


def reward(log: sim.MotionLog, target_id: int) -> float:
    """Negated sum over non-target bodies of net translation in the segment."""
    start = log.initial_positions()
    end = log.final_positions()
    moved = np.linalg.norm(end - start, axis=1)
    keep = np.array([bid != target_id for bid in log.body_ids])
    return -float(moved[keep].sum())


def select_target(scene: sim.Scene, rng: np.random.Generator,
                  camera=None) -> int:
    """Uniform pick among partially occluded bodies; fallback most occluded."""
    if camera is None:
        camera = percept.top_camera()
    vis = [(body.id, percept.visibility(scene, camera, body.id))
           for body in scene.bodies]
    if not vis:
        raise obsm.TargetNotVisible("scene is empty")
    candidates = [bid for bid, v in vis if VIS_LOW <= v <= VIS_HIGH]
    if candidates:
        return candidates[int(rng.integers(len(candidates)))]
    visible = [(v, bid) for bid, v in vis if v > 0.0]
    if not visible:
        raise obsm.TargetNotVisible("every body is fully occluded")
    return min(visible)[1]


def observe(scene: sim.Scene, grasp: Pose, target_id: int,
            past_ee: np.ndarray) -> obsm.ObservationBundle:
    """Ground-truth observation bundle for the current scene state."""
    heightmap = obsm.build_heightmap(scene, grasp)
    instances = [(body.shape.category, body.pose, body.id == target_id)
                 for body in scene.bodies]
    pose_obs = obsm.build_pose_obs(instances, grasp)
    return obsm.ObservationBundle(heightmap, pose_obs, past_ee, grasp)


def collect_episode(scene: sim.Scene, params: qnet.QNetParams, epsilon: float,
                    config: TrainerConfig, rng: np.random.Generator,
                    target_id: int | None = None):
    """Run one N-step episode in place; returns (transitions, info).

    The scene is mutated.  Epsilon-greedy over the 729 actions; each action
    is executed as a two-waypoint kinematic sub-trajectory with the target
    still attached; after the final step the target is parked out of the
    workspace (extraction complete) and the pile settles, so the terminal
    reward charges for support loss rather than for dropping the payload.
    """
    if target_id is None:
        target_id = select_target(scene, rng)
    points, normals = percept.visible_surface(scene, target_id)
    grasp = obsm.select_grasp(points, normals)

    past = obsm.empty_past_ee(config.episode_steps)
    bundle = observe(scene, grasp, target_id, past)
    ee = grasp
    transitions = []
    logs = []
    for i in range(config.episode_steps):
        terminal = i == config.episode_steps - 1
        if rng.random() < epsilon:
            action = int(rng.integers(qnet.ACTION_COUNT))
        else:
            action = qnet.greedy_action(params, bundle)
        delta = qnet.encode_action(action)
        new_ee = geom.apply_delta(ee, delta.translation, delta.rotation_quat())
        log = sim.execute_trajectory(scene, target_id, [ee, new_ee],
                                     settle_time=0.0, release=False)
        if terminal:
            sim.park_body(scene, target_id)
            settle_log = sim.execute_trajectory(
                scene, target_id, [], settle_time=TERMINAL_SETTLE,
                release=False)
            log = sim.MotionLog.concat([log, settle_log])
        r = reward(log, target_id)
        past = obsm.push_past_ee(past, new_ee, grasp)
        next_bundle = observe(scene, grasp, target_id, past)
        transitions.append(Transition(bundle, action, r, next_bundle, terminal))
        logs.append(log)
        bundle = next_bundle
        ee = new_ee
    info = {
        "target_id": target_id,
        "grasp": grasp,
        "penalty": -sum(t.reward for t in transitions),
        "log": sim.MotionLog.concat(logs),
    }
    return transitions, info


class Adam:
    """Adaptive-moment optimizer over a QNetParams array dict."""

    def __init__(self, params: qnet.QNetParams, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    def apply(self, params: qnet.QNetParams, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, arr in params.arrays.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class Trainer:
    """Owns live/target params, optimizer, buffer, and the max-Q cache."""

    def __init__(self, config: TrainerConfig, variant: str = "pose_raw",
                 n_categories: int = 8, dtype=np.float32):
        self.config = config
        self.params = qnet.init_params(config.seed, variant, n_categories,
                                       config.episode_steps, dtype=dtype)
        self.target_params = self.params.copy()
        self.target_version = 0
        self.opt = Adam(self.params, config.lr)
        self.buffer = ReplayBuffer(config.capacity)
        self.updates = 0
        self._maxq_cache: dict[int, float] = {}

    @property
    def epsilon(self) -> float:
        return epsilon_at(self.updates, self.config)

    def td_target(self, t: Transition) -> float:
        if t.terminal:
            return t.reward
        maxq = self._maxq_cache.get(t.uid)
        if maxq is None:
            maxq = float(qnet.forward_all(self.target_params, t.next_obs).max())
            self._maxq_cache[t.uid] = maxq
        return t.reward + self.config.gamma * maxq

    def train_step(self, rng: np.random.Generator) -> float:
        """One sampled batch: L1 Bellman update, then maybe target sync."""
        batch = self.buffer.sample(self.config.batch, rng)
        targets = [self.td_target(t) for t in batch]
        loss, grads = qnet.backward_batch(
            self.params, [t.obs for t in batch], [t.action for t in batch],
            targets)
        if not math.isfinite(loss):
            raise FloatingPointError(
                f"non-finite loss {loss} at update {self.updates} "
                f"(buffer={len(self.buffer)}, targets min/max="
                f"{min(targets):.4g}/{max(targets):.4g})")
        self.opt.apply(self.params, grads)
        self.updates += 1
        if self.updates % self.config.target_sync == 0:
            self.target_params = self.params.copy()
            self.target_version += 1
            self._maxq_cache.clear()
        return float(loss)


def _pile_seed(config_seed: int, episode: int) -> int:
    ss = np.random.SeedSequence(entropy=config_seed,
                                spawn_key=(_STREAM_PILE, episode))
    return int(ss.generate_state(1, np.uint64)[0] % (2 ** 63))


def make_training_scene(config_seed: int, episode: int, catalog,
                        n_objects: int) -> sim.Scene:
    scene = sim.Scene()
    sim.spawn_pile(scene, catalog, n_objects, _pile_seed(config_seed, episode))
    return scene


def _csv_writer(path: Path):
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["update", "epsilon", "loss_mean", "penalty_mean",
                     "episodes", "buffer"])
    return fh, writer


def run_training(config: TrainerConfig, catalog=None, *, updates: int = 5000,
                 n_objects: int = 4, variant: str = "pose_raw",
                 workers: int = 1, out_dir=None, checkpoint_every: int = 1000,
                 log_every: int = 100, pool_size: int | None = None,
                 progress=None) -> qnet.QNetParams:
    """Train for a fixed number of learner updates; returns live params.

    workers=1 runs collector and learner synchronously in one thread and is
    bit-reproducible given config.seed.  workers>1 runs that many collector
    threads against versioned parameter snapshots with an ordered, bounded
    queue; the learner still applies replay_ratio updates per consumed
    episode.  Checkpoints and a loss/penalty CSV land in out_dir when given;
    a worker crash aborts training after writing a partial checkpoint.
    pool_size pregenerates that many piles and cycles copies instead of
    spawning a fresh pile per episode (identical determinism contract).
    """
    if catalog is None:
        catalog = sim.default_catalog()
    if workers < 1:
        raise ValueError("workers must be >= 1")
    scene_pool = None
    if pool_size is not None:
        scene_pool = [make_training_scene(config.seed, k, catalog, n_objects)
                      for k in range(pool_size)]
    trainer = Trainer(config, variant)
    sample_rng = np.random.default_rng(np.random.SeedSequence(
        entropy=config.seed, spawn_key=(_STREAM_SAMPLE,)))

    out_dir = Path(out_dir) if out_dir is not None else None
    csv_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_fh, writer = _csv_writer(out_dir / "training_log.csv")

    losses: list[float] = []
    penalties: list[float] = []
    window_losses: list[float] = []
    window_penalties: list[float] = []
    episodes = 0

    def flush_row():
        if writer is None:
            return
        writer.writerow([
            trainer.updates, f"{trainer.epsilon:.6f}",
            f"{np.mean(window_losses):.8f}" if window_losses else "",
            f"{np.mean(window_penalties):.8f}" if window_penalties else "",
            episodes, len(trainer.buffer)])
        csv_fh.flush()
        window_losses.clear()
        window_penalties.clear()

    def checkpoint(tag: str):
        if out_dir is None:
            return None
        path = out_dir / f"checkpoint_{tag}.npz"
        qnet.save_checkpoint(trainer.params, path, extra={
            "updates": trainer.updates, "episodes": episodes,
            "variant": variant, "seed": config.seed})
        return path

    def learn_from_episode(transitions, info):
        nonlocal episodes
        for t in transitions:
            trainer.buffer.push(t)
        episodes += 1
        penalties.append(info["penalty"])
        window_penalties.append(info["penalty"])
        if len(trainer.buffer) < config.batch:
            return
        for _ in range(config.replay_ratio):
            if trainer.updates >= updates:
                return
            loss = trainer.train_step(sample_rng)
            losses.append(loss)
            window_losses.append(loss)
            if trainer.updates % log_every == 0:
                flush_row()
                if progress is not None:
                    progress(trainer.updates, loss)
            if checkpoint_every and trainer.updates % checkpoint_every == 0:
                checkpoint(f"{trainer.updates:06d}")

    config = trainer.config
    try:
        if workers == 1:
            episode_idx = 0
            while trainer.updates < updates:
                if scene_pool is not None:
                    scene = scene_pool[episode_idx % len(scene_pool)].copy()
                else:
                    scene = make_training_scene(config.seed, episode_idx,
                                                catalog, n_objects)
                rng = np.random.default_rng(np.random.SeedSequence(
                    entropy=config.seed, spawn_key=(_STREAM_COLLECT, episode_idx)))
                try:
                    transitions, info = collect_episode(
                        scene, trainer.params, trainer.epsilon, config, rng)
                except obsm.TargetNotVisible:
                    episode_idx += 1
                    continue
                learn_from_episode(transitions, info)
                episode_idx += 1
        else:
            _run_threaded(trainer, catalog, n_objects, updates, workers,
                          learn_from_episode, checkpoint, scene_pool)
    except BaseException:
        checkpoint("partial")
        raise
    finally:
        if csv_fh is not None:
            if window_losses or window_penalties:
                flush_row()
            csv_fh.close()

    checkpoint("final")
    return trainer.params


def _run_threaded(trainer: Trainer, catalog, n_objects: int, updates: int,
                  workers: int, learn_from_episode, checkpoint,
                  scene_pool=None) -> None:
    """Collector threads feed one learner through a bounded ordered queue."""
    config = trainer.config
    out: queue.Queue = queue.Queue(maxsize=workers * 2)
    stop = threading.Event()
    snapshot_lock = threading.Lock()
    snapshot = (trainer.params.copy(), 0)

    def publish():
        nonlocal snapshot
        with snapshot_lock:
            snapshot = (trainer.params.copy(), trainer.target_version)

    def collector(worker_idx: int):
        episode_idx = worker_idx
        try:
            while not stop.is_set():
                if scene_pool is not None:
                    scene = scene_pool[episode_idx % len(scene_pool)].copy()
                else:
                    scene = make_training_scene(config.seed, episode_idx,
                                                catalog, n_objects)
                rng = np.random.default_rng(np.random.SeedSequence(
                    entropy=config.seed,
                    spawn_key=(_STREAM_COLLECT, episode_idx)))
                with snapshot_lock:
                    params = snapshot[0]
                try:
                    result = collect_episode(scene, params, trainer.epsilon,
                                             config, rng)
                except obsm.TargetNotVisible:
                    episode_idx += workers
                    continue
                while not stop.is_set():
                    try:
                        out.put(result, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                episode_idx += workers
        except BaseException as exc:  # propagated to the learner below
            out.put(exc)

    threads = [threading.Thread(target=collector, args=(k,), daemon=True)
               for k in range(workers)]
    for t in threads:
        t.start()
    last_version = 0
    try:
        while trainer.updates < updates:
            item = out.get()
            if isinstance(item, BaseException):
                raise RuntimeError("collector worker crashed") from item
            learn_from_episode(*item)
            if trainer.target_version != last_version:
                publish()
                last_version = trainer.target_version
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=5.0)
