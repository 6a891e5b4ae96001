"""Deep Q-learning loop.

One epoch is two phases. During the rollout phase the online and target
networks are frozen and ``episodes_per_epoch`` epsilon-greedy episodes are
collected into the replay buffer. During the update phase the online
network takes ``updates_per_epoch`` Adam steps on minibatches drawn
without replacement, and every ``target_update_period`` steps the target
network is set to the online parameters from ``target_delay`` steps ago.

Every random draw is keyed on ``(seed, epoch, index)``, so a run can be
resumed from any epoch boundary and continue bit-identically.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .agent import QPolicy, World, epsilon_greedy, replay_inputs, run_episode, trace_transitions, EpisodeTrace
from .errors import ConfigurationError
from .qnet import (
    NetArchitecture,
    OptState,
    ParamStore,
    adam_step,
    copy_params,
    hard_update,
    init_params,
    loss_and_grads,
    params_hash,
)
from .replay import EpisodeRecord, ReplayBuffer

log = logging.getLogger(__name__)

_ROLLOUT, _SAMPLE = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 64
    horizon: int = 50
    gamma: float = 0.9
    lr: float = 1e-4
    batch_size: int = 64
    updates_per_epoch: int = 150
    target_update_period: int = 15
    target_delay: int = 15
    replay_capacity: int = 4000
    epsilon0: float = 0.6
    epsilon_cap: float = 0.95
    anneal: float = 0.95
    epsilon_semantics: str = "greedy"
    seed: int = 0

    def __post_init__(self) -> None:
        counts = ("episodes_per_epoch", "horizon", "batch_size", "updates_per_epoch", "target_update_period", "replay_capacity")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"train.{name} must be >= 1")
        if self.epochs < 0 or self.target_delay < 0:
            raise ConfigurationError("train.epochs and train.target_delay must be >= 0")
        if not (0 < self.epsilon0 <= 1 and 0 < self.epsilon_cap <= 1):
            raise ConfigurationError("epsilon0 and epsilon_cap must lie in (0, 1]")
        if not 0 < self.anneal <= 1:
            raise ConfigurationError("anneal must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if self.epsilon_semantics not in ("greedy", "explore"):
            raise ConfigurationError("epsilon_semantics must be 'greedy' or 'explore'")
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")


def epsilon_at(epoch: int, epsilon0: float = 0.6, cap: float = 0.95, anneal: float = 0.95) -> float:
    """Closed form of ``eps[k+1] = 1 - (1 - eps[k]) * anneal``, capped at ``cap``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(cap, 1.0 - (1.0 - epsilon0) * anneal**epoch)


def select_action(values: np.ndarray, epsilon: float, seed=None, semantics: str = "greedy") -> int:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return epsilon_greedy(np.asarray(values), epsilon, rng, semantics)


def _seq(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *map(int, key)])


def rollout_episode(
    world: World,
    params: ParamStore,
    arch: NetArchitecture,
    epsilon: float,
    seed,
    episode_id: int = -1,
    semantics: str = "greedy",
) -> EpisodeRecord:
    """One training episode (train-mode placement) under an epsilon-greedy policy."""
    env_seed, act_seed = np.random.SeedSequence(seed).spawn(2) if not isinstance(seed, np.random.SeedSequence) else seed.spawn(2)
    policy = QPolicy(params, arch, epsilon, np.random.default_rng(act_seed), semantics)
    trace = run_episode(world, world.env, policy, "train", env_seed, keep_inputs=True)
    transitions = trace_transitions(trace, trace.inputs, episode_id)
    trace.inputs = []
    return EpisodeRecord(transitions, trace.success, episode_id, trajectory=trace.to_json())


@dataclass
class TrainLogRecord:
    epoch: int
    mean_episode_reward: float
    success_fraction: float
    mean_loss: float
    epsilon: float
    wall_time: float
    replay_size: int
    params_hash: str


@dataclass
class TrainerState:
    config: TrainConfig
    arch: NetArchitecture
    world: World
    params: ParamStore
    target: ParamStore
    opt: OptState
    snapshots: deque
    replay: ReplayBuffer
    epoch: int = 0
    update_iter: int = 0
    next_episode_id: int = 0
    log: list = field(default_factory=list)
    threads: int = 1

    @property
    def epsilon(self) -> float:
        c = self.config
        return epsilon_at(self.epoch, c.epsilon0, c.epsilon_cap, c.anneal)


def init_trainer(config: TrainConfig, arch: NetArchitecture, world: World, threads: int = 1) -> TrainerState:
    if arch.n_actions != world.env.n_actions:
        raise ConfigurationError(f"arch.n_actions={arch.n_actions} but the environment has {world.env.n_actions} actions")
    if arch.in_channels != world.env.mics.n_mics:
        raise ConfigurationError(f"arch.in_channels={arch.in_channels} but the array has {world.env.mics.n_mics} mics")
    world = world.with_horizon(config.horizon)
    params = init_params(arch, config.seed)
    return TrainerState(
        config=config,
        arch=arch,
        world=world,
        params=params,
        target=copy_params(params),
        opt=OptState.zeros_like(params, lr=config.lr),
        snapshots=deque([copy_params(params)], maxlen=config.target_delay + 1),
        replay=ReplayBuffer(config.replay_capacity),
        threads=threads,
    )


def _rollouts(ts: TrainerState, epsilon: float) -> list[EpisodeRecord]:
    c = ts.config
    first_id = ts.next_episode_id

    def one(i: int) -> EpisodeRecord:
        return rollout_episode(ts.world, ts.params, ts.arch, epsilon, _seq(c.seed, _ROLLOUT, ts.epoch, i), first_id + i, c.epsilon_semantics)

    if ts.threads > 1:
        with ThreadPoolExecutor(ts.threads) as pool:
            return list(pool.map(one, range(c.episodes_per_epoch)))
    return [one(i) for i in range(c.episodes_per_epoch)]


def run_epoch(ts: TrainerState) -> TrainerState:
    c = ts.config
    t0 = time.perf_counter()
    epsilon = ts.epsilon
    episodes = _rollouts(ts, epsilon)
    for ep in episodes:
        ts.replay.push_episode(ep)
    ts.next_episode_id += len(episodes)

    losses = []
    for it in range(c.updates_per_epoch):
        batch = ts.replay.sample(c.batch_size, np.random.default_rng(_seq(c.seed, _SAMPLE, ts.epoch, it)))
        loss, grads = loss_and_grads(ts.params, ts.target, batch, c.gamma, ts.arch)
        ts.params, ts.opt = adam_step(ts.params, grads, ts.opt)
        ts.update_iter += 1
        ts.snapshots.append(ts.params)  # adam_step returns fresh arrays, so no copy needed
        if ts.update_iter % c.target_update_period == 0:
            ts.target = hard_update(ts.target, ts.snapshots, c.target_delay)
        losses.append(loss)

    rewards = [sum(t.reward for t in ep.transitions) for ep in episodes]
    record = TrainLogRecord(
        epoch=ts.epoch,
        mean_episode_reward=float(np.mean(rewards)),
        success_fraction=float(np.mean([ep.success for ep in episodes])),
        mean_loss=float(np.mean(losses)) if losses else 0.0,
        epsilon=epsilon,
        wall_time=time.perf_counter() - t0,
        replay_size=len(ts.replay),
        params_hash=params_hash(ts.params),
    )
    ts.log.append(record)
    ts.epoch += 1
    log.info(
        "epoch %d: reward %.3f success %.2f loss %.4f eps %.3f (%.1fs)",
        record.epoch, record.mean_episode_reward, record.success_fraction, record.mean_loss, epsilon, record.wall_time,
    )
    return ts


def rebuild_replay(world: World, arch: NetArchitecture, capacity: int, episodes: list[dict]) -> ReplayBuffer:
    """Re-render stored trajectories into a buffer identical to the one that was saved."""
    buf = ReplayBuffer(capacity)
    for ep in episodes:
        trace = EpisodeTrace.from_json(ep["trajectory"])
        inputs = replay_inputs(world, trace, arch)
        record = EpisodeRecord(trace_transitions(trace, inputs, ep["id"]), bool(ep["success"]), ep["id"], ep["trajectory"])
        buf.episodes.append(record)
        buf._size += len(record)
    return buf


def train(
    config: TrainConfig,
    arch: NetArchitecture,
    world: World,
    out_dir: Optional[Path] = None,
    resume: Optional[TrainerState] = None,
    threads: int = 1,
    checkpoint_meta: Optional[dict] = None,
) -> TrainerState:
    """Run epochs until ``config.epochs`` is reached, checkpointing after each one.

    ``resume`` continues from a loaded state; its own config is replaced by
    ``config`` so that the epoch budget can be extended.
    """
    from .checkpoint import save_checkpoint

    if resume is not None:
        ts = resume
        ts.config = config
        ts.threads = threads
    else:
        ts = init_trainer(config, arch, world, threads)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        if resume is None:
            save_checkpoint(out_dir / "checkpoints" / f"epoch_{ts.epoch:04d}.ckpt", ts, checkpoint_meta)
    while ts.epoch < config.epochs:
        run_epoch(ts)
        if out_dir is not None:
            with open(out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(ts.log[-1]), sort_keys=True) + "\n")
            save_checkpoint(out_dir / "checkpoints" / f"epoch_{ts.epoch:04d}.ckpt", ts, checkpoint_meta)
    return ts
