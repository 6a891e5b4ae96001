"""Evaluation metrics (accuracy, reachability, average total reward) and policy fields.

All three metrics share one protocol: ``n_trials`` random placements with
the source in the held-out quadrant, then a greedy rollout.

* accuracy: the first action strictly reduces the distance to the source
  and stays in bounds;
* reachability: the source is touched within ``max_steps`` with no wall
  clash;
* average total reward: sparse rewards plus a shaping term proportional to
  the distance covered toward the source at each step.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import geometry as geo
from .agent import OraclePolicy, Policy, QPolicy, World, run_from_state
from .errors import ConfigurationError
from .qnet import NetArchitecture, ParamStore


@dataclass(frozen=True)
class EvalConfig:
    n_trials: int = 1000
    max_steps: int = 50
    soft_reward_scale: float = 0.1
    soft_reward_sign: str = "toward"  # "toward": scale*(d_prev - d); "printed": scale*(d - d_prev)
    step_penalty: bool = False  # add r_minus on ordinary steps
    stop_on_clash: bool = True
    seed: int = 12345
    mode: str = "eval"

    def __post_init__(self) -> None:
        if self.n_trials < 1:
            raise ConfigurationError("eval.n_trials must be >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("eval.max_steps must be >= 0")
        if self.soft_reward_sign not in ("toward", "printed"):
            raise ConfigurationError("eval.soft_reward_sign must be 'toward' or 'printed'")
        if self.mode not in ("train", "eval"):
            raise ConfigurationError("eval.mode must be 'train' or 'eval'")


@dataclass
class TrialRecord:
    trial: int
    agent_start: list
    source: list
    first_action: int
    optimal_actions: list
    correct: bool
    steps: int
    reached: bool
    clashed: bool
    total_reward: float


@dataclass
class MetricsReport:
    accuracy: float
    reachability: float
    avg_total_reward: float
    n_trials: int
    max_steps: int
    trials: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "reachability": self.reachability,
            "avg_total_reward": self.avg_total_reward,
            "n_trials": self.n_trials,
            "max_steps": self.max_steps,
        }

    def to_json(self, with_trials: bool = True) -> str:
        d = self.summary()
        if with_trials:
            d["trials"] = [asdict(t) for t in self.trials]
        return json.dumps(d, sort_keys=True, indent=1)

    def to_text(self) -> str:
        return (
            f"accuracy      {self.accuracy:7.1%}\n"
            f"reachability  {self.reachability:7.1%}\n"
            f"reward        {self.avg_total_reward:+7.3f}\n"
            f"trials        {self.n_trials} (max {self.max_steps} steps)\n"
        )


def soft_reward(d_prev: float, d_now: float, scale: float = 0.1, sign: str = "toward") -> float:
    delta = d_prev - d_now if sign == "toward" else d_now - d_prev
    return scale * delta


def _trial(world: World, make_policy: Callable[[], Policy], cfg: EvalConfig, trial: int) -> TrialRecord:
    policy = make_policy()
    env = replace(world.env, horizon=max(1, cfg.max_steps))
    renderer = world.renderer if policy.uses_features else None
    state, obs = geo.reset(env, cfg.mode, np.random.SeedSequence([cfg.seed, trial]), renderer)
    optimal = sorted(geo.oracle_action_set(state))
    start = state.agent.tolist()
    source = list(state.sources[0].position)

    if cfg.max_steps == 0:
        # no movement budget: only the first decision is scored
        featw = world if policy.uses_features else None
        feat = featw.featurize(obs) if featw is not None else None
        policy.begin(state, feat)
        first = int(policy.act(state))
        return TrialRecord(trial, start, source, first, optimal, first in optimal, 0, False, False, 0.0)

    trace = run_from_state(world if policy.uses_features else None, state, obs, policy, stop_on_oob=cfg.stop_on_clash)
    c = world.env
    total = 0.0
    for k, (a, ev) in enumerate(zip(trace.actions, trace.events)):
        unfound = [s for s in trace.sources if s.id not in set(trace.found[k])]
        target = min(unfound, key=lambda s: (np.linalg.norm(trace.poses[k] - np.asarray(s.position)), s.id)).position
        d_prev = float(np.linalg.norm(trace.poses[k] - np.asarray(target)))
        d_now = float(np.linalg.norm(trace.poses[k + 1] - np.asarray(target)))
        if ev == geo.Event.FOUND.value:
            total += c.r_plus
        elif ev == geo.Event.OUT_OF_BOUNDS.value:
            total += c.r_oob
        elif cfg.step_penalty:
            total += c.r_minus
        total += soft_reward(d_prev, d_now, cfg.soft_reward_scale, cfg.soft_reward_sign)
    clashed = geo.Event.OUT_OF_BOUNDS.value in trace.events
    reached = trace.success and not clashed
    first = trace.actions[0]
    return TrialRecord(trial, start, source, first, optimal, first in optimal, len(trace.actions), reached, clashed, total)


def evaluate(
    world: World,
    make_policy: Callable[[], Policy],
    cfg: EvalConfig = EvalConfig(),
    threads: int = 1,
) -> MetricsReport:
    """Run every trial and aggregate the three metrics.

    ``make_policy`` is called once per trial so that stateful policies
    start each trial with an empty history.
    """

    def one(i: int) -> TrialRecord:
        return _trial(world, make_policy, cfg, i)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            trials = list(pool.map(one, range(cfg.n_trials)))
    else:
        trials = [one(i) for i in range(cfg.n_trials)]
    n = len(trials)
    return MetricsReport(
        accuracy=sum(t.correct for t in trials) / n,
        reachability=sum(t.reached for t in trials) / n,
        avg_total_reward=float(sum(t.total_reward for t in trials) / n),
        n_trials=n,
        max_steps=cfg.max_steps,
        trials=trials,
    )


def greedy(params: ParamStore, arch: NetArchitecture) -> Callable[[], Policy]:
    return lambda: QPolicy(params, arch, epsilon=1.0)


def evaluate_params(params, arch, world, cfg=EvalConfig(), threads=1) -> MetricsReport:
    return evaluate(world, greedy(params, arch), cfg, threads)


def accuracy(params, arch, world, cfg=EvalConfig(), threads=1) -> float:
    return evaluate_params(params, arch, world, cfg, threads).accuracy


def reachability(params, arch, world, cfg=EvalConfig(), threads=1) -> float:
    return evaluate_params(params, arch, world, cfg, threads).reachability


def avg_total_reward(params, arch, world, cfg=EvalConfig(), threads=1) -> float:
    return evaluate_params(params, arch, world, cfg, threads).avg_total_reward


# ---------------------------------------------------------------- policy field


@dataclass
class PolicyField:
    grid_step: float
    source: tuple
    cells: list  # (x, y, action, dx, dy, reduces_distance)
    trajectory: list  # agent (x, y, z) per step of one greedy rollout
    trajectory_events: list

    def fraction_reducing(self) -> float:
        return sum(c[5] for c in self.cells) / len(self.cells) if self.cells else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "action", "dx", "dy"])
            for x, y, a, dx, dy, _ in self.cells:
                w.writerow([f"{x:.6g}", f"{y:.6g}", geo.ACTION_NAMES[a], f"{dx:.6g}", f"{dy:.6g}"])

    def trajectory_json(self) -> str:
        return json.dumps(
            {
                "source": list(self.source),
                "grid_step": self.grid_step,
                "poses": [list(map(float, p)) for p in self.trajectory],
                "events": self.trajectory_events,
            },
            indent=1,
        )


def policy_field(
    make_policy: Callable[[], Policy],
    world: World,
    grid_step: float,
    source: Sequence[float],
    start: Optional[Sequence[float]] = None,
    max_steps: int = 50,
) -> PolicyField:
    """Greedy action at the centre of every grid cell, plus one trajectory from ``start``."""
    if not grid_step > 0:
        raise ConfigurationError("grid_step must be positive")
    env = world.env
    lx, ly = env.room.dims[0], env.room.dims[1]
    xs = (np.arange(int(np.floor(lx / grid_step + 1e-9))) + 0.5) * grid_step
    ys = (np.arange(int(np.floor(ly / grid_step + 1e-9))) + 0.5) * grid_step
    cells = []
    for y in ys:
        for x in xs:
            policy = make_policy()
            state = geo.place(env, (x, y), [source], world.renderer if policy.uses_features else None)
            obs = state.observe()
            policy.begin(state, world.featurize(obs) if obs is not None else None)
            a = int(policy.act(state))
            vec = geo.action_vector(a, env)
            d0 = np.linalg.norm(state.agent - np.asarray(state.sources[0].position))
            d1 = np.linalg.norm(state.agent + vec - np.asarray(state.sources[0].position))
            cells.append((float(x), float(y), a, float(vec[0]), float(vec[1]), bool(d1 < d0 and env.room.contains(state.agent + vec))))

    if start is None:
        start = (grid_step / 2, ly - grid_step / 2)
    policy = make_policy()
    tenv = replace(env, horizon=max(1, max_steps))
    state = geo.place(tenv, start, [source], world.renderer if policy.uses_features else None)
    trace = run_from_state(world if policy.uses_features else None, state, state.observe(), policy, stop_on_oob=True)
    src = geo.place(env, start, [source]).sources[0].position
    return PolicyField(grid_step, tuple(src), cells, [p.tolist() for p in trace.poses], trace.events)
