"""Perception pipeline, policies and the episode loop shared by training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import geometry as geo
from .acoustics import AcousticParams, SceneRenderer, SignalBank
from .errors import ConfigurationError
from .features import FeatureConfig, logmel
from .qnet import HistoryWindow, NetArchitecture, ParamStore, Transition, forward


class World:
    """Environment configuration plus everything needed to turn a pose into a FeatureMap."""

    def __init__(
        self,
        env: geo.EnvConfig,
        acoustics: AcousticParams = AcousticParams(),
        features: FeatureConfig = FeatureConfig(),
        signal_files: Optional[Mapping[int, str]] = None,
        loop_signals: bool = False,
    ) -> None:
        if not env.f_s == acoustics.f_s == features.f_s:
            raise ConfigurationError(
                f"sampling rates differ: env.f_s={env.f_s}, acoustics.f_s={acoustics.f_s}, features.f_s={features.f_s}"
            )
        self.env = env
        self.acoustics = acoustics
        self.features = features
        self.bank = SignalBank(acoustics.f_s, env.clip_seconds, signal_files, loop_signals)
        self.renderer = SceneRenderer(env.room, env.mics, self.bank, acoustics, env.clip_seconds)

    def with_horizon(self, horizon: int) -> "World":
        other = object.__new__(World)
        other.__dict__.update(self.__dict__)
        other.env = replace(self.env, horizon=horizon)
        return other

    def featurize(self, waveform: np.ndarray) -> np.ndarray:
        return logmel(waveform, self.features)

    def feature_at(self, agent: np.ndarray, sources: Sequence[geo.SourceSpec]) -> np.ndarray:
        return self.featurize(self.renderer(np.asarray(agent, dtype=float), sources))

    def input_shape(self) -> tuple[int, int, int]:
        return (self.env.mics.n_mics, self.features.n_mels, self.features.n_frames(self.env.clip_samples))


def epsilon_greedy(values: np.ndarray, epsilon: float, rng: Optional[np.random.Generator], semantics: str = "greedy") -> int:
    """Pick an action from Q-values.

    With ``semantics="greedy"`` (default) ``epsilon`` is the probability of
    acting greedily; with ``"explore"`` it is the probability of a uniformly
    random action. Ties in the argmax go to the lowest index.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    p_greedy = epsilon if semantics == "greedy" else 1.0 - epsilon
    if p_greedy >= 1.0:
        return int(np.argmax(values))
    if rng is None:
        raise ValueError("a random generator is needed when exploring")
    if rng.random() < p_greedy:
        return int(np.argmax(values))
    return int(rng.integers(len(values)))


class Policy:
    """Chooses actions from what it has heard so far.

    ``begin`` starts an episode with the first FeatureMap, ``act`` returns an
    action for the current input and ``observe`` feeds the next FeatureMap
    after an action was executed.
    """

    uses_features = True

    def begin(self, state: geo.EnvState, feature: Optional[np.ndarray]) -> None:
        self.current = feature

    def act(self, state: geo.EnvState) -> int:
        raise NotImplementedError

    def observe(self, action: int, feature: Optional[np.ndarray]) -> None:
        self.current = feature

    @property
    def input(self):
        return self.current


class QPolicy(Policy):
    """Epsilon-greedy over a Q-network; keeps the history window for the stateful variant."""

    def __init__(
        self,
        params: ParamStore,
        arch: NetArchitecture,
        epsilon: float = 1.0,
        rng: Optional[np.random.Generator] = None,
        semantics: str = "greedy",
    ) -> None:
        self.params = params
        self.arch = arch
        self.epsilon = epsilon
        self.rng = rng
        self.semantics = semantics

    def begin(self, state, feature):
        self.current = HistoryWindow(feature) if self.arch.variant == "stateful" else feature

    def values(self) -> np.ndarray:
        return forward(self.params, self.arch, self.current)

    def act(self, state):
        return epsilon_greedy(self.values(), self.epsilon, self.rng, self.semantics)

    def observe(self, action, feature):
        if self.arch.variant == "stateful":
            self.current = self.current.push(action, feature, self.arch.history_len)
        else:
            self.current = feature


class OraclePolicy(Policy):
    """Cheats: reads the true geometry and picks a distance-reducing action when one exists."""

    uses_features = False

    def act(self, state):
        good = geo.oracle_action_set(state)
        if good:
            return min(good)
        # boxed in: pick the in-bounds action that increases distance least
        target = geo.nearest_unfound(state).position
        best, best_d = 0, np.inf
        for a in range(state.config.n_actions):
            cand = state.agent + geo.action_vector(a, state.config)
            if state.config.room.contains(cand):
                d = float(np.linalg.norm(cand - np.asarray(target)))
                if d < best_d:
                    best, best_d = a, d
        return best


class RandomPolicy(Policy):
    uses_features = False

    def __init__(self, n_actions: int, seed=0) -> None:
        self.n_actions = n_actions
        self.rng = np.random.default_rng(seed)

    def act(self, state):
        return int(self.rng.integers(self.n_actions))


@dataclass
class EpisodeTrace:
    """What happened in one episode, independent of how the policy perceived it."""

    sources: list
    poses: list  # agent centre before each step, plus the final pose
    found: list  # sorted found ids before each step, plus the final set
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    events: list = field(default_factory=list)
    done: list = field(default_factory=list)  # all sources found after the step
    inputs: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return any(e == geo.Event.FOUND.value for e in self.events)

    def to_json(self) -> dict:
        return {
            "sources": [[s.id, list(s.position), s.signal_id] for s in self.sources],
            "poses": [list(map(float, p)) for p in self.poses],
            "found": [list(f) for f in self.found],
            "actions": list(self.actions),
            "rewards": list(self.rewards),
            "events": list(self.events),
            "done": list(self.done),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeTrace":
        sources = [geo.SourceSpec(int(i), tuple(p), int(sid)) for i, p, sid in d["sources"]]
        return cls(
            sources=sources,
            poses=[np.array(p, dtype=float) for p in d["poses"]],
            found=[tuple(f) for f in d["found"]],
            actions=list(d["actions"]),
            rewards=list(d["rewards"]),
            events=list(d["events"]),
            done=list(d["done"]),
        )


def run_episode(
    world: Optional[World],
    env: geo.EnvConfig,
    policy: Policy,
    mode: str,
    seed,
    stop_on_oob: bool = False,
    keep_inputs: bool = False,
) -> EpisodeTrace:
    """Reset the environment with ``seed`` and let ``policy`` act until the episode ends."""
    need_audio = world is not None and policy.uses_features
    renderer = world.renderer if need_audio else None
    state, obs = geo.reset(env, mode, seed, renderer)
    return run_from_state(world if need_audio else None, state, obs, policy, stop_on_oob, keep_inputs)


def run_from_state(world, state: geo.EnvState, obs, policy: Policy, stop_on_oob=False, keep_inputs=False) -> EpisodeTrace:
    feat = world.featurize(obs) if world is not None and obs is not None else None
    policy.begin(state, feat)
    trace = EpisodeTrace(
        sources=list(state.sources),
        poses=[state.agent.copy()],
        found=[tuple(sorted(state.found))],
    )
    if keep_inputs:
        trace.inputs.append(policy.input)
    while not state.terminal:
        a = policy.act(state)
        out = geo.step(state, a)
        nxt = world.featurize(out.observation) if world is not None and out.observation is not None else None
        policy.observe(a, nxt)
        trace.actions.append(int(a))
        trace.rewards.append(float(out.reward))
        trace.events.append(out.event.value)
        trace.done.append(len(state.found) == len(state.sources))
        trace.poses.append(state.agent.copy())
        trace.found.append(tuple(sorted(state.found)))
        if keep_inputs:
            trace.inputs.append(policy.input)
        if stop_on_oob and out.event is geo.Event.OUT_OF_BOUNDS:
            break
    return trace


def replay_inputs(world: World, trace: EpisodeTrace, arch: NetArchitecture) -> list:
    """Rebuild the policy inputs of a recorded episode by re-rendering every pose."""
    inputs = []
    current = None
    for i, (pose, found) in enumerate(zip(trace.poses, trace.found)):
        active = [s for s in trace.sources if s.id not in set(found)]
        feat = world.feature_at(pose, active)
        if arch.variant == "stateful":
            current = HistoryWindow(feat) if i == 0 else current.push(trace.actions[i - 1], feat, arch.history_len)
        else:
            current = feat
        inputs.append(current)
    return inputs


def trace_transitions(trace: EpisodeTrace, inputs: Sequence, episode_id: int) -> list[Transition]:
    return [
        Transition(inputs[k], trace.actions[k], trace.rewards[k], inputs[k + 1], bool(trace.done[k]), episode_id)
        for k in range(len(trace.actions))
    ]
