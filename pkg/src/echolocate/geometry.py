"""Shoebox world: room, agent, sources, actions, and the novelty reward.

The environment is deliberately small. An agent with ``K`` microphones
moves on a horizontal plane in fixed-length steps; each sound source pays
out ``r_plus`` exactly once per episode, the first time the agent comes
within ``reach_radius`` of it. All randomness flows through a per-state
``numpy.random.Generator`` so that a seed fully determines an episode.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, UsageError

TL, TR, BL, BR = "TL", "TR", "BL", "BR"
QUADRANTS = (TL, TR, BL, BR)

# +x, -x, +y, -y, then the optional vertical pair
_DIRECTIONS = np.array(
    [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ]
)
ACTION_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple[float, float, float] = (10.0, 10.0, 5.0)
    # one value for all six surfaces, or (x0, xL, y0, yL, z0, zL)
    wall_absorption: float | tuple[float, ...] = 0.5

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(not d > 0 for d in self.dims):
            raise ConfigurationError(f"room dims must be three positive lengths, got {self.dims}")
        absorb = self.absorption_per_wall()
        if np.any(absorb < 0) or np.any(absorb > 1):
            raise ConfigurationError(f"wall absorption must lie in [0, 1], got {self.wall_absorption}")

    def absorption_per_wall(self) -> np.ndarray:
        a = np.atleast_1d(np.asarray(self.wall_absorption, dtype=float))
        if a.size == 1:
            return np.repeat(a, 6)
        if a.size != 6:
            raise ConfigurationError("wall_absorption needs 1 or 6 values")
        return a

    def contains(self, point: Sequence[float]) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= 0.0) and np.all(p <= np.asarray(self.dims)))


@dataclass(frozen=True)
class MicArraySpec:
    offsets: tuple[tuple[float, float, float], ...] = ((0.25, 0.25, 0.0), (-0.25, -0.25, 0.0))

    def __post_init__(self) -> None:
        if len(self.offsets) < 1:
            raise ConfigurationError("a microphone array needs at least one microphone")

    @property
    def n_mics(self) -> int:
        return len(self.offsets)

    def positions(self, centre: np.ndarray) -> np.ndarray:
        return np.asarray(centre, dtype=float)[None, :] + np.asarray(self.offsets, dtype=float)


@dataclass(frozen=True)
class EnvConfig:
    room: RoomSpec = field(default_factory=RoomSpec)
    mics: MicArraySpec = field(default_factory=MicArraySpec)
    step_size: float = 0.5
    reach_radius: float = 0.6
    r_plus: float = 1.0
    r_minus: float = -0.1
    r_oob: float = -1.0
    horizon: int = 50
    reward_delay: int = 1
    clip_seconds: float = 0.5
    f_s: int = 16000
    n_sources: int = 1
    agent_height: float = 2.5
    source_height: float = 2.6
    vertical_actions: bool = False
    train_quadrants: tuple[str, ...] = (TL, TR, BL)
    eval_quadrants: tuple[str, ...] = (BR,)

    def __post_init__(self) -> None:
        dims = self.room.dims
        if not self.reach_radius > 0:
            raise ConfigurationError("reach_radius must be positive")
        if self.reach_radius >= min(dims[0], dims[1]):
            raise ConfigurationError("reach_radius must be smaller than the room extent")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        if not self.step_size > 0:
            raise ConfigurationError("step_size must be positive")
        if not (self.r_plus > 0 > self.r_minus >= self.r_oob):
            raise ConfigurationError("rewards must satisfy r_plus > 0 > r_minus >= r_oob")
        if self.reward_delay != 1:
            raise ConfigurationError("only a reward delay of one action period is supported")
        if self.n_sources < 1:
            raise ConfigurationError("need at least one source")
        if not self.clip_seconds > 0 or self.f_s <= 0:
            raise ConfigurationError("clip_seconds and f_s must be positive")
        for h in (self.agent_height, self.source_height):
            if not 0 < h < dims[2]:
                raise ConfigurationError(f"height {h} outside the room")
        for q in (*self.train_quadrants, *self.eval_quadrants):
            if q not in QUADRANTS:
                raise ConfigurationError(f"unknown quadrant {q!r}")

    @property
    def n_actions(self) -> int:
        return 6 if self.vertical_actions else 4

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.f_s))


@dataclass(frozen=True)
class SourceSpec:
    id: int
    position: tuple[float, float, float]
    signal_id: int = 0


class Event(enum.Enum):
    NONE = "none"
    FOUND = "found_new_source"
    OUT_OF_BOUNDS = "out_of_bounds"


Renderer = Callable[[np.ndarray, Sequence[SourceSpec]], np.ndarray]


@dataclass
class EnvState:
    config: EnvConfig
    agent: np.ndarray
    sources: list[SourceSpec]
    found: set[int]
    step_index: int
    rng: np.random.Generator
    renderer: Optional[Renderer] = None

    @property
    def terminal(self) -> bool:
        return len(self.found) == len(self.sources) or self.step_index >= self.config.horizon

    def active_sources(self) -> list[SourceSpec]:
        return [s for s in self.sources if s.id not in self.found]

    def observe(self) -> Optional[np.ndarray]:
        if self.renderer is None:
            return None
        return self.renderer(self.agent, self.active_sources())

    def fingerprint(self) -> tuple:
        """Hashable summary used for determinism checks."""
        return (
            self.agent.tobytes(),
            tuple((s.id, s.position, s.signal_id) for s in self.sources),
            tuple(sorted(self.found)),
            self.step_index,
            repr(self.rng.bit_generator.state),
        )


@dataclass
class StepOutcome:
    observation: Optional[np.ndarray]
    reward: float
    terminal: bool
    event: Event
    source_id: Optional[int] = None


def quadrant_of(x: float, y: float, room: RoomSpec) -> str:
    """Return the quadrant holding ``(x, y)``.

    The room is split at half its width and depth; points on a split line
    go to the higher-index quadrant in ``QUADRANTS`` order, so the centre
    belongs to ``BR``.
    """
    lx, ly = room.dims[0], room.dims[1]
    if not (0.0 <= x <= lx and 0.0 <= y <= ly):
        raise DomainError(f"point ({x}, {y}) lies outside the room")
    right = x >= lx / 2
    bottom = y <= ly / 2
    if bottom:
        return BR if right else BL
    return TR if right else TL


def _quadrant_bounds(q: str, room: RoomSpec) -> tuple[float, float, float, float]:
    hx, hy = room.dims[0] / 2, room.dims[1] / 2
    x0 = hx if q in (TR, BR) else 0.0
    y0 = 0.0 if q in (BL, BR) else hy
    return x0, x0 + hx, y0, y0 + hy


def sample_in_quadrants(rng: np.random.Generator, quadrants: Sequence[str], room: RoomSpec) -> tuple[float, float]:
    """Uniform point in the union of equally sized quadrants, never on the outer walls."""
    q = quadrants[int(rng.integers(len(quadrants)))]
    x0, x1, y0, y1 = _quadrant_bounds(q, room)
    while True:
        x = float(rng.uniform(x0, x1))
        y = float(rng.uniform(y0, y1))
        if 0.0 < x < room.dims[0] and 0.0 < y < room.dims[1]:
            return x, y


def reset(
    config: EnvConfig,
    mode: str = "train",
    seed: int | np.random.SeedSequence | None = 0,
    renderer: Optional[Renderer] = None,
) -> tuple[EnvState, Optional[np.ndarray]]:
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = np.random.default_rng(seed)
    room = config.room
    src_quadrants = config.train_quadrants if mode == "train" else config.eval_quadrants
    while True:
        ax, ay = sample_in_quadrants(rng, config.train_quadrants, room)
        agent = np.array([ax, ay, config.agent_height])
        sources = []
        for j in range(config.n_sources):
            sx, sy = sample_in_quadrants(rng, src_quadrants, room)
            sources.append(SourceSpec(id=j, position=(sx, sy, config.source_height), signal_id=j))
        if all(_distance(agent, s.position) > config.reach_radius for s in sources):
            break
    state = EnvState(
        config=config,
        agent=agent,
        sources=sources,
        found=set(),
        step_index=0,
        rng=rng,
        renderer=renderer,
    )
    return state, state.observe()


def place(
    config: EnvConfig,
    agent_xy: Sequence[float],
    source_positions: Sequence[Sequence[float]],
    renderer: Optional[Renderer] = None,
    seed: int = 0,
) -> EnvState:
    """Build a state at explicit coordinates (z defaults to the configured heights)."""
    agent = np.array([*agent_xy[:2], agent_xy[2] if len(agent_xy) > 2 else config.agent_height], dtype=float)
    if not config.room.contains(agent):
        raise DomainError(f"agent {agent} outside the room")
    sources = []
    for j, p in enumerate(source_positions):
        pos = (float(p[0]), float(p[1]), float(p[2]) if len(p) > 2 else config.source_height)
        if not config.room.contains(pos):
            raise DomainError(f"source {pos} outside the room")
        sources.append(SourceSpec(id=j, position=pos, signal_id=j))
    return EnvState(config, agent, sources, set(), 0, np.random.default_rng(seed), renderer)


def _distance(a: Sequence[float], b: Sequence[float]) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def action_vector(action: int, config: EnvConfig) -> np.ndarray:
    if not 0 <= action < config.n_actions:
        raise UsageError(f"action {action} outside the action set of size {config.n_actions}")
    return _DIRECTIONS[action] * config.step_size


def step(state: EnvState, action: int) -> StepOutcome:
    if state.terminal:
        raise UsageError("cannot step a terminal state; call reset()")
    cfg = state.config
    candidate = state.agent + action_vector(action, cfg)
    state.step_index += 1
    source_id = None
    if not cfg.room.contains(candidate):
        reward, event = cfg.r_oob, Event.OUT_OF_BOUNDS
    else:
        state.agent = candidate
        reward, event = cfg.r_minus, Event.NONE
        # nearest qualifying source wins when several are in reach
        hits = [
            (_distance(state.agent, s.position), s.id)
            for s in state.sources
            if s.id not in state.found and _distance(state.agent, s.position) <= cfg.reach_radius
        ]
        if hits:
            source_id = min(hits)[1]
            state.found.add(source_id)
            reward, event = cfg.r_plus, Event.FOUND
    return StepOutcome(state.observe(), reward, state.terminal, event, source_id)


def nearest_unfound(state: EnvState) -> SourceSpec:
    active = state.active_sources()
    if not active:
        raise UsageError("all sources have been found")
    return min(active, key=lambda s: (_distance(state.agent, s.position), s.id))


def oracle_action_set(state: EnvState) -> set[int]:
    """In-bounds actions that strictly reduce the distance to the nearest unfound source."""
    target = nearest_unfound(state)
    d0 = _distance(state.agent, target.position)
    good = set()
    for a in range(state.config.n_actions):
        candidate = state.agent + action_vector(a, state.config)
        if state.config.room.contains(candidate) and _distance(candidate, target.position) < d0:
            good.add(a)
    return good
