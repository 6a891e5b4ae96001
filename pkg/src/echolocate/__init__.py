"""Acoustic source localisation with deep Q-learning in simulated shoebox rooms."""

from .acoustics import AcousticParams, SceneRenderer, enumerate_image_sources, render_rir
from .agent import OraclePolicy, QPolicy, RandomPolicy, World, run_episode
from .checkpoint import load_params, load_trainer, save_checkpoint
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigurationError,
    DegenerateGeometryError,
    DomainError,
    EcholocateError,
    InputTooShortError,
    UsageError,
)
from .evaluation import EvalConfig, MetricsReport, evaluate, policy_field
from .features import FeatureConfig, logmel
from .geometry import EnvConfig, MicArraySpec, RoomSpec, oracle_action_set, place, reset, step
from .manifest import RunManifest, parse_manifest
from .qnet import NetArchitecture, forward, init_params
from .replay import ReplayBuffer
from .trainer import TrainConfig, train

__version__ = "0.1.0"
