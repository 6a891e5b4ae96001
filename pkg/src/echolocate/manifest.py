"""Run manifests: a strict TOML schema covering every module's configuration.

An empty manifest yields the default protocol (10 x 10 x 5 m room, two
microphones, 0.5 m steps, 0.6 m reach radius, Adam at 1e-4, 150 updates
per epoch, hard target updates every 15 iterations at a delay of 15).
Unknown keys are fatal.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .acoustics import AcousticParams
from .errors import ConfigurationError
from .evaluation import EvalConfig
from .features import FeatureConfig
from .geometry import EnvConfig, MicArraySpec, RoomSpec
from .qnet import NetArchitecture
from .trainer import TrainConfig

OUT_ENV_VAR = "ECHOLOCATE_OUT"
STATEFUL_DEFAULT_EPOCHS = 15  # the memoryless default (30) comes from TrainConfig

_ENV_SPECIAL = {"room_dims", "wall_absorption", "mic_offsets"}
_ENV_KEYS = {f.name for f in fields(EnvConfig)} - {"room", "mics"} | _ENV_SPECIAL
_ACOUSTIC_KEYS = {f.name for f in fields(AcousticParams)} | {"signal_files", "loop_signals"}
_FEATURE_KEYS = {f.name for f in fields(FeatureConfig)}
_ARCH_KEYS = {f.name for f in fields(NetArchitecture)} - {"in_channels"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_EVAL_KEYS = {f.name for f in fields(EvalConfig)}
_SECTIONS = {
    "env": _ENV_KEYS,
    "acoustics": _ACOUSTIC_KEYS,
    "features": _FEATURE_KEYS,
    "arch": _ARCH_KEYS,
    "train": _TRAIN_KEYS,
    "eval": _EVAL_KEYS,
}
_TOP_KEYS = {"output_dir", "run_id"}


@dataclass(frozen=True)
class RunManifest:
    env: EnvConfig = field(default_factory=EnvConfig)
    acoustics: AcousticParams = field(default_factory=AcousticParams)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    arch: NetArchitecture = field(default_factory=NetArchitecture)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"
    run_id: str = "run"
    signal_files: tuple = ()  # ((signal_id, path), ...)
    loop_signals: bool = False

    def to_dict(self) -> dict:
        env = asdict(self.env)
        room = env.pop("room")
        mics = env.pop("mics")
        env["room_dims"] = list(room["dims"])
        wa = room["wall_absorption"]
        env["wall_absorption"] = list(wa) if isinstance(wa, (tuple, list)) else wa
        env["mic_offsets"] = [list(o) for o in mics["offsets"]]
        env["train_quadrants"] = list(env["train_quadrants"])
        env["eval_quadrants"] = list(env["eval_quadrants"])
        ac = asdict(self.acoustics)
        ac["signal_files"] = {str(k): str(v) for k, v in self.signal_files}
        ac["loop_signals"] = self.loop_signals
        arch = asdict(self.arch)
        arch.pop("in_channels")
        arch["conv_channels"] = list(arch["conv_channels"])
        feats = {k: v for k, v in asdict(self.features).items() if v is not None}
        return {
            "output_dir": self.output_dir,
            "run_id": self.run_id,
            "env": env,
            "acoustics": ac,
            "features": feats,
            "arch": arch,
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }

    def to_toml(self) -> str:
        d = self.to_dict()
        lines = [f"{k} = {json.dumps(d[k])}" for k in sorted(_TOP_KEYS)]
        for section in _SECTIONS:
            lines.append("")
            lines.append(f"[{section}]")
            sub = d[section]
            for k in sorted(sub):
                v = sub[k]
                if isinstance(v, dict):
                    items = ", ".join(f"{json.dumps(str(kk))} = {json.dumps(vv)}" for kk, vv in v.items())
                    lines.append(f"{k} = {{ {items} }}" if items else f"{k} = {{}}")
                else:
                    lines.append(f"{k} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that shapes training, excluding the epoch budget and evaluation."""
        d = self.to_dict()
        for k in ("output_dir", "run_id", "eval"):
            d.pop(k)
        d["train"].pop("epochs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resolved_output_dir(self, override: Optional[str] = None) -> Path:
        if override:
            return Path(override)
        base = os.environ.get(OUT_ENV_VAR) or self.output_dir
        return Path(base) / self.run_id


def _check_keys(section: str, table: dict, allowed: set) -> None:
    if not isinstance(table, dict):
        raise ConfigurationError(f"[{section}] must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(section + '.' + u for u in unknown)}")


def _tupleize(v: Any) -> Any:
    return tuple(_tupleize(x) for x in v) if isinstance(v, list) else v


def _build(cls, section: str, values: dict):
    try:
        return cls(**{k: _tupleize(v) for k, v in values.items()})
    except ConfigurationError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from None
    except TypeError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from None


def from_dict(data: dict) -> RunManifest:
    top_unknown = sorted(set(data) - _TOP_KEYS - set(_SECTIONS))
    if top_unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(top_unknown)}")
    sec = {}
    for name, allowed in _SECTIONS.items():
        sec[name] = dict(data.get(name, {}))
        _check_keys(name, sec[name], allowed)

    # one sampling rate for the whole pipeline; explicit values must agree
    rates = {f"{s}.f_s": sec[s]["f_s"] for s in ("env", "acoustics", "features") if "f_s" in sec[s]}
    if len(set(rates.values())) > 1:
        raise ConfigurationError("sampling rates disagree: " + ", ".join(f"{k}={v}" for k, v in rates.items()))
    if rates:
        f_s = next(iter(rates.values()))
        for s in ("env", "acoustics", "features"):
            sec[s]["f_s"] = f_s

    env_kw = dict(sec["env"])
    room_kw = {}
    if "room_dims" in env_kw:
        room_kw["dims"] = _tupleize(env_kw.pop("room_dims"))
    if "wall_absorption" in env_kw:
        room_kw["wall_absorption"] = _tupleize(env_kw.pop("wall_absorption"))
    mic_kw = {}
    if "mic_offsets" in env_kw:
        mic_kw["offsets"] = _tupleize(env_kw.pop("mic_offsets"))
    if "horizon" in sec["train"] and "horizon" in env_kw and sec["train"]["horizon"] != env_kw["horizon"]:
        raise ConfigurationError(f"horizons disagree: env.horizon={env_kw['horizon']}, train.horizon={sec['train']['horizon']}")
    if "horizon" in env_kw and "horizon" not in sec["train"]:
        sec["train"]["horizon"] = env_kw["horizon"]
    elif "horizon" in sec["train"] and "horizon" not in env_kw:
        env_kw["horizon"] = sec["train"]["horizon"]
    env_kw["room"] = _build(RoomSpec, "env", room_kw)
    env_kw["mics"] = _build(MicArraySpec, "env", mic_kw)
    env = _build(EnvConfig, "env", env_kw)

    ac_kw = dict(sec["acoustics"])
    signal_files = tuple(sorted((int(k), str(v)) for k, v in ac_kw.pop("signal_files", {}).items()))
    loop = bool(ac_kw.pop("loop_signals", False))
    acoustics = _build(AcousticParams, "acoustics", ac_kw)
    features = _build(FeatureConfig, "features", sec["features"])

    arch_kw = dict(sec["arch"])
    if "n_actions" in arch_kw and arch_kw["n_actions"] != env.n_actions:
        raise ConfigurationError(
            f"arch.n_actions={arch_kw['n_actions']} does not match the environment's {env.n_actions} actions (env.vertical_actions)"
        )
    arch_kw["n_actions"] = env.n_actions
    arch_kw["in_channels"] = env.mics.n_mics
    arch = _build(NetArchitecture, "arch", arch_kw)
    train_kw = dict(sec["train"])
    if "epochs" not in train_kw and arch.variant == "stateful":
        train_kw["epochs"] = STATEFUL_DEFAULT_EPOCHS
    train = _build(TrainConfig, "train", train_kw)
    ev = _build(EvalConfig, "eval", sec["eval"])

    if features.n_frames(env.clip_samples) < 1:
        raise ConfigurationError(
            f"env.clip_seconds={env.clip_seconds} gives {env.clip_samples} samples, fewer than features.win={features.win}"
        )
    return RunManifest(
        env=env,
        acoustics=acoustics,
        features=features,
        arch=arch,
        train=train,
        eval=ev,
        output_dir=str(data.get("output_dir", "runs")),
        run_id=str(data.get("run_id", "run")),
        signal_files=signal_files,
        loop_signals=loop,
    )


def parse_manifest(path: Optional[str | Path]) -> RunManifest:
    """Load and validate a manifest file; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigurationError(f"{where}: {exc}") from None
    return from_dict(data)


def with_overrides(m: RunManifest, **changes) -> RunManifest:
    """Replace nested values, e.g. ``with_overrides(m, train={"seed": 3})``."""
    out = {}
    for section, vals in changes.items():
        if isinstance(vals, dict):
            out[section] = dataclasses.replace(getattr(m, section), **vals)
        else:
            out[section] = vals
    return dataclasses.replace(m, **out)
