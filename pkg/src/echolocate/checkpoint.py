"""Versioned binary checkpoints.

Layout::

    8 bytes   magic b"ECHOCKPT"
    4 bytes   format version, little-endian uint32
    8 bytes   header length, little-endian uint64
    n bytes   UTF-8 JSON header (sorted keys)
    ...       raw little-endian arrays, in header order

The header carries the architecture, optimiser hyperparameters and step
counter, epoch and epsilon, the random-stream key, the config hash and the
replay buffer as compact trajectories. Arrays are the online and target
parameters, Adam moments and the target-delay snapshot queue.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import deque
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .qnet import NetArchitecture, OptState

MAGIC = b"ECHOCKPT"
FORMAT_VERSION = 1


def _arrays(ts) -> list[tuple[str, np.ndarray]]:
    out = []
    for prefix, store in (("online", ts.params), ("target", ts.target), ("adam_m", ts.opt.m), ("adam_v", ts.opt.v)):
        out += [(f"{prefix}/{k}", v) for k, v in store.items()]
    for i, snap in enumerate(ts.snapshots):
        out += [(f"snapshot{i}/{k}", v) for k, v in snap.items()]
    return out


def encode(ts, meta: Optional[dict] = None) -> bytes:
    arrays = _arrays(ts)
    index, blobs, offset = [], [], 0
    for name, arr in arrays:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": asdict(ts.arch),
        "train": asdict(ts.config),
        "epoch": ts.epoch,
        "epsilon": ts.epsilon,
        "update_iter": ts.update_iter,
        "next_episode_id": ts.next_episode_id,
        "rng": {"seed": ts.config.seed, "epoch": ts.epoch, "update_iter": ts.update_iter},
        "opt": {"t": ts.opt.t, "lr": ts.opt.lr, "beta1": ts.opt.beta1, "beta2": ts.opt.beta2, "eps": ts.opt.eps},
        "n_snapshots": len(ts.snapshots),
        "param_names": list(ts.params),
        "replay": [
            {"id": ep.episode_id, "success": bool(ep.success), "trajectory": ep.trajectory}
            for ep in ts.replay.episodes
        ],
        # wall time is left out so identical runs give identical bytes
        "log": [{k: v for k, v in asdict(r).items() if k != "wall_time"} for r in ts.log],
        "meta": meta or {},
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(path, ts, meta: Optional[dict] = None) -> str:
    """Write ``ts`` to ``path`` and return the SHA-256 of the bytes written."""
    data = encode(ts, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse a checkpoint into ``(header, {name: array})``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    body = memoryview(data)[20 + hlen :]
    arrays = {}
    for ent in header["arrays"]:
        raw = body[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"])
        arrays[ent["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, arrays


def _group(arrays: dict, prefix: str, names: list[str]) -> dict:
    return {k: arrays[f"{prefix}/{k}"].copy() for k in names}


def load_params(path) -> tuple[NetArchitecture, dict]:
    header, arrays = read_checkpoint(path)
    arch = arch_from_dict(header["arch"])
    return arch, _group(arrays, "online", header["param_names"])


def arch_from_dict(d: dict) -> NetArchitecture:
    d = dict(d)
    d["conv_channels"] = tuple(d["conv_channels"])
    return NetArchitecture(**d)


def load_trainer(path, world):
    """Restore a TrainerState that continues exactly where the saved run stopped."""
    from .trainer import TrainConfig, TrainLogRecord, TrainerState, rebuild_replay

    header, arrays = read_checkpoint(path)
    arch = arch_from_dict(header["arch"])
    config = TrainConfig(**header["train"])
    names = header["param_names"]
    o = header["opt"]
    opt = OptState(
        m=_group(arrays, "adam_m", names),
        v=_group(arrays, "adam_v", names),
        t=o["t"], lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
    )
    snaps = deque(
        (_group(arrays, f"snapshot{i}", names) for i in range(header["n_snapshots"])),
        maxlen=config.target_delay + 1,
    )
    world = world.with_horizon(config.horizon)
    return TrainerState(
        config=config,
        arch=arch,
        world=world,
        params=_group(arrays, "online", names),
        target=_group(arrays, "target", names),
        opt=opt,
        snapshots=snaps,
        replay=rebuild_replay(world, arch, config.replay_capacity, header["replay"]),
        epoch=header["epoch"],
        update_iter=header["update_iter"],
        next_episode_id=header["next_episode_id"],
        log=[TrainLogRecord(wall_time=0.0, **r) for r in header["log"]],
    ), header.get("meta", {})
