"""Command-line entry point.

Subcommands::

    echolocate train          --manifest m.toml --seed 7 --out runs/x
    echolocate eval           --checkpoint c.ckpt --trials 1000
    echolocate render-rir     --source 2 3 1.5 --mic 5 3 1.5
    echolocate render-field   --checkpoint c.ckpt --grid-step 0.5 --source 7.5 2.5
    echolocate replay-inspect --checkpoint c.ckpt
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from itertools import count
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .acoustics import enumerate_image_sources, render_rir, write_wav
from .agent import OraclePolicy, QPolicy, RandomPolicy, World
from .checkpoint import load_params, load_trainer, read_checkpoint, save_checkpoint
from .errors import EcholocateError
from .evaluation import EvalConfig, evaluate, policy_field
from .manifest import RunManifest, parse_manifest, with_overrides
from .qnet import init_params
from .trainer import train

log = logging.getLogger("echolocate")


def build_world(m: RunManifest) -> World:
    return World(m.env, m.acoustics, m.features, dict(m.signal_files), m.loop_signals)


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _load_manifest(args) -> RunManifest:
    m = parse_manifest(args.manifest)
    if args.seed is not None:
        m = with_overrides(m, train={"seed": args.seed})
    return m


def _out_dir(args, m: RunManifest) -> Path:
    out = m.resolved_output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _policy_factory(args, m: RunManifest):
    if args.policy == "oracle":
        return lambda: OraclePolicy()
    if args.policy == "random":
        seeds = count()
        return lambda: RandomPolicy(m.env.n_actions, np.random.SeedSequence([m.train.seed, next(seeds)]))
    if args.checkpoint:
        arch, params = load_params(args.checkpoint)
    else:
        arch, params = m.arch, init_params(m.arch, m.train.seed)
    return lambda: QPolicy(params, arch, epsilon=1.0)


def _eval_config(args, m: RunManifest) -> EvalConfig:
    changes = {}
    if getattr(args, "trials", None) is not None:
        changes["n_trials"] = args.trials
    if getattr(args, "max_steps", None) is not None:
        changes["max_steps"] = args.max_steps
    return replace(m.eval, **changes)


def cmd_train(args) -> int:
    m = _load_manifest(args)
    if args.epochs is not None:
        m = with_overrides(m, train={"epochs": args.epochs})
    out = _out_dir(args, m)
    (out / "manifest.resolved.toml").write_text(m.to_toml())
    world = build_world(m)
    meta = {"config_hash": m.config_hash()}
    resume = None
    if args.resume:
        resume, old_meta = load_trainer(args.resume, world)
        if old_meta.get("config_hash") != meta["config_hash"]:
            log.error("checkpoint %s was produced by a different configuration", args.resume)
            return 1
        log.info("resuming from epoch %d", resume.epoch)
    ts = train(m.train, m.arch, world, out, resume=resume, threads=args.threads, checkpoint_meta=meta)
    final = out / "final.ckpt"
    digest = save_checkpoint(final, ts, meta)
    (out / "final.ckpt.sha256").write_text(digest + "\n")
    if not args.no_eval:
        report = evaluate(world, lambda: QPolicy(ts.params, ts.arch, 1.0), m.eval, args.threads)
        (out / "metrics.json").write_text(report.to_json(with_trials=False) + "\n")
        _write_jsonl(out / "eval_trials.jsonl", (asdict(t) for t in report.trials))
        print(report.to_text(), end="")
    print(f"checkpoint {final} sha256 {digest}")
    return 0


def cmd_eval(args) -> int:
    m = _load_manifest(args)
    cfg = _eval_config(args, m)
    world = build_world(m)
    report = evaluate(world, _policy_factory(args, m), cfg, args.threads)
    out = _out_dir(args, m)
    (out / "metrics.json").write_text(report.to_json(with_trials=False) + "\n")
    (out / "metrics.txt").write_text(report.to_text())
    _write_jsonl(out / "eval_trials.jsonl", (asdict(t) for t in report.trials))
    print(report.to_text(), end="")
    if args.json:
        print(report.to_json(with_trials=False))
    return 0


def cmd_render_rir(args) -> int:
    from .features import logmel

    m = _load_manifest(args)
    out = _out_dir(args, m)
    src = tuple(args.source)
    if args.agent is not None:
        # full observation at an agent pose, through the configured mic array
        world = build_world(m)
        state = geo.place(m.env, args.agent, [src], world.renderer)
        wave = state.observe()
        path = Path(args.wav or out / "observation.wav")
        peak = np.max(np.abs(wave))
        write_wav(path, wave / peak if peak > 1 else wave, m.acoustics.f_s)
        if args.features_csv:
            fm = logmel(wave, m.features)
            with open(args.features_csv, "w") as fh:
                fh.write("channel,mel,frame,value\n")
                for (k, b, t), v in np.ndenumerate(fm):
                    fh.write(f"{k},{b},{t},{v:.6g}\n")
        print(f"wrote {path}")
        return 0
    mics = args.mic or [[src[0] + 3.43, src[1], src[2]]]
    images = enumerate_image_sources(m.env.room, src, m.acoustics.max_order)
    rirs = [render_rir(images, mic, m.acoustics) for mic in mics]
    n = max(len(r) for r in rirs)
    stack = np.zeros((len(rirs), n))
    for i, r in enumerate(rirs):
        stack[i, : len(r)] = r
    peak = np.max(np.abs(stack))
    path = Path(args.wav or out / "rir.wav")
    write_wav(path, stack[0] / peak if len(rirs) == 1 else stack / peak, m.acoustics.f_s)
    for mic, r in zip(mics, rirs):
        d = float(np.linalg.norm(np.asarray(mic) - np.asarray(src)))
        print(f"mic {list(mic)}: distance {d:.3f} m, direct path at {1000 * d / m.acoustics.c:.3f} ms, {len(images)} images")
    print(f"wrote {path}")
    return 0


def cmd_render_field(args) -> int:
    m = _load_manifest(args)
    out = _out_dir(args, m)
    world = build_world(m)
    field = policy_field(
        _policy_factory(args, m), world, args.grid_step, args.source,
        start=args.start, max_steps=m.eval.max_steps,
    )
    field.write_csv(out / "field.csv")
    (out / "trajectory.json").write_text(field.trajectory_json() + "\n")
    print(f"{len(field.cells)} cells, {field.fraction_reducing():.1%} distance-reducing; wrote {out / 'field.csv'}")
    return 0


def cmd_replay_inspect(args) -> int:
    header, _ = read_checkpoint(args.checkpoint)
    eps = header["replay"]
    rewards: dict = {}
    n_trans = 0
    for ep in eps:
        for r in ep["trajectory"]["rewards"]:
            key = str(round(float(r), 6))
            rewards[key] = rewards.get(key, 0) + 1
            n_trans += 1
    n_succ = sum(bool(e["success"]) for e in eps)
    stats = {
        "epoch": header["epoch"],
        "episodes": len(eps),
        "transitions": n_trans,
        "capacity": header["train"]["replay_capacity"],
        "successful_episodes": n_succ,
        "success_ratio": n_succ / len(eps) if eps else 0.0,
        "reward_histogram": dict(sorted(rewards.items())),
    }
    if args.json:
        print(json.dumps(stats, sort_keys=True, indent=1))
    else:
        for k, v in stats.items():
            print(f"{k:20s} {v}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="TOML run manifest (defaults when omitted)")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--out", help="output directory (else $ECHOLOCATE_OUT/run_id or output_dir/run_id)")
    common.add_argument("--threads", type=int, default=1, help="rollout/evaluation worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="echolocate", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run deep Q-learning")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-eval", action="store_true", help="skip the final evaluation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy / reachability / reward")
    e.add_argument("--checkpoint", help="trained checkpoint (random init when omitted)")
    e.add_argument("--policy", choices=("q", "oracle", "random"), default="q")
    e.add_argument("--trials", type=int)
    e.add_argument("--max-steps", type=int)
    e.add_argument("--json", action="store_true", help="also print the report as JSON")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render-rir", parents=[common], help="write a room impulse response as WAV")
    r.add_argument("--source", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    r.add_argument("--mic", type=float, nargs=3, action="append", metavar=("X", "Y", "Z"))
    r.add_argument("--agent", type=float, nargs=2, metavar=("X", "Y"), help="render the array observation at this pose instead")
    r.add_argument("--wav", help="output WAV path")
    r.add_argument("--features-csv", help="with --agent: dump the log-mel FeatureMap as CSV")
    r.set_defaults(func=cmd_render_rir)

    f = sub.add_parser("render-field", parents=[common], help="greedy action on a grid + one trajectory")
    f.add_argument("--checkpoint")
    f.add_argument("--policy", choices=("q", "oracle", "random"), default="q")
    f.add_argument("--grid-step", type=float, default=0.5)
    f.add_argument("--source", type=float, nargs=2, required=True, metavar=("X", "Y"))
    f.add_argument("--start", type=float, nargs=2, metavar=("X", "Y"))
    f.set_defaults(func=cmd_render_field)

    ri = sub.add_parser("replay-inspect", parents=[common], help="replay buffer statistics from a checkpoint")
    ri.add_argument("--checkpoint", required=True)
    ri.add_argument("--json", action="store_true")
    ri.set_defaults(func=cmd_replay_inspect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (EcholocateError, OSError) as exc:
        print(f"echolocate {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
