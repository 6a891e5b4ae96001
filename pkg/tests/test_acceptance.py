"""End-to-end acceptance checks.

Each test records one PASS/FAIL line, printed in the terminal summary,
and then asserts. The learning checks train real models through the CLI
(about 35 minutes on a laptop CPU in total); the trained runs are shared
between checks.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.signal as sps

from echolocate import acoustics as ac
from echolocate import geometry as geo
from echolocate import qnet as Q
from echolocate.checkpoint import load_params
from echolocate.cli import main
from echolocate.qnet import params_hash
from echolocate.replay import EpisodeRecord, ReplayBuffer
from echolocate.trainer import epsilon_at

from oracles import (
    ACCEPTANCE_LINES,
    TINY_MEMORYLESS,
    TINY_STATEFUL,
    BruteForceReplay,
    gradcheck,
    memoryless_batch,
    reference_reward,
    stateful_batch,
)

pytestmark = pytest.mark.slow


def record(label, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
    return ok


# ---------------------------------------------------------------- acoustics


def _random_geometry(rng):
    dims = tuple(rng.uniform([3, 3, 2.5], [15, 15, 6]))
    room = geo.RoomSpec(dims=dims, wall_absorption=float(rng.uniform(0.05, 0.95)))
    src = tuple(rng.uniform(0, 1, 3) * dims)
    return room, src


def test_a01_delay_law():
    rng = np.random.default_rng(101)
    p = ac.AcousticParams(max_order=2)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(100):
        room, src = _random_geometry(rng)
        mic = tuple(rng.uniform(0, 1, 3) * np.array(room.dims))
        d = float(np.linalg.norm(np.subtract(mic, src)))
        direct = ac.enumerate_image_sources(room, src, p.max_order)[:1]
        assert direct[0].order == 0
        h = ac.render_rir(direct, mic, p)
        n = np.arange(h.size)
        centroid = np.sum(n * h**2) / np.sum(h**2)
        worst = max(worst, abs(centroid - round(d * p.f_s / p.c)))
    dt = time.perf_counter() - t0
    ok = record("A1 acoustic delay law", worst <= 1.0 and dt < 5, f"max |centroid - round(d fs/c)| = {worst:.3f} samples (<= 1), {dt:.2f}s (< 5s)")
    assert ok


def _bandlimited_peak(h):
    # continuous-time peak of the band-limited pulse, via 64x FFT upsampling of the tap cluster
    k = int(np.argmax(np.abs(h)))
    seg = np.zeros(256)
    part = h[max(0, k - 60) : k + 61]
    seg[: part.size] = part
    return float(np.max(np.abs(sps.resample(seg, 256 * 64))))


def test_a02_amplitude_law():
    rng = np.random.default_rng(202)
    p = ac.AcousticParams(max_order=0)
    worst = 0.0
    for _ in range(50):
        room = geo.RoomSpec(dims=(40.0, 40.0, 10.0))
        src = tuple(rng.uniform([2, 2, 1], [10, 10, 9]))
        u = rng.normal(size=3)
        u[2] *= 0.1
        u /= np.linalg.norm(u)
        d = rng.uniform(1.0, 8.0)
        m1 = tuple(np.add(src, d * u))
        m2 = tuple(np.add(src, 2 * d * u))
        imgs = ac.enumerate_image_sources(room, src, 0)
        ratio = _bandlimited_peak(ac.render_rir(imgs, m1, p)) / _bandlimited_peak(ac.render_rir(imgs, m2, p))
        worst = max(worst, abs(ratio / 2 - 1))
    ok = record("A2 acoustic amplitude law", worst <= 0.05, f"max |peak(d)/peak(2d) / 2 - 1| = {worst:.4f} (<= 0.05)")
    assert ok


# ---------------------------------------------------------------- networks


def test_a03_gradients():
    t0 = time.perf_counter()
    e_m = gradcheck(TINY_MEMORYLESS, memoryless_batch, seed=3)
    e_s = gradcheck(TINY_STATEFUL, stateful_batch, seed=3)
    dt = time.perf_counter() - t0
    ok = record(
        "A3 gradient correctness",
        max(e_m, e_s) < 1e-4 and dt < 60,
        f"max rel err memoryless {e_m:.2e}, stateful {e_s:.2e} (< 1e-4), {dt:.1f}s (< 60s)",
    )
    assert ok


# ---------------------------------------------------------------- replay


def test_a04_replay_eviction():
    rng = np.random.default_rng(404)
    mismatches = 0
    for trial in range(1000):
        cap = int(rng.integers(1, 200))
        buf, ref = ReplayBuffer(cap), BruteForceReplay(cap)
        ref_rewards = {}
        for eid in range(int(rng.integers(1, 60))):
            n = int(rng.integers(1, cap + 1))
            ok = bool(rng.random() < 0.3)
            rewards = [float(r) for r in rng.choice([-0.1, -1.0, 1.0], n)]
            buf.push_episode(EpisodeRecord([Q.Transition(None, 0, r, None, False, eid) for r in rewards], ok, eid))
            ref.push(eid, n, ok)
            ref_rewards[eid] = rewards
        got = json.dumps([[e.episode_id, e.success, [t.reward for t in e.transitions]] for e in buf.episodes]).encode()
        want = json.dumps([[eid, ok, ref_rewards[eid]] for eid, _, ok in ref.items]).encode()
        mismatches += got != want
    ok = record("A4 replay eviction", mismatches == 0, f"{mismatches} of 1000 random push sequences differ from the brute-force simulator")
    assert ok


# ---------------------------------------------------------------- schedule


def test_a05_epsilon_schedule():
    worst = max(abs(epsilon_at(k) - min(0.95, 1 - 0.4 * 0.95**k)) for k in range(200))
    e = 0.6
    first_cap = None
    for k in range(200):
        if e >= 0.95:
            first_cap = k
            break
        e = 1 - (1 - e) * 0.95
    first_cap_impl = next(k for k in range(200) if epsilon_at(k) == 0.95)
    e30 = epsilon_at(30)
    ok = worst <= 1e-12 and f"{e30:.5f}".startswith("0.9141") and abs(e30 - 0.91415) < 1e-5 and first_cap == first_cap_impl == 41
    record("A5 epsilon schedule", ok, f"max err {worst:.1e}, eps(30) = {e30:.7f}, first cap hit k = {first_cap_impl} (recurrence: {first_cap})")
    assert ok


# ---------------------------------------------------------------- reward rule


def test_a06_reward_rule_grid():
    cfg = geo.EnvConfig(n_sources=2)
    src, far = (7.3, 2.8, cfg.source_height), (1.2, 9.1, cfg.source_height)
    grid = np.arange(0, 10.0001, 0.5)
    checked = bad = 0
    for x in grid:
        for y in grid:
            for a in range(4):
                for found in (set(), {0}):
                    s = geo.place(cfg, (x, y), [src, far])
                    s.found = set(found)
                    expected = reference_reward(tuple(s.agent), a, [(src, 0 in found), (far, False)], cfg)
                    got = geo.step(s, a).reward
                    checked += 1
                    bad += got != expected
    ok = record("A6 reward rule", bad == 0, f"{bad} mismatches over {checked} (cell, action, found-set) cases")
    assert ok


# ---------------------------------------------------------------- learning

DESK = """
run_id = "desk"

[env]
room_dims = [10.0, 10.0, 5.0]
clip_seconds = 0.25
horizon = 30

[acoustics]
max_order = 0

[arch]
variant = "{variant}"

[train]
epochs = 12
episodes_per_epoch = 64
seed = 0

[eval]
n_trials = 1000
"""


def _cli(*args):
    rc = main([str(a) for a in args])
    assert rc == 0, f"echolocate {' '.join(map(str, args))} exited with {rc}"


def _metrics(path):
    return json.loads(Path(path).read_text())


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for variant in ("memoryless", "stateful"):
        m = root / f"{variant}.toml"
        m.write_text(DESK.format(variant=variant))
        runs[variant] = m
    return root, runs


@pytest.fixture(scope="module")
def memoryless_runs(desk):
    root, runs = desk
    m = runs["memoryless"]
    t0 = time.perf_counter()
    _cli("train", "--manifest", m, "--out", root / "a", "--threads", 1)
    runtime = time.perf_counter() - t0
    _cli("eval", "--manifest", m, "--out", root / "random")
    return {"manifest": m, "a": root / "a", "random": root / "random", "runtime": runtime}


@pytest.fixture(scope="module")
def stateful_runs(desk):
    root, runs = desk
    m = runs["stateful"]
    _cli("train", "--manifest", m, "--out", root / "s", "--threads", 4)
    _cli("eval", "--manifest", m, "--out", root / "s_random", "--threads", 4)
    return {"s": root / "s", "random": root / "s_random"}


def test_a07_desk_scale_learning(memoryless_runs):
    rnd = _metrics(memoryless_runs["random"] / "metrics.json")
    trn = _metrics(memoryless_runs["a"] / "metrics.json")
    rt = memoryless_runs["runtime"]
    a_ok = rnd["accuracy"] <= 0.48 and rnd["reachability"] <= 0.12
    b_ok = trn["accuracy"] >= 0.55 and trn["reachability"] >= 0.15
    c_ok = trn["avg_total_reward"] > rnd["avg_total_reward"]
    t_ok = rt <= 30 * 60
    record("A7a random-init baseline", a_ok, f"accuracy {rnd['accuracy']:.1%} (<= 48%), reachability {rnd['reachability']:.1%} (<= 12%)")
    record("A7b trained memoryless", b_ok, f"accuracy {trn['accuracy']:.1%} (>= 55%), reachability {trn['reachability']:.1%} (>= 15%)")
    record("A7c reward over baseline", c_ok, f"{trn['avg_total_reward']:+.3f} vs {rnd['avg_total_reward']:+.3f}")
    record("A7 runtime", t_ok, f"train + eval {rt / 60:.1f} min (<= 30 min)")
    assert a_ok and b_ok and c_ok and t_ok


def test_a08_ordering_trend(memoryless_runs, stateful_runs):
    mem = _metrics(memoryless_runs["a"] / "metrics.json")["accuracy"]
    sta = _metrics(stateful_runs["s"] / "metrics.json")["accuracy"]
    base = max(
        _metrics(memoryless_runs["random"] / "metrics.json")["accuracy"],
        _metrics(stateful_runs["random"] / "metrics.json")["accuracy"],
    )
    ok = sta >= mem - 0.02 and mem >= base + 0.05 and sta >= base + 0.05
    record(
        "A8 stateful vs memoryless",
        ok,
        f"stateful {sta:.1%} >= memoryless {mem:.1%} - 2pt; both >= random-init {base:.1%} + 5pt",
    )
    assert ok


def test_a09_determinism(memoryless_runs, tmp_path):
    m, a = memoryless_runs["manifest"], memoryless_runs["a"]
    _cli("train", "--manifest", m, "--out", tmp_path / "b", "--threads", 4)
    same_metrics = (a / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    same_ckpt = (a / "final.ckpt.sha256").read_text() == (tmp_path / "b" / "final.ckpt.sha256").read_text()
    _cli("eval", "--manifest", m, "--checkpoint", a / "final.ckpt", "--out", tmp_path / "e", "--threads", 3)
    eval_same = _metrics(tmp_path / "e" / "metrics.json") == _metrics(a / "metrics.json")
    ok = same_metrics and same_ckpt and eval_same
    record(
        "A9 determinism",
        ok,
        f"metrics bytes equal: {same_metrics}, checkpoint sha256 equal: {same_ckpt} (1 vs 4 training threads); eval with 3 threads equal: {eval_same}",
    )
    assert ok


def test_a10_checkpoint_roundtrip(memoryless_runs, tmp_path):
    m, a = memoryless_runs["manifest"], memoryless_runs["a"]
    out = tmp_path / "c"
    _cli("train", "--manifest", m, "--out", out, "--epochs", 6, "--no-eval")
    _cli("train", "--manifest", m, "--out", out, "--resume", out / "checkpoints" / "epoch_0006.ckpt", "--no-eval")
    _, p_full = load_params(a / "final.ckpt")
    _, p_res = load_params(out / "final.ckpt")
    same = p_full.keys() == p_res.keys() and all(np.array_equal(p_full[k], p_res[k]) for k in p_full)
    ok = record("A10 checkpoint round-trip", same, f"6 + 6 resumed vs 12 uninterrupted: params {params_hash(p_res)[:12]} vs {params_hash(p_full)[:12]}")
    assert ok
