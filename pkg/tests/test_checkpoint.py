import numpy as np
import pytest

from echolocate import trainer as T
from echolocate.checkpoint import encode, load_params, load_trainer, read_checkpoint, save_checkpoint
from echolocate.errors import CheckpointError
from echolocate.qnet import params_hash

SMALL = dict(episodes_per_epoch=3, horizon=5, batch_size=4, updates_per_epoch=4, target_update_period=2, target_delay=2)


def _same_state(a, b):
    assert params_hash(a.params) == params_hash(b.params)
    assert params_hash(a.target) == params_hash(b.target)
    assert a.opt.t == b.opt.t and a.update_iter == b.update_iter and a.epoch == b.epoch
    assert [params_hash(s) for s in a.snapshots] == [params_hash(s) for s in b.snapshots]


@pytest.mark.parametrize("arch_name", ["tiny_arch", "tiny_stateful"])
def test_roundtrip_restores_everything(arch_name, small_world, request, tmp_path):
    arch = request.getfixturevalue(arch_name)
    ts = T.train(T.TrainConfig(epochs=1, **SMALL), arch, small_world)
    save_checkpoint(tmp_path / "a.ckpt", ts, {"k": 1})
    back, meta = load_trainer(tmp_path / "a.ckpt", small_world)
    assert meta == {"k": 1}
    _same_state(ts, back)
    assert [e.trajectory for e in back.replay.episodes] == [e.trajectory for e in ts.replay.episodes]
    # re-rendered observations equal the originals
    for x, y in zip(ts.replay.transitions(), back.replay.transitions()):
        xs = x.state if arch.variant == "memoryless" else x.state.arrays(arch)[0]
        ys = y.state if arch.variant == "memoryless" else y.state.arrays(arch)[0]
        assert np.array_equal(xs, ys)
    assert encode(back, meta) == encode(ts, meta)


@pytest.mark.parametrize("arch_name", ["tiny_arch", "tiny_stateful"])
def test_resume_equals_uninterrupted(arch_name, small_world, request, tmp_path):
    arch = request.getfixturevalue(arch_name)
    full = T.train(T.TrainConfig(epochs=3, **SMALL), arch, small_world)
    T.train(T.TrainConfig(epochs=1, **SMALL), arch, small_world, tmp_path)
    resumed, _ = load_trainer(tmp_path / "checkpoints" / "epoch_0001.ckpt", small_world)
    resumed = T.train(T.TrainConfig(epochs=3, **SMALL), arch, small_world, resume=resumed)
    _same_state(full, resumed)


def test_load_params_and_dtype_endianness(small_world, tiny_arch, tmp_path):
    ts = T.init_trainer(T.TrainConfig(**SMALL), tiny_arch, small_world)
    save_checkpoint(tmp_path / "a.ckpt", ts)
    arch, params = load_params(tmp_path / "a.ckpt")
    assert arch == tiny_arch
    assert params_hash(params) == params_hash(ts.params)
    header, arrays = read_checkpoint(tmp_path / "a.ckpt")
    assert header["format_version"] == 1 and all(a.dtype == np.float32 for a in arrays.values())


def test_identical_states_give_identical_bytes(small_world, tiny_arch, tmp_path):
    a = T.train(T.TrainConfig(epochs=1, **SMALL), tiny_arch, small_world)
    b = T.train(T.TrainConfig(epochs=1, **SMALL), tiny_arch, small_world)
    assert save_checkpoint(tmp_path / "a", a) == save_checkpoint(tmp_path / "b", b)


def test_bad_files_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(OSError):
        read_checkpoint(tmp_path / "missing.ckpt")
