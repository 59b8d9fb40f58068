import numpy as np
import pytest

from haca.checkpoint import (VERSION, Checkpoint, CheckpointError, from_bytes, load_checkpoint,
                             save_checkpoint, to_bytes)
from haca.model import HacaConfig, Model
from haca.training import Adadelta, model_from_checkpoint


def sample_checkpoint(rng):
    model = Model(HacaConfig.micro(), 3)
    opt = Adadelta(model.params)
    for s in opt.state.values():
        s.sq_grad[...] = rng.random(s.sq_grad.shape)
        s.sq_delta[...] = rng.random(s.sq_delta.shape) * 1e-300
    return Checkpoint(
        config={k: str(v) for k, v in model.config.to_dict().items()},
        params={n: p.data.copy() for n, p in model.params.items()},
        optimizer=opt.state_arrays(),
        rng_state=rng.bit_generator.state,
        epoch=7,
        meta={"note": "x = y"},
    )


def test_round_trip_bitwise(rng, tmp_path):
    ckpt = sample_checkpoint(rng)
    save_checkpoint(ckpt, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.config == ckpt.config and back.epoch == 7 and back.meta == ckpt.meta
    assert back.rng_state == ckpt.rng_state
    for name, arr in ckpt.params.items():
        assert back.params[name].tobytes() == arr.tobytes()
    for slot, arrays in ckpt.optimizer.items():
        for name, arr in arrays.items():
            assert back.optimizer[slot][name].tobytes() == arr.tobytes()
    assert to_bytes(back) == to_bytes(ckpt)
    assert not list(tmp_path.glob("*.tmp"))


def test_model_restored_from_checkpoint(rng):
    ckpt = sample_checkpoint(rng)
    model = model_from_checkpoint(from_bytes(to_bytes(ckpt)))
    for name, arr in ckpt.params.items():
        assert np.array_equal(model.params[name].data, arr)


def test_truncation_reports_offset(rng):
    blob = to_bytes(sample_checkpoint(rng))
    for cut in (3, 5, 40, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointError, match="offset"):
            from_bytes(blob[:cut])


def test_corruption_detected(rng):
    blob = bytearray(to_bytes(sample_checkpoint(rng)))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        from_bytes(bytes(blob))


def test_version_and_magic(rng):
    blob = bytearray(to_bytes(sample_checkpoint(rng)))
    blob[4] = VERSION + 1
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOPE" + bytes(blob[4:]))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.bin")
