"""Checkpoint serialization and state diffing."""

import numpy as np
import pytest

from cladmop.checkpoint import (
    CheckpointError,
    config_hash,
    diff_states,
    load_checkpoint,
    save_checkpoint,
)


def sample_state(rng):
    return {
        "mol.proj_w": rng.normal(size=(8, 4)).astype(np.float32),
        "block0.layer0.centroids": rng.normal(size=(4, 4)).astype(np.float32),
        "final_norm.gain": np.ones((1, 4), dtype=np.float32),
    }


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        state = sample_state(rng)
        h = config_hash({"seed": 7, "arch.d_dm": 16})
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, state, h)
        loaded, got_hash = load_checkpoint(path)
        assert got_hash == h
        assert set(loaded) == set(state)
        for name in state:
            assert loaded[name].tobytes() == state[name].tobytes()

    def test_same_state_same_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        state = sample_state(rng)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, state)
        save_checkpoint(b, dict(reversed(list(state.items()))))
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"WRONGMAG" + b"\0" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_corrupted_record(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, sample_state(rng))
        data = bytearray(path.read_bytes())
        data[-10] ^= 0x5A
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_config_hash_sensitivity(self):
        a = config_hash({"seed": 7, "lr": 0.01})
        b = config_hash({"seed": 8, "lr": 0.01})
        assert a != b
        assert a == config_hash({"lr": 0.01, "seed": 7})


class TestDiffStates:
    def test_identical(self):
        rng = np.random.default_rng(3)
        state = sample_state(rng)
        assert diff_states(state, {k: v.copy() for k, v in state.items()}) == set()

    def test_value_change_detected(self):
        rng = np.random.default_rng(4)
        a = sample_state(rng)
        b = {k: v.copy() for k, v in a.items()}
        b["mol.proj_w"][0, 0] += 1.0
        assert diff_states(a, b) == {"mol.proj_w"}

    def test_missing_key_detected(self):
        rng = np.random.default_rng(5)
        a = sample_state(rng)
        b = {k: v for k, v in a.items() if k != "final_norm.gain"}
        assert diff_states(a, b) == {"final_norm.gain"}
