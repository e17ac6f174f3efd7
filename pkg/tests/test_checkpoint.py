"""Parameter-state serialization."""

import numpy as np
import pytest

from ltoad.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    state_digest,
)


def sample_state(rng):
    return {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "a.b": rng.standard_normal(4).astype(np.float32),
        "scalarish": np.float32(2.5).reshape(()),
        "deep": rng.standard_normal((2, 2, 2)).astype(np.float32),
    }


def test_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    state = sample_state(rng)
    path = tmp_path / "model.ltck"
    n = save_checkpoint(path, state)
    assert n == path.stat().st_size
    back = load_checkpoint(path)
    assert set(back) == set(state)
    for name in state:
        np.testing.assert_array_equal(back[name], state[name])
        assert back[name].dtype == np.float32


def test_bytes_deterministic_across_insertion_order(tmp_path):
    rng = np.random.default_rng(1)
    state = sample_state(rng)
    reordered = dict(reversed(list(state.items())))
    p1, p2 = tmp_path / "a.ltck", tmp_path / "b.ltck"
    save_checkpoint(p1, state)
    save_checkpoint(p2, reordered)
    assert p1.read_bytes() == p2.read_bytes()


def test_corruption_detection(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "model.ltck"
    save_checkpoint(path, sample_state(rng))
    blob = bytearray(path.read_bytes())

    bad = tmp_path / "bad.ltck"
    bad.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)

    bad.write_bytes(bytes(blob[:4]) + b"\x09" + bytes(blob[5:]))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)

    bad.write_bytes(bytes(blob[:-3]))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)

    bad.write_bytes(bytes(blob) + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


def test_save_rejects_bad_entries(tmp_path):
    with pytest.raises(CheckpointError, match="non-finite"):
        save_checkpoint(tmp_path / "x.ltck", {"w": np.array([np.nan])})
    with pytest.raises(CheckpointError, match="rank"):
        save_checkpoint(tmp_path / "x.ltck", {"w": np.zeros((1,) * 9)})


def test_digest_tracks_content_not_order():
    rng = np.random.default_rng(3)
    state = sample_state(rng)
    reordered = dict(reversed(list(state.items())))
    assert state_digest(state) == state_digest(reordered)
    changed = {k: v.copy() for k, v in state.items()}
    changed["a.w"][0, 0] += 1.0
    assert state_digest(changed) != state_digest(state)
