import json
import struct

import numpy as np
import pytest

from satlab.checkpoint import MAGIC, Checkpoint, load_checkpoint, restore_model, save_checkpoint
from satlab.errors import CheckpointError, ModelMismatchError, exit_code_for
from satlab.models import ModelConfig, build_model
from satlab.training import AdaBelief, make_checkpoint

CONFIG = ModelConfig(feature_maps=4, noise_dims=1, assignments=2)


@pytest.fixture
def saved(tmp_path):
    model = build_model(CONFIG, seed=7)
    optimizer = AdaBelief(model.parameters())
    rng = np.random.default_rng(11)
    rng.integers(0, 10, size=3)
    checkpoint = make_checkpoint(model, optimizer, 12, rng, {"epoch": 1, "cursor": 2})
    return model, rng, save_checkpoint(tmp_path / "model.qsat", checkpoint)


def test_round_trip_is_bit_exact(saved):
    model, rng, path = saved
    loaded = load_checkpoint(path)
    assert loaded.model_config == CONFIG
    assert loaded.iteration == 12
    assert loaded.train_state == {"epoch": 1, "cursor": 2}
    for name, array in model.state_arrays().items():
        np.testing.assert_array_equal(loaded.params[name], array)
    assert set(loaded.moments) == {f"{kind}.{p.name}" for kind in "ms" for p in model.parameters()}

    restored_rng = np.random.default_rng()
    restored_rng.bit_generator.state = loaded.rng_state
    assert restored_rng.integers(0, 2**32, size=4).tolist() == rng.integers(0, 2**32, size=4).tolist()


def test_restore_model_loads_parameters(saved):
    model, _, path = saved
    restored = restore_model(load_checkpoint(path), seed=123)
    for name, array in model.state_arrays().items():
        np.testing.assert_array_equal(restored.state_arrays()[name], array)


def test_header_layout(saved):
    _, _, path = saved
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (length,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + length])
    assert header["format"] == "satlab-checkpoint"
    assert header["dtype"] == "<f4"
    entries = header["tensors"]
    assert entries[0]["offset"] == 0
    assert all(e["name"].startswith(("param/", "moment/")) for e in entries)
    assert len(raw) - 12 - length == sum(e["nbytes"] for e in entries)


def _rewrite_header(path, **changes):
    raw = path.read_bytes()
    (length,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + length])
    header.update(changes)
    encoded = json.dumps(header).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(encoded)) + encoded + raw[12 + length :])


def test_bad_magic(saved):
    _, _, path = saved
    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError, match="not a satlab checkpoint"):
        load_checkpoint(path)


def test_unsupported_version(saved):
    _, _, path = saved
    _rewrite_header(path, version=2)
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(path)


def test_truncated_data(saved):
    _, _, path = saved
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="truncated data"):
        load_checkpoint(path)


def test_truncated_header(saved):
    _, _, path = saved
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(CheckpointError, match="truncated header"):
        load_checkpoint(path)


def test_shape_table_must_match_config(tmp_path):
    other = build_model(ModelConfig(feature_maps=6, noise_dims=1, assignments=2), seed=0)
    path = save_checkpoint(tmp_path / "bad.qsat", Checkpoint(CONFIG, other.state_arrays()))
    with pytest.raises(CheckpointError, match="mismatched"):
        restore_model(load_checkpoint(path))


def test_checkpoint_errors_map_to_exit_code():
    assert exit_code_for(CheckpointError("x")) == 5
    assert exit_code_for(ModelMismatchError("x")) == 5
