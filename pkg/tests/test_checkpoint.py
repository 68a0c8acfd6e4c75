import json

import numpy as np
import pytest

from placegen.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from placegen.model import DenoiserModel, param_specs

from conftest import tiny_config


@pytest.fixture()
def model():
    return DenoiserModel.create(tiny_config(), seed=5)


def test_roundtrip_bitwise(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert set(loaded.params) == set(model.params)
    for k in model.params:
        np.testing.assert_array_equal(loaded.params[k], model.params[k])


def test_save_is_deterministic(model, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, a)
    save_checkpoint(model, b)
    assert a.read_bytes() == b.read_bytes()


def test_format_layout(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    n = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    manifest = json.loads(raw[16:16 + n].decode())
    assert manifest["format"] == "placegen-checkpoint"
    assert manifest["vocabulary"] == list(model.config.vocab)
    specs = param_specs(model.config)
    assert [e["name"] for e in manifest["params"]] == [s[0] for s in specs]
    # offsets are little-endian float32 positions, contiguous in spec order
    offset = 0
    for entry, (_, shape, _) in zip(manifest["params"], specs):
        assert entry["offset"] == offset
        offset += int(np.prod(shape)) * 4
    assert manifest["data_bytes"] == offset
    assert len(raw) == 16 + n + offset
    # first parameter decodes from its stated offset
    first = manifest["params"][0]
    count = int(np.prod(first["shape"]))
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=16 + n + first["offset"])
    np.testing.assert_array_equal(arr.reshape(first["shape"]),
                                  model.params[first["name"]])


def test_rejects_wrong_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checksum_tracks_groups(model):
    base_sum = model.checksum("base.")
    adapter_sum = model.checksum("adapter.")
    model.params["adapter.tf1.gamma"] = model.params["adapter.tf1.gamma"] + 1.0
    assert model.checksum("base.") == base_sum
    assert model.checksum("adapter.") != adapter_sum
