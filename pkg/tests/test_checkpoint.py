import json
import os
import struct

import numpy as np
import pytest

from ssat import nets
from ssat.checkpoint import CheckpointError, decode_params, encode_params, load_checkpoint, save_checkpoint, sidecar_path
from ssat.nets import ModelConfig
from ssat.tensor import Tensor

GEN = ModelConfig(kind=nets.GENERATOR_UNET, seed=7)


@pytest.fixture
def saved(tmp_path):
    model = nets.build_generator_unet(GEN)
    path = tmp_path / "gen.ssat"
    save_checkpoint(model, path)
    return model, path


def test_round_trip_bit_exact(saved):
    model, path = saved
    loaded = load_checkpoint(path)
    assert list(loaded.params) == list(model.params)
    for k in model.params:
        assert loaded[k].data.tobytes() == model[k].data.tobytes()
    assert loaded.config == model.config
    assert nets.count_params(loaded) == nets.count_params(model)
    x = Tensor(np.random.default_rng(0).uniform(0, 255, (1, 3, 16, 16)).astype(np.float32))
    a = nets.forward_generator(model, x).raw_perturbation.data
    b = nets.forward_generator(loaded, x).raw_perturbation.data
    assert a.tobytes() == b.tobytes()


def test_header_and_first_record_layout(saved):
    _, path = saved
    buf = path.read_bytes()
    assert buf[:4] == b"SSAT"
    assert struct.unpack("<II", buf[4:12]) == (1, len(nets.param_shapes(GEN)))
    # name_len | "enc0.weight" | ndim | 4 dims | 16*3*3*3 float32
    (name_len,) = struct.unpack("<I", buf[12:16])
    assert buf[16 : 16 + name_len] == b"enc0.weight"
    record = 4 + 11 + 4 + 16 + 16 * 3 * 3 * 3 * 4
    assert record == 4 + 11 + 4 + 16 + 1728
    (next_len,) = struct.unpack("<I", buf[12 + record : 16 + record])
    assert buf[16 + record : 16 + record + next_len] == b"enc0.bias"


def test_sidecar_fields(saved):
    _, path = saved
    side = json.loads(open(sidecar_path(path)).read())
    for key in ("kind", "in_channels", "num_classes", "base_width", "width_multiplier", "seed"):
        assert key in side
    assert side["kind"] == nets.GENERATOR_UNET


def test_truncated_file_reports_offset(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    # data of the first tensor starts after 12 header bytes and a 35-byte record header
    assert err.value.offset == 47
    assert "offset 47" in str(err.value)


def test_bad_magic(saved):
    _, path = saved
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic") as err:
        load_checkpoint(path)
    assert err.value.offset == 0


def test_bad_version():
    buf = b"SSAT" + struct.pack("<II", 2, 0)
    with pytest.raises(CheckpointError, match="version") as err:
        decode_params(buf)
    assert err.value.offset == 4


def test_trailing_bytes():
    with pytest.raises(CheckpointError, match="trailing"):
        decode_params(encode_params({"a": np.zeros(2)}) + b"\0")


def test_shape_mismatch_against_config(tmp_path):
    model = nets.build_generator_unet(GEN)
    path = tmp_path / "m.ssat"
    save_checkpoint(model, path)
    wider = ModelConfig(kind=nets.GENERATOR_UNET, base_width=8)
    with open(sidecar_path(path), "w") as f:
        json.dump(wider.to_dict(), f)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_missing_tensor(tmp_path):
    model = nets.build_generator_unet(GEN)
    params = dict(model.params)
    params.pop("reg_head.bias")
    path = tmp_path / "m.ssat"
    path.write_bytes(encode_params(params))
    with open(sidecar_path(path), "w") as f:
        json.dump(GEN.to_dict(), f)
    with pytest.raises(CheckpointError, match="reg_head.bias"):
        load_checkpoint(path)


def test_frozen_load(saved):
    _, path = saved
    m = load_checkpoint(path, frozen=True)
    assert m.frozen and not any(p.requires_grad for p in m.params.values())


def test_save_leaves_no_temp_files(saved):
    _, path = saved
    assert sorted(os.listdir(path.parent)) == ["gen.ssat", "gen.ssat.json"]
