import struct

import numpy as np
import pytest

from checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_checkpoint_with_extras,
    save_checkpoint,
)
from model import ModelConfig, init_params, score_group


@pytest.mark.parametrize(
    "config",
    [
        ModelConfig(d=8, d_h=4, seed=1),
        ModelConfig(d=5, d_h=3, encoders=(">",), variant="listnet_sa", seed=2, attention_weight=0.5),
        ModelConfig(d=6, variant="listnet", seed=3),
    ],
)
def test_save_and_load_preserve_the_model(tmp_path, config, rng):
    model = init_params(config)
    path = save_checkpoint(model, tmp_path / "model.ckpt", extras={"normalize": "query-minmax", "k_max": 4})
    loaded, extras = load_checkpoint_with_extras(path)
    assert loaded.config == model.config
    assert extras == {"normalize": "query-minmax", "k_max": 4}
    for name, value in model.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[name], value)
    V = rng.normal(size=(5, config.d))
    np.testing.assert_array_equal(score_group(loaded, V), score_group(model, V))


def test_encoding_is_byte_stable():
    model = init_params(ModelConfig(d=4, d_h=2, seed=9))
    blob = encode_checkpoint(model, {"k_max": 4})
    assert blob == encode_checkpoint(init_params(ModelConfig(d=4, d_h=2, seed=9)), {"k_max": 4})
    assert blob[:8] == MAGIC
    assert struct.unpack_from("<I", blob, 8)[0] == FORMAT_VERSION
    again, _ = decode_checkpoint(blob)
    assert encode_checkpoint(again, {"k_max": 4}) == blob


def test_bad_magic_and_version():
    blob = bytearray(encode_checkpoint(init_params(ModelConfig(d=3, variant="listnet"))))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + bytes(blob[8:]))
    blob[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(blob))


@pytest.mark.parametrize("cut", [4, 20, 40, -1, -8])
def test_truncated_files_are_rejected(cut):
    blob = encode_checkpoint(init_params(ModelConfig(d=3, d_h=2, seed=1)))
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:cut])


def test_trailing_bytes_are_rejected():
    blob = encode_checkpoint(init_params(ModelConfig(d=3, variant="listnet")))
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob + b"\0" * 8)


def test_shape_table_must_match_config():
    model = init_params(ModelConfig(d=3, d_h=2, encoders=("+",), variant="listnet_sa"))
    blob = encode_checkpoint(model)
    tampered = blob.replace(b'"d":3', b'"d":4')
    with pytest.raises(CheckpointError, match="parameter table"):
        decode_checkpoint(tampered)


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_scalar_head_bias_keeps_its_shape(tmp_path):
    model = init_params(ModelConfig(d=4, d_h=2))
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / "model.ckpt"))
    assert np.asarray(loaded.parameters()["head.b"]).shape == ()
    assert float(loaded.parameters()["head.b"]) == float(model.parameters()["head.b"])


def test_shape_mismatch_names_the_differing_entries():
    model = init_params(ModelConfig(d=3, d_h=2, encoders=("+",), variant="listnet_sa"))
    tampered = encode_checkpoint(model).replace(b'"d":3', b'"d":4')
    with pytest.raises(CheckpointError) as err:
        decode_checkpoint(tampered)
    message = str(err.value)
    assert "'encoder.plus.ff1_W': ((3, 2), (4, 2))" in message
    assert "head.w" not in message
