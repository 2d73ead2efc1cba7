import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from layervol.errors import CheckpointError, CheckpointVersionError, ConfigError
from layervol.fields import AnalyticField, LayerField
from layervol.io import (Checkpoint, field_checkpoint, field_from_checkpoint, load_grid, save_grid,
                         save_png, to_uint8)


def test_header_layout(small_field):
    data = field_checkpoint(small_field).to_bytes()
    assert data[:4] == b"LYRF" and data[8:12] == b"BODY"
    assert struct.unpack_from("<II", data, 4)[0] == 1
    (n_desc,) = struct.unpack_from("<I", data, 16)
    (count,) = struct.unpack_from("<Q", data, 20 + n_desc)
    assert count == small_field.n_params
    assert len(data) == 28 + n_desc + 8 * count


def test_field_roundtrip_is_exact(tmp_path, small_field):
    ck = field_checkpoint(small_field, {"stage": "body"})
    ck.save(tmp_path / "b.ckpt")
    back = Checkpoint.load(tmp_path / "b.ckpt", role="body")
    assert back.to_bytes() == ck.to_bytes()
    g = field_from_checkpoint(back)
    assert np.array_equal(g.params, small_field.params)
    x = np.linspace(-1, 1, 9).reshape(3, 3)
    for u, v in zip(g.query(x), small_field.query(x)):
        assert np.array_equal(u, v)


def test_clothing_index_survives():
    f = LayerField(hidden=(4,), num_bands=1, role="clothing", layer_index=2, seed=0)
    g = field_from_checkpoint(Checkpoint.from_bytes(field_checkpoint(f).to_bytes()))
    assert (g.role, g.layer_index) == ("clothing", 2)


def test_truncation_detected(small_field):
    data = field_checkpoint(small_field).to_bytes()
    for cut in (3, 15, 40, len(data) - 1):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(data[:cut])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(data + b"\0")


def test_version_and_magic_checked(small_field):
    data = bytearray(field_checkpoint(small_field).to_bytes())
    data[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointVersionError):
        Checkpoint.from_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"XXXX" + bytes(data[4:]))


def test_role_mismatch_rejected(tmp_path, small_field):
    field_checkpoint(small_field).save(tmp_path / "b.ckpt")
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "b.ckpt", role="clothing")
    sh = Checkpoint("sh", 0, {"kind": "sh_lighting"}, np.zeros(27))
    with pytest.raises(CheckpointError):
        field_from_checkpoint(sh)


def test_analytic_fields_cannot_be_saved():
    with pytest.raises(ConfigError):
        field_checkpoint(AnalyticField.constant(1.0))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "nope.ckpt")


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=5)))
def test_grid_roundtrip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("g") / "a.fgrd"
    save_grid(path, arr)
    back = load_grid(path)
    assert back.shape == arr.shape
    assert np.array_equal(back, arr, equal_nan=True)


def test_grid_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"FGRD" + struct.pack("<II", 1, 2) + struct.pack("<II", 3, 3))
    with pytest.raises(CheckpointError):
        load_grid(tmp_path / "x")


def test_png_quantisation(tmp_path):
    from PIL import Image

    img = np.array([[[0.0, 0.5, 1.0], [-1.0, 2.0, 0.25]]])
    assert to_uint8(img).tolist() == [[[0, 128, 255], [0, 255, 64]]]
    save_png(tmp_path / "a.png", img)
    assert np.array_equal(np.asarray(Image.open(tmp_path / "a.png")), to_uint8(img))


@given(st.sampled_from(["body", "clothing", "offsets", "sh"]), st.integers(0, 5),
       arrays(np.float64, st.integers(0, 20)))
def test_any_checkpoint_roundtrips(role, index, params):
    ck = Checkpoint(role, index, {"k": [1, 2]}, params)
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert back.role == role and back.layer_index == index and back.descriptor == {"k": [1, 2]}
    assert back.params.tobytes() == ck.params.tobytes()
