import struct

import numpy as np
import pytest

from fbocc.container import (
    MAGIC,
    ContainerError,
    decode,
    encode,
    read_container,
    read_occ_gt,
    write_container,
    write_occ_gt,
)
from fbocc.occ_head import OccupancyGrid


def test_round_trip_large_volume(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.normal(size=(3, 200, 200, 16)).astype(np.float32)
    path = tmp_path / "vol.fbt"
    write_container(path, {"features": vol, "ids": np.arange(5, dtype=np.int64)})
    back = read_container(path)
    assert back["features"].dtype == np.float32
    assert back["features"].tobytes() == vol.tobytes()
    assert encode(back) == path.read_bytes()


def test_all_dtypes_round_trip():
    rng = np.random.default_rng(1)
    tensors = {
        "b": rng.random((2, 3)) > 0.5,
        "u8": rng.integers(0, 255, (4,), dtype=np.uint8),
        "i16": rng.integers(-9, 9, (2, 2), dtype=np.int16),
        "f16": rng.normal(size=(3,)).astype(np.float16),
        "f64": rng.normal(size=(2, 1, 2)),
        "empty": np.zeros((0, 3), np.float32),
        "scalar": np.array(3.5),
    }
    back = decode(encode(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)


def test_layout_is_little_endian_and_documented():
    data = encode({"x": np.array([1], dtype=">u2")})
    magic, version, hlen = struct.unpack_from("<8sHI", data)
    assert magic == MAGIC and version == 1
    header = data[14 : 14 + hlen].decode()
    assert header == '{"tensors":[{"dtype":"uint16","name":"x","nbytes":2,"offset":0,"shape":[1]}]}'
    assert data[14 + hlen :] == b"\x01\x00"


def test_truncated_payload():
    data = encode({"x": np.zeros((4, 4))})
    with pytest.raises(ContainerError, match="payload length mismatch") as exc:
        decode(data[:-3])
    assert exc.value.field == "x.offset"


def test_malformed_headers_name_the_field():
    good = encode({"x": np.zeros(2)})
    with pytest.raises(ContainerError) as exc:
        decode(b"NOTMAGIC" + good[8:])
    assert exc.value.field == "magic"
    with pytest.raises(ContainerError) as exc:
        decode(good[:8] + struct.pack("<H", 9) + good[10:])
    assert exc.value.field == "version"

    def with_header(text):
        h = text.encode()
        return struct.pack("<8sHI", MAGIC, 1, len(h)) + h + b"\0" * 16

    cases = {
        "header": "{not json",
        "tensors": '{"other": 1}',
        "tensors[0].nbytes": '{"tensors":[{"name":"a","dtype":"float64","shape":[2],"offset":0}]}',
        "a.dtype": '{"tensors":[{"name":"a","dtype":"complex","shape":[2],"offset":0,"nbytes":16}]}',
        "a.shape": '{"tensors":[{"name":"a","dtype":"float64","shape":[-1],"offset":0,"nbytes":16}]}',
        "a.nbytes": '{"tensors":[{"name":"a","dtype":"float64","shape":[3],"offset":0,"nbytes":16}]}',
    }
    for field, text in cases.items():
        with pytest.raises(ContainerError) as exc:
            decode(with_header(text))
        assert exc.value.field == field
    with pytest.raises(ContainerError, match="payload length mismatch"):
        decode(with_header('{"tensors":[{"name":"a","dtype":"float64","shape":[2],"offset":8,"nbytes":16}]}'))


def test_unsupported_dtype():
    with pytest.raises(ContainerError):
        encode({"c": np.zeros(2, complex)})


def test_occ_gt_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    gt = OccupancyGrid(rng.integers(0, 18, (200, 200, 16)), rng.random((200, 200, 16)) < 0.5)
    path = tmp_path / "gt.fbt"
    write_occ_gt(path, gt)
    back = read_occ_gt(path)
    np.testing.assert_array_equal(back.labels, gt.labels)
    np.testing.assert_array_equal(back.camera_mask, gt.camera_mask)


def test_occ_gt_npz(tmp_path):
    sem = np.full((2, 2, 1), 17, np.uint8)
    path = tmp_path / "labels.npz"
    np.savez(path, semantics=sem, mask_camera=np.ones((2, 2, 1), np.uint8), mask_lidar=np.zeros((2, 2, 1), np.uint8))
    gt = read_occ_gt(path)
    assert gt.labels.shape == (2, 2, 1) and gt.camera_mask.all()


def test_occ_gt_label_validation(tmp_path):
    sem = np.zeros((2, 2, 2), np.uint8)
    sem[1, 0, 1] = 18
    sem[0, 1, 0] = 200
    path = tmp_path / "bad.fbt"
    write_container(path, {"semantics": sem})
    with pytest.raises(ContainerError, match=r"\[\[0, 1, 0\], \[1, 0, 1\]\]") as exc:
        read_occ_gt(path)
    assert exc.value.field == "semantics"
    write_container(path, {"semantics": np.zeros((2, 2, 2), np.uint8), "mask_camera": np.ones((2, 2), np.uint8)})
    with pytest.raises(ContainerError) as exc:
        read_occ_gt(path)
    assert exc.value.field == "mask_camera"
    write_container(path, {"labels": np.zeros((2, 2, 2), np.uint8)})
    with pytest.raises(ContainerError, match="missing"):
        read_occ_gt(path)
