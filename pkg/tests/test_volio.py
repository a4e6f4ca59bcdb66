import struct

import numpy as np
import pytest

from countervox.grid import LabelVolume, VoxelGrid
from countervox.volio import (
    BadMagicError,
    HEADER_SIZE,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    VolumeIOError,
    load_probability,
    read_volume,
    save_probability,
    write_volume,
)
from countervox.phantom import probability_from_labels


def test_nifti_float_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.standard_normal((2, 2, 2)).astype(np.float32).astype(np.float64)
    grid = VoxelGrid(values, spacing=(1.5, 2.0, 0.5))
    path = tmp_path / "grid.nii"
    write_volume(grid, path)
    back = read_volume(path)
    assert isinstance(back, VoxelGrid)
    assert np.array_equal(back.values, values)  # bit exact
    assert back.spacing == pytest.approx(grid.spacing)


def test_nifti_label_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 6, size=(5, 4, 3)).astype(np.int32)
    vol = LabelVolume(labels, num_rois=3)
    for dtype in ("int16", "uint8"):
        path = tmp_path / f"labels_{dtype}.nii"
        write_volume(vol, path, dtype=dtype)
        back = read_volume(path)
        assert isinstance(back, LabelVolume)
        assert np.array_equal(back.labels, labels)


def test_round_trip_property_random(tmp_path):
    rng = np.random.default_rng(2)
    for trial in range(15):
        dims = tuple(rng.integers(1, 7, size=3))
        values = rng.standard_normal(dims).astype(np.float32).astype(np.float64)
        spacing = tuple(rng.uniform(0.2, 3.0, size=3))
        path = tmp_path / f"t{trial}.nii"
        write_volume(VoxelGrid(values, spacing), path)
        back = read_volume(path)
        assert np.array_equal(back.values, values)
        assert back.dims == dims


def test_header_fields_read(tmp_path):
    # hand-built header: dim[0]=3, dims (4,4,4), pixdim 1mm, float32
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, 4, 4, 4, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    payload = np.arange(64, dtype="<f4").tobytes()
    path = tmp_path / "hand.nii"
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + payload)
    grid = read_volume(path)
    assert grid.dims == (4, 4, 4)
    assert grid.spacing == (1.0, 1.0, 1.0)
    # payload is x-fastest: flat index i + 4j + 16k
    assert grid.values[1, 0, 0] == 1.0
    assert grid.values[0, 1, 0] == 4.0
    assert grid.values[0, 0, 1] == 16.0


def test_bad_magic(tmp_path):
    grid = VoxelGrid(np.zeros((2, 2, 2)))
    path = tmp_path / "bad.nii"
    write_volume(grid, path)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"abc\x00"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_volume(path)


def test_unsupported_dtype(tmp_path):
    grid = VoxelGrid(np.zeros((2, 2, 2)))
    path = tmp_path / "dtype.nii"
    write_volume(grid, path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<h", raw, 70, 64)  # float64: outside the subset
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDtypeError):
        read_volume(path)


def test_truncated_payload(tmp_path):
    grid = VoxelGrid(np.zeros((4, 4, 4)))
    path = tmp_path / "trunc.nii"
    write_volume(grid, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedPayloadError):
        read_volume(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "short.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(TruncatedPayloadError):
        read_volume(path)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        read_volume("/nonexistent/volume.nii")


def test_raw_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    values = rng.standard_normal((3, 5, 2)).astype(np.float32).astype(np.float64)
    grid = VoxelGrid(values, spacing=(0.5, 0.5, 2.0))
    path = tmp_path / "raw.json"
    write_volume(grid, path)
    assert (tmp_path / "raw.bin").exists()
    back = read_volume(path)
    assert np.array_equal(back.values, values)
    assert back.spacing == pytest.approx(grid.spacing)


def test_raw_errors(tmp_path):
    path = tmp_path / "r.json"
    write_volume(VoxelGrid(np.zeros((2, 2, 2))), path)
    (tmp_path / "r.bin").write_bytes(b"\x00" * 7)
    with pytest.raises(TruncatedPayloadError):
        read_volume(path)
    path.write_text('{"dims": [2,2,2], "spacing": [1,1,1], "dtype": "f64"}')
    with pytest.raises(UnsupportedDtypeError):
        read_volume(path)
    path.write_text("not json {")
    with pytest.raises(VolumeIOError):
        read_volume(path)


def test_raw_rejects_labels(tmp_path):
    vol = LabelVolume(np.zeros((2, 2, 2), dtype=np.int32))
    with pytest.raises(ValueError):
        write_volume(vol, tmp_path / "labels.json")


def test_probability_npz_round_trip(tmp_path):
    labels = LabelVolume(np.zeros((4, 4, 4), dtype=np.int32), num_rois=0)
    probs = probability_from_labels(labels)
    path = tmp_path / "probs.npz"
    save_probability(probs, path)
    back = load_probability(path)
    assert np.array_equal(back.probs, probs.probs)
    assert back.num_rois == probs.num_rois
