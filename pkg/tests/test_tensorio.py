import struct

import numpy as np
import pytest

from gtune.tensorio import (MAGIC, TensorFormatError, decode_tensor, derive_seed, encode_tensor,
                            read_pgm, read_tensor, write_pgm, write_tensor)


def test_layout_is_little_endian():
    blob = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:8] == MAGIC
    assert struct.unpack("<III", blob[8:20]) == (2, 1, 3)
    assert struct.unpack("<3f", blob[20:]) == (1.0, 2.0, 3.0)


def test_roundtrip(tmp_path, rng):
    x = rng.normal(size=(2, 3, 4)).astype(np.float32)
    write_tensor(tmp_path / "x.gtt", x)
    y = read_tensor(tmp_path / "x.gtt")
    assert y.dtype == np.float32
    np.testing.assert_array_equal(x, y)


def test_scalar_roundtrip():
    assert decode_tensor(encode_tensor(np.float32(2.5))).shape == ()


def test_bad_magic():
    with pytest.raises(TensorFormatError):
        decode_tensor(b"NOTATENS" + bytes(8))


def test_truncated_payload():
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(TensorFormatError):
        decode_tensor(blob[:-1])


def test_refuses_non_finite():
    with pytest.raises(TensorFormatError):
        encode_tensor(np.array([np.nan]))


def test_atomic_write_leaves_no_temp(tmp_path):
    write_tensor(tmp_path / "a.gtt", np.zeros(3))
    assert [p.name for p in tmp_path.iterdir()] == ["a.gtt"]


def test_pgm_black_and_peak(tmp_path):
    write_pgm(tmp_path / "z.pgm", np.zeros((3, 4)))
    z = read_pgm(tmp_path / "z.pgm")
    assert z.shape == (3, 4) and z.max() == 0
    peak = np.zeros((5, 5))
    peak[2, 2] = 1.0
    write_pgm(tmp_path / "p.pgm", peak)
    raw = (tmp_path / "p.pgm").read_bytes()
    assert raw.startswith(b"P5\n5 5\n255\n") and max(raw[-25:]) == 255


def test_pgm_quantization_roundtrip(tmp_path, rng):
    h = rng.uniform(size=(17, 23))
    write_pgm(tmp_path / "h.pgm", h)
    assert np.abs(read_pgm(tmp_path / "h.pgm") - h).max() <= 0.5 / 255 + 1e-12


def test_derive_seed_is_stable_and_separates_names():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert len({derive_seed(0, "a"), derive_seed(0, "b"), derive_seed(1, "a")}) == 3
