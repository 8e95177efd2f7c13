import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from svfit import io
from svfit.errors import (
    BadFormat,
    BadMagic,
    ChecksumError,
    DuplicateName,
    InvalidInput,
    TruncatedPayload,
    UnsupportedMaxval,
    UnsupportedVersion,
)

finite = st.floats(allow_nan=False, allow_infinity=False, allow_subnormal=True)
matrices = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                      elements=finite)


class TestMatrixFile:
    def test_header_size(self, tmp_path):
        path = tmp_path / "m.svfm"
        io.write_matrix(path, np.zeros((1, 1)))
        data = path.read_bytes()
        assert len(data) == 32
        assert data[:4] == b"SVFM" and data[4] == 1 and data[5] == 1
        assert struct.unpack("<QQ", data[8:24]) == (1, 1)

    def test_round_trip_seeded(self, tmp_path, rng):
        m = rng.standard_normal((16, 16))
        io.write_matrix(tmp_path / "m", m)
        assert io.read_matrix(tmp_path / "m").tobytes() == m.tobytes()

    def test_negative_zero_and_subnormal(self, tmp_path):
        m = np.array([[-0.0, 5e-324, -2.2250738585072014e-308]])
        io.write_matrix(tmp_path / "m", m)
        back = io.read_matrix(tmp_path / "m")
        assert back.tobytes() == m.tobytes()
        assert np.signbit(back[0, 0])

    @settings(max_examples=100, deadline=None)
    @given(matrices)
    def test_round_trip_property(self, m):
        a, end = io.decode_matrix(io.encode_matrix(m))
        assert a.tobytes() == m.tobytes() and a.shape == m.shape

    def test_bad_magic(self, tmp_path):
        data = bytearray(io.encode_matrix(np.ones((2, 2))))
        data[:4] = b"XXXX"
        (tmp_path / "m").write_bytes(data)
        with pytest.raises(BadMagic):
            io.read_matrix(tmp_path / "m")

    def test_bad_version(self):
        data = bytearray(io.encode_matrix(np.ones((2, 2))))
        data[4] = 2
        with pytest.raises(UnsupportedVersion):
            io.decode_matrix(bytes(data))

    def test_truncated(self):
        data = io.encode_matrix(np.ones((2, 2)))
        with pytest.raises(TruncatedPayload):
            io.decode_matrix(data[:-1])
        with pytest.raises(TruncatedPayload):
            io.decode_matrix(data[:10])

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "m").write_bytes(io.encode_matrix(np.ones((2, 2))) + b"\0")
        with pytest.raises(BadFormat):
            io.read_matrix(tmp_path / "m")

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInput):
            io.encode_matrix(np.array([[np.nan]]))

    def test_little_endian_payload(self):
        data = io.encode_matrix(np.array([[1.0]]))
        assert data[24:] == struct.pack("<d", 1.0)


class TestCheckpoint:
    def test_empty(self, tmp_path):
        io.write_checkpoint(tmp_path / "c", {})
        data = (tmp_path / "c").read_bytes()
        assert data[:4] == b"SVFC" and struct.unpack("<I", data[5:9]) == (0,)
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
        assert io.read_checkpoint(tmp_path / "c") == {}

    def test_order_preserved(self, tmp_path, rng):
        tensors = {"zeta": rng.standard_normal((2, 3)), "alpha": rng.standard_normal((4, 1))}
        io.write_checkpoint(tmp_path / "c", tensors)
        back = io.read_checkpoint(tmp_path / "c")
        assert list(back) == ["zeta", "alpha"]
        for k in tensors:
            assert back[k].tobytes() == tensors[k].tobytes()

    def test_flipped_payload_bit(self, tmp_path, rng):
        data = bytearray(io.encode_checkpoint({"w": rng.standard_normal((3, 3))}))
        data[40] ^= 0x01
        (tmp_path / "c").write_bytes(data)
        with pytest.raises(ChecksumError):
            io.read_checkpoint(tmp_path / "c")

    def test_duplicate_name_detected_on_read(self):
        body = struct.pack("<4sBI", b"SVFC", 1, 2)
        for _ in range(2):
            body += struct.pack("<H", 1) + b"w" + io.encode_matrix(np.ones((1, 1)))
        data = body + struct.pack("<I", zlib.crc32(body))
        with pytest.raises(DuplicateName):
            io.decode_checkpoint(data)

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            io.decode_checkpoint(b"SVFM" + b"\0" * 20)

    def test_unicode_names(self, rng):
        tensors = {"blocks.0.w_q.svfit.σ": rng.standard_normal((1, 2))}
        back = io.decode_checkpoint(io.encode_checkpoint(tensors))
        assert list(back) == list(tensors)

    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=12), matrices, max_size=4))
    def test_round_trip_property(self, tensors):
        back = io.decode_checkpoint(io.encode_checkpoint(tensors))
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].tobytes() == tensors[k].tobytes()


class TestPgm:
    def test_decode_small(self):
        data = b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])
        img = io.decode_pgm(data)
        np.testing.assert_array_equal(img.pixels, [[0.0, 1.0], [128 / 255, 64 / 255]])
        assert (img.width, img.height) == (2, 2)

    def test_comments_and_sixteen_bit(self):
        raster = np.array([[0, 1000], [65535, 7]], dtype=">u2").tobytes()
        data = b"P5\n# made by hand\n2 # width\n2\n65535\n" + raster
        img = io.decode_pgm(data)
        np.testing.assert_allclose(img.pixels, [[0, 1000 / 65535], [1, 7 / 65535]])

    def test_round_trip_fixed_point(self, tmp_path, rng):
        img = io.GrayImage(rng.uniform(-0.2, 1.2, (9, 13)))
        io.write_pgm(tmp_path / "a.pgm", img)
        once = io.read_pgm(tmp_path / "a.pgm")
        io.write_pgm(tmp_path / "b.pgm", once)
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
        assert io.read_pgm(tmp_path / "b.pgm").pixels.tobytes() == once.pixels.tobytes()

    def test_writer_header(self):
        data = io.encode_pgm(io.GrayImage(np.ones((3, 5))))
        assert data.startswith(b"P5\n5 3\n255\n") and len(data) == len(b"P5\n5 3\n255\n") + 15

    def test_ascii_rejected(self):
        with pytest.raises(BadFormat):
            io.decode_pgm(b"P2\n2 2\n255\n0 1 2 3\n")

    @pytest.mark.parametrize("maxval", [0, 65536])
    def test_bad_maxval(self, maxval):
        with pytest.raises(UnsupportedMaxval):
            io.decode_pgm(b"P5\n1 1\n%d\n\0\0" % maxval)

    def test_truncated_raster(self):
        with pytest.raises(TruncatedPayload):
            io.decode_pgm(b"P5\n4 4\n255\n" + bytes(10))

    def test_sample_above_maxval(self):
        with pytest.raises(BadFormat):
            io.decode_pgm(b"P5\n1 1\n100\n" + bytes([200]))


def test_sniff(tmp_path):
    io.write_matrix(tmp_path / "m", np.ones((1, 1)))
    io.write_checkpoint(tmp_path / "c", {})
    io.write_pgm(tmp_path / "p", io.GrayImage(np.ones((2, 2))))
    assert [io.sniff(tmp_path / n) for n in "mcp"] == ["matrix", "checkpoint", "pgm"]
    (tmp_path / "x").write_bytes(b"XXXX")
    with pytest.raises(BadMagic):
        io.sniff(tmp_path / "x")
