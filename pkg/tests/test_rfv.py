import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ramer.rfv import MAGIC, FormatError, decode_rfv, encode_rfv, read_rfv, write_rfv

ids_st = st.lists(st.text(min_size=1, max_size=12).filter(lambda s: len(s.encode()) < 100),
                  min_size=0, max_size=8, unique=True)


@given(ids_st, st.integers(1, 6), st.sampled_from(["audio", "video", "text"]), st.data())
def test_round_trip(ids, dim, modality, data):
    vecs = data.draw(arrays(np.float32, (len(ids), dim),
                            elements=st.floats(-1e6, 1e6, width=32)))
    mod, got_ids, got = decode_rfv(encode_rfv(modality, ids, vecs))
    assert mod == modality and got_ids == ids
    np.testing.assert_array_equal(got, vecs)


def test_layout_is_little_endian(tmp_path):
    p = tmp_path / "x.rfv"
    write_rfv(p, "video", ["ab"], np.array([[1.0, -2.0]], dtype=np.float32))
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack_from("<HBIQ", raw, 8) == (1, 1, 2, 1)
    assert raw[23:25] == b"\x02\x00" and raw[25:27] == b"ab"
    assert struct.unpack_from("<2f", raw, 27) == (1.0, -2.0)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
    assert read_rfv(p)[1] == ["ab"]


def _blob():
    return bytearray(encode_rfv("audio", ["a", "b"], np.eye(2, dtype=np.float32)))


def test_corrupted_crc_rejected():
    b = _blob()
    b[30] ^= 0xFF
    with pytest.raises(FormatError, match="CRC"):
        decode_rfv(bytes(b))


def test_bad_magic_and_version():
    b = _blob()
    b[0:8] = b"NOTRFV01"
    with pytest.raises(FormatError, match="magic"):
        decode_rfv(bytes(b))
    b = _blob()
    b[8] = 9
    with pytest.raises(FormatError, match="version"):
        decode_rfv(bytes(b))


def test_truncated_rejected():
    b = _blob()
    body = bytes(b[:-10])
    with pytest.raises(FormatError):
        decode_rfv(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(FormatError, match="short"):
        decode_rfv(bytes(b[:10]))
