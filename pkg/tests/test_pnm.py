import numpy as np
import pytest

from ssat.pnm import PnmError, decode_pnm, encode_pgm, encode_ppm, read_pnm


def test_ppm_round_trip():
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    assert np.array_equal(decode_pnm(encode_ppm(rgb)), rgb)


def test_pgm_round_trip_and_payload(tmp_path):
    gray = np.arange(64 * 64, dtype=np.int64).reshape(64, 64) % 8
    data = encode_pgm(gray.astype(np.uint8))
    header = b"P5\n64 64\n255\n"
    assert data.startswith(header)
    assert len(data) - len(header) == 64 * 64
    p = tmp_path / "x.pgm"
    p.write_bytes(data)
    assert np.array_equal(read_pnm(p), gray)


def test_header_comments():
    assert decode_pnm(b"P5 # made by hand\n2 # width\n1\n255\n\x01\x02").tolist() == [[1, 2]]


@pytest.mark.parametrize(
    "buf,msg",
    [
        (b"P3\n1 1\n255\n0 0 0", "magic"),
        (b"P5\n2 1\n65535\n\0\0\0\0", "8-bit"),
        (b"P5\n2 1\n255\n\0", "payload"),
        (b"P5\n2 1\n255\n\0\0\0", "payload"),
        (b"P5\n2", "truncated"),
        (b"P5\nx 1\n255\n\0", "non-integer"),
    ],
)
def test_malformed(buf, msg):
    with pytest.raises(PnmError, match=msg):
        decode_pnm(buf)


def test_encode_rejects_bad_shapes():
    with pytest.raises(PnmError):
        encode_ppm(np.zeros((2, 2)))
    with pytest.raises(PnmError):
        encode_pgm(np.zeros((2, 2, 3)))
