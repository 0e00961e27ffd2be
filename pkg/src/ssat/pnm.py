"""Binary PPM (P6) and PGM (P5) encode/decode, 8-bit only."""

import numpy as np


class PnmError(ValueError):
    pass


def encode_ppm(rgb):
    """Encode an (h, w, 3) uint8 array as P6 bytes."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise PnmError(f"PPM expects an (h, w, 3) array, got {rgb.shape}")
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def encode_pgm(gray):
    """Encode an (h, w) uint8 array as P5 bytes."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise PnmError(f"PGM expects an (h, w) array, got {gray.shape}")
    if gray.size and (gray.min() < 0 or gray.max() > 255):
        raise PnmError("PGM values must be in [0, 255]")
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def _tokens(buf, count, start):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, pos, n = [], start, len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        begin = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if begin == pos:
            raise PnmError(f"truncated header at byte {pos}")
        out.append(buf[begin:pos])
    return out, pos


def decode_pnm(buf):
    """Decode P5/P6 bytes to an (h, w) or (h, w, 3) uint8 array."""
    buf = bytes(buf)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"bad magic {magic!r}; expected P5 or P6")
    toks, pos = _tokens(buf, 3, 2)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise PnmError(f"non-integer header field in {toks!r}") from None
    if w <= 0 or h <= 0:
        raise PnmError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise PnmError(f"only 8-bit files are supported (maxval={maxval})")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PnmError(f"missing whitespace after header at byte {pos}")
    pos += 1
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    payload = buf[pos:]
    if len(payload) != need:
        raise PnmError(f"payload is {len(payload)} bytes, expected {need} for {w}x{h}x{ch}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def read_pnm(path):
    with open(path, "rb") as f:
        return decode_pnm(f.read())

