"""Reading and writing PGM grayscale images.

Both the ASCII (P2) and binary (P5) variants are handled, with maxval
up to 65535 (two-byte big-endian samples in P5).  Pixels normalize to
floats in [0, 1] by dividing by maxval.  Malformed input raises
PgmError carrying the byte offset where parsing stopped.
"""

from __future__ import annotations

import numpy as np

from .errors import PgmError

_WS = b" \t\r\n\v\f"


class _Scanner:
    """Token scanner over header bytes; comments run # to end of line."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip_space(self, require: bool = False):
        moved = False
        while self.pos < len(self.data):
            c = self.data[self.pos:self.pos + 1]
            if c in (b"#",):
                nl = self.data.find(b"\n", self.pos)
                self.pos = len(self.data) if nl < 0 else nl + 1
                moved = True
            elif c in _WS:
                self.pos += 1
                moved = True
            else:
                break
        if require and not moved:
            raise PgmError("expected whitespace", self.pos)

    def token(self) -> bytes:
        self.skip_space()
        if self.pos >= len(self.data):
            raise PgmError("unexpected end of file", self.pos)
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1] not in _WS \
                and self.data[self.pos:self.pos + 1] != b"#":
            self.pos += 1
        return self.data[start:self.pos]

    def int_token(self, what: str) -> int:
        self.skip_space()
        start_err = self.pos
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            raise PgmError(f"bad {what} {tok[:20]!r}", start_err) from None


def parse_pgm(data: bytes) -> np.ndarray:
    sc = _Scanner(data)
    magic = sc.token()
    if magic not in (b"P2", b"P5"):
        raise PgmError(f"not a PGM file (magic {magic[:8]!r})", 0)
    width = sc.int_token("width")
    height = sc.int_token("height")
    maxval = sc.int_token("maxval")
    if width < 1 or height < 1:
        raise PgmError(f"bad dimensions {width}x{height}", sc.pos)
    if not 1 <= maxval <= 65535:
        raise PgmError(f"maxval {maxval} out of range 1..65535", sc.pos)

    n = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates the header from raster data
        if sc.pos >= len(data) or data[sc.pos:sc.pos + 1] not in _WS:
            raise PgmError("expected single whitespace before raster", sc.pos)
        sc.pos += 1
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = n * dt.itemsize
        raw = data[sc.pos:sc.pos + need]
        if len(raw) < need:
            raise PgmError(
                f"raster truncated: need {need} bytes, have {len(raw)}",
                sc.pos + len(raw))
        pixels = np.frombuffer(raw, dtype=dt).astype(np.float64)
    else:
        vals = np.empty(n, dtype=np.float64)
        for i in range(n):
            vals[i] = sc.int_token("pixel")
        pixels = vals
    if np.any(pixels > maxval):
        bad = int(np.argmax(pixels > maxval))
        raise PgmError(f"pixel {bad} exceeds maxval {maxval}", sc.pos)
    return (pixels / float(maxval)).reshape(height, width)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    return parse_pgm(data)


def format_pgm(img, maxval: int = 255, ascii_: bool = False) -> bytes:
    """Quantize floats in [0, 1] to a PGM byte string."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval out of range 1..65535")
    q = np.clip(np.rint(img * maxval), 0, maxval).astype(np.uint16)
    h, w = img.shape
    if ascii_:
        lines = [f"P2\n{w} {h}\n{maxval}\n"]
        for row in q:
            lines.append(" ".join(str(int(v)) for v in row) + "\n")
        return "".join(lines).encode()
    head = f"P5\n{w} {h}\n{maxval}\n".encode()
    if maxval > 255:
        return head + q.astype(">u2").tobytes()
    return head + q.astype("u1").tobytes()


def write_pgm(path, img, maxval: int = 255, ascii_: bool = False):
    with open(path, "wb") as f:
        f.write(format_pgm(img, maxval, ascii_))
