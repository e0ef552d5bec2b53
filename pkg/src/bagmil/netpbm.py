"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only.

The reader reports malformed input with the filename and the byte offset
where parsing failed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(Exception):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) uint8 array as binary PPM."""
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise ValueError(f"write_ppm expects (3,H,W) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"write_pgm expects (H,W) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


class _Scanner:
    def __init__(self, path, raw: bytes):
        self.path = path
        self.raw = raw
        self.pos = 0

    def fail(self, message: str):
        raise NetpbmError(self.path, self.pos, message)

    def skip_whitespace(self) -> None:
        # whitespace and '#' comments terminated by newline
        while self.pos < len(self.raw):
            ch = self.raw[self.pos]
            if ch in b" \t\r\n":
                self.pos += 1
            elif ch == ord("#"):
                while self.pos < len(self.raw) and self.raw[self.pos] != ord("\n"):
                    self.pos += 1
            else:
                return

    def token(self) -> bytes:
        self.skip_whitespace()
        start = self.pos
        while self.pos < len(self.raw) and self.raw[self.pos] not in b" \t\r\n#":
            self.pos += 1
        if self.pos == start:
            self.fail("expected a header token")
        return self.raw[start:self.pos]

    def integer(self, what: str) -> int:
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            self.fail(f"invalid {what} {tok!r}")


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise NetpbmError(path, 0, str(exc)) from exc
    sc = _Scanner(path, raw)
    if sc.token() != magic:
        sc.pos = 0
        sc.fail(f"bad magic, expected {magic.decode()}")
    width = sc.integer("width")
    height = sc.integer("height")
    maxval = sc.integer("maxval")
    if width <= 0 or height <= 0:
        sc.fail(f"non-positive dimensions {width}x{height}")
    if maxval != 255:
        sc.fail(f"unsupported maxval {maxval} (only 255)")
    if sc.pos >= len(raw) or raw[sc.pos] not in b" \t\r\n":
        sc.fail("missing whitespace after maxval")
    sc.pos += 1
    expected = width * height * channels
    if len(raw) - sc.pos < expected:
        sc.pos = len(raw)
        sc.fail(f"truncated pixel data, need {expected} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=sc.pos)
    if channels == 1:
        return data.reshape(height, width).copy()
    return data.reshape(height, width, channels).transpose(2, 0, 1).copy()


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) uint8 array."""
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an (H, W) uint8 array."""
    return _read(path, b"P5", 1)
