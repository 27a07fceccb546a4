"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class MalformedImageError(ValueError):
    pass


class TruncatedImageError(MalformedImageError):
    def __init__(self, path, offset: int, expected: int):
        self.path = str(path)
        self.offset = offset
        self.expected = expected
        super().__init__(f"{path}: truncated at byte offset {offset}; pixel data needs {expected} bytes past the header")


def encode_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def write_pnm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(image))


def _header_tokens(buf: bytes, path):
    """Return (tokens, offset of first pixel byte)."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedImageError(f"{path}: header ends at byte {pos} after {len(tokens)} of 4 fields")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedImageError(f"{path}: missing whitespace after maxval at byte {pos}")
    return tokens, pos + 1


def decode_pnm(buf: bytes, path="<bytes>") -> np.ndarray:
    tokens, offset = _header_tokens(buf, path)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise MalformedImageError(f"{path}: unsupported magic {magic!r} at byte 0 (want P5 or P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedImageError(f"{path}: non-integer size/maxval field in header {tokens[1:]!r}") from None
    if w <= 0 or h <= 0:
        raise MalformedImageError(f"{path}: bad image size {w}x{h}")
    if maxval != 255:
        raise MalformedImageError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(buf) - offset < need:
        raise TruncatedImageError(path, len(buf), need)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def read_pnm(path) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing image file: {path}")
    with open(path, "rb") as fh:
        return decode_pnm(fh.read(), path)
