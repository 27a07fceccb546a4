"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      b"TLATTN01"
    version    u32
    config     u32 length + UTF-8 ``key = value`` lines
    tensors    u32 count, then per tensor:
                   u32 name length, name bytes, u8 dtype, u8 rank, u32 dims[rank], raw values
    rng state  u32 length + UTF-8 JSON
    crc32      u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_text, from_mapping, parse_text

MAGIC = b"TLATTN01"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
STAGE_KEY = "checkpoint_stage"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    stage: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_pack_str(dump_text(ckpt.config) + f"{STAGE_KEY} = {ckpt.stage}\n"))
    table = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    table += [(f"momentum/{k}", v) for k, v in ckpt.momentum.items()]
    parts.append(struct.pack("<I", len(table)))
    for name, arr in table:
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)) + name_b)
        parts.append(struct.pack("<BB", DTYPE_CODES[le], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    parts.append(_pack_str(json.dumps(ckpt.rng_state, sort_keys=True)))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {n} bytes at {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint too short")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(body)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    values = parse_text_with_stage(r.string())
    stage = int(values.pop(STAGE_KEY))
    cfg = from_mapping(values)
    (count,) = r.unpack("<I")
    params, momentum = {}, {}
    for _ in range(count):
        name = r.string()
        code, rank = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        dtype = CODE_DTYPES[code]
        n = int(np.prod(dims)) * dtype.itemsize
        arr = np.frombuffer(r.take(n), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        kind, _, key = name.partition("/")
        {"param": params, "momentum": momentum}[kind][key] = arr
    rng_state = json.loads(r.string())
    return Checkpoint(cfg, stage, params, momentum, rng_state)


def parse_text_with_stage(text: str) -> dict[str, str]:
    lines, stage = [], None
    for line in text.splitlines():
        if line.split("=", 1)[0].strip() == STAGE_KEY:
            stage = line.split("=", 1)[1].strip()
        else:
            lines.append(line)
    if stage is None:
        raise CheckpointError("checkpoint config block lacks a stage tag")
    values = parse_text("\n".join(lines), "<checkpoint>")
    values[STAGE_KEY] = stage
    return values


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return decode(path.read_bytes())
