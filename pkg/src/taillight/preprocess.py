"""Frame sequences to network inputs.

A window of ``W`` raw frames becomes ``[x_1, |warp(x_1) - x_2|, ...]``: the
first frame followed by ``W - 1`` absolute differences between each aligned
previous frame and the current one.  Alignment is a global integer shift
found by exhaustive search over ``+-max_shift`` pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .states import TaillightState

log = logging.getLogger(__name__)

ALIGN_MODES = ("identity", "global_shift")


@dataclass
class FrameSequence:
    frames: np.ndarray  # (N, H, W, 3) uint8
    source_id: str
    label: TaillightState

    def __len__(self):
        return len(self.frames)


@dataclass
class Chunk:
    raw: np.ndarray  # (W, C, S, S) float in [0, 1]
    net_input: np.ndarray  # (W, C, S, S)
    label: TaillightState
    origin: tuple  # (source_id, start index)
    shifts: np.ndarray  # (W - 1, 2) integer (dx, dy) per consecutive pair


@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 1.0
    contrast: float = 1.0
    gains: tuple = (1.0, 1.0, 1.0)
    flip: bool = False


def resize_frames(frames: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of ``(N, H, W, 3)`` uint8 frames to ``side x side``."""
    if frames.shape[1] == side and frames.shape[2] == side:
        return frames
    return np.stack([np.asarray(Image.fromarray(f).resize((side, side), Image.BILINEAR)) for f in frames])


def to_network_layout(frames: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``(N, H, W, 3)`` uint8 to ``(N, 3, H, W)`` floats in [0, 1]."""
    return (np.asarray(frames, dtype=dtype) / 255.0).transpose(0, 3, 1, 2).astype(dtype, copy=False)


def _overlap(size: int, d: int) -> tuple[slice, slice]:
    """Slices (destination, source) of a length-``size`` axis shifted by ``d``."""
    if d >= 0:
        return slice(d, size), slice(0, size - d)
    return slice(0, size + d), slice(-d, size)


def _shift_order(max_shift: int):
    cands = [(dx, dy) for dy in range(-max_shift, max_shift + 1) for dx in range(-max_shift, max_shift + 1)]
    return sorted(cands, key=lambda s: (abs(s[0]) + abs(s[1]), s[1], s[0]))


def estimate_shift(prev: np.ndarray, cur: np.ndarray, max_shift: int) -> tuple[int, int]:
    """Integer ``(dx, dy)`` minimising the mean absolute difference on the overlap.

    ``prev`` shifted right by ``dx`` and down by ``dy`` best matches ``cur``.
    Ties go to the smallest shift.
    """
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    h, w = cur.shape[-2:]
    best, best_cost = (0, 0), np.inf
    for dx, dy in _shift_order(min(max_shift, h - 1, w - 1)):
        ys_dst, ys_src = _overlap(h, dy)
        xs_dst, xs_src = _overlap(w, dx)
        cost = np.abs(cur[..., ys_dst, xs_dst] - prev[..., ys_src, xs_src]).mean()
        if cost < best_cost:
            best, best_cost = (dx, dy), cost
    return best


def warp(prev: np.ndarray, cur: np.ndarray, shift) -> np.ndarray:
    """Shift ``prev`` by ``(dx, dy)``; uncovered pixels take ``cur``'s values."""
    dx, dy = int(shift[0]), int(shift[1])
    h, w = cur.shape[-2:]
    out = np.array(cur, dtype=np.result_type(prev.dtype, cur.dtype, np.float32), copy=True)
    ys_dst, ys_src = _overlap(h, dy)
    xs_dst, xs_src = _overlap(w, dx)
    out[..., ys_dst, xs_dst] = prev[..., ys_src, xs_src]
    return out


def estimate_shifts(frames, mode: str = "global_shift", max_shift: int = 4) -> np.ndarray:
    if mode not in ALIGN_MODES:
        raise ValueError(f"unknown align mode {mode!r}; expected one of {ALIGN_MODES}")
    n = len(frames)
    shifts = np.zeros((max(n - 1, 0), 2), dtype=np.int64)
    if mode == "global_shift":
        for t in range(1, n):
            shifts[t - 1] = estimate_shift(frames[t - 1], frames[t], max_shift)
    return shifts


def diffs_with_shifts(frames, shifts) -> list[np.ndarray]:
    out = []
    for t in range(1, len(frames)):
        prev = np.asarray(frames[t - 1])
        cur = np.asarray(frames[t])
        out.append(np.abs(warp(prev, cur, shifts[t - 1]) - cur.astype(np.result_type(cur.dtype, np.float32))))
    return out


def align_and_diff(frames, mode: str = "global_shift", max_shift: int = 4) -> list[np.ndarray]:
    """Absolute differences between each aligned frame and its successor.

    Frames carry their spatial axes last (``(H, W)`` or ``(C, H, W)``).
    """
    if len(frames) < 2:
        raise ValueError(f"align_and_diff needs at least 2 frames, got {len(frames)}")
    shapes = {np.shape(f) for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames differ in shape: {sorted(shapes)}")
    return diffs_with_shifts(frames, estimate_shifts(frames, mode, max_shift))


def build_net_input(raw: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    diffs = diffs_with_shifts(raw, shifts)
    return np.stack([raw[0]] + [d.astype(raw.dtype, copy=False) for d in diffs])


def chunk_starts(n: int, window: int, stride: int) -> list[int]:
    if window < 2 or stride < 1:
        raise ValueError(f"need window >= 2 and stride >= 1, got window={window} stride={stride}")
    if n < window:
        return []
    return list(range(0, (n - window) // stride * stride + 1, stride))


def prepare_frames(seq: FrameSequence, side: int | None = None, dtype=np.float32) -> np.ndarray:
    frames = seq.frames if side is None else resize_frames(seq.frames, side)
    return to_network_layout(frames, dtype)


def make_chunks(seq: FrameSequence, window: int = 16, stride: int = 1, mode: str = "global_shift",
                max_shift: int = 4, side: int | None = None, frames: np.ndarray | None = None,
                shifts: np.ndarray | None = None) -> list[Chunk]:
    """Slide a ``window`` over ``seq``; each chunk gets its network input.

    ``frames``/``shifts`` let callers pass a sequence already converted to
    network layout and aligned, so alignment runs once per sequence.
    """
    starts = chunk_starts(len(seq), window, stride)
    if not starts:
        log.warning("sequence %s has %d frames, fewer than the window of %d: no chunks", seq.source_id, len(seq), window)
        return []
    if frames is None:
        frames = prepare_frames(seq, side)
    if shifts is None:
        shifts = estimate_shifts(frames, mode, max_shift)
    chunks = []
    for s in starts:
        raw = frames[s:s + window]
        sh = shifts[s:s + window - 1]
        chunks.append(Chunk(raw, build_net_input(raw, sh), seq.label, (seq.source_id, s), sh))
    return chunks


def sample_augment(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        brightness=float(rng.uniform(0.8, 1.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
        gains=tuple(float(g) for g in rng.uniform(0.9, 1.1, size=3)),
        flip=bool(rng.random() < 0.5),
    )


def apply_augment(chunk: Chunk, label: TaillightState, params: AugmentParams) -> tuple[Chunk, TaillightState]:
    # one draw per chunk, applied identically to every frame
    raw = chunk.raw
    dtype = raw.dtype
    if params.gains != (1.0, 1.0, 1.0):
        raw = raw * np.asarray(params.gains, dtype=dtype).reshape(1, -1, 1, 1)
    if params.brightness != 1.0:
        raw = raw * dtype.type(params.brightness)
    if params.contrast != 1.0:
        c = dtype.type(params.contrast)
        raw = raw * c + raw.mean() * (1 - c)
    raw = np.clip(raw, 0.0, 1.0).astype(dtype, copy=False)
    shifts = chunk.shifts
    if params.flip:
        raw = raw[..., ::-1]
        shifts = shifts * np.array([-1, 1])
        label = label.flipped()
    raw = np.ascontiguousarray(raw)
    out = replace(chunk, raw=raw, net_input=build_net_input(raw, shifts), label=label, shifts=shifts)
    return out, label


def augment(chunk: Chunk, label: TaillightState, seed) -> tuple[Chunk, TaillightState]:
    """Random colour balance, brightness, contrast and horizontal flip.

    Alignment shifts are reused from the unaugmented chunk (mirrored under a
    flip) rather than re-estimated.
    """
    return apply_augment(chunk, label, sample_augment(np.random.default_rng(seed)))
