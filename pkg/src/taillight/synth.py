"""Procedural rear-view vehicle sequences for the eight taillight states.

A car body with two lamps and a centre brake bar is drawn on a plain
background.  Brake holds both lamps (and the bar) at the brake colour; an
active turn signal alternates its lamp between the amber "on" colour and the
resting colour with period ``blink_period``.  Optional nuisances: global
per-frame jitter, Gaussian pixel noise, and bright reflections drifting
across the upper body.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .preprocess import FrameSequence
from .states import TaillightState

Rect = tuple  # (x0, y0, x1, y1) as fractions of the image side


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneParams:
    image_side: int = 96
    background: tuple = (120, 118, 112)
    body: Rect = (0.12, 0.24, 0.88, 0.84)
    body_color: tuple = (150, 155, 165)
    window: Rect = (0.22, 0.28, 0.78, 0.46)
    window_color: tuple = (45, 50, 60)
    left_lamp: Rect = (0.16, 0.54, 0.34, 0.68)
    right_lamp: Rect = (0.66, 0.54, 0.84, 0.68)
    center_bar: Rect = (0.42, 0.49, 0.58, 0.53)
    lamp_off: tuple = (95, 25, 25)
    lamp_brake: tuple = (235, 50, 40)
    lamp_on: tuple = (255, 185, 50)
    bar_off: tuple = (70, 30, 30)
    blink_period: int = 8
    duty_cycle: float = 0.5
    noise_sigma: float = 0.0
    jitter: int = 0
    distractor_prob: float = 0.0
    distractor_size: float = 0.14
    distractor_color: tuple = (245, 245, 240)

    def pixels(self, rect: Rect) -> tuple[int, int, int, int]:
        """(y0, y1, x0, x1) pixel bounds of a fractional rectangle."""
        s = self.image_side
        x0, y0, x1, y1 = rect
        return int(round(y0 * s)), int(round(y1 * s)), int(round(x0 * s)), int(round(x1 * s))

    @property
    def on_frames(self) -> int:
        return int(round(self.duty_cycle * self.blink_period))

    def validate(self, window_length: int = 16) -> None:
        by0, by1, bx0, bx1 = self.pixels(self.body)
        left, right = self.pixels(self.left_lamp), self.pixels(self.right_lamp)
        for name, (y0, y1, x0, x1) in (("left_lamp", left), ("right_lamp", right)):
            if y1 <= y0 or x1 <= x0:
                raise SceneError(f"{name} is empty at image side {self.image_side}")
            if y0 < by0 or y1 > by1 or x0 < bx0 or x1 > bx1:
                raise SceneError(f"{name} {(y0, y1, x0, x1)} lies outside the body {(by0, by1, bx0, bx1)}")
        if not (left[1] <= right[0] or right[1] <= left[0] or left[3] <= right[2] or right[3] <= left[2]):
            raise SceneError("lamp regions overlap")
        if not 2 <= self.blink_period <= window_length:
            raise SceneError(f"blink_period {self.blink_period} outside [2, {window_length}]")
        if not 0 < self.on_frames < self.blink_period:
            raise SceneError(f"duty_cycle {self.duty_cycle} gives no on/off alternation at period {self.blink_period}")
        if self.jitter < 0 or self.noise_sigma < 0:
            raise SceneError("jitter and noise_sigma must be non-negative")


def _fill(canvas, rect_px, color, offset):
    y0, y1, x0, x1 = rect_px
    canvas[y0 + offset:y1 + offset, x0 + offset:x1 + offset] = color


def blink_on(frame: int, phase: int, params: SceneParams) -> bool:
    return (frame + phase) % params.blink_period < params.on_frames


def render_sequence(state: TaillightState, params: SceneParams, length: int, seed, window_length: int = 16,
                    source_id: str = "") -> FrameSequence:
    params.validate(window_length)
    if length < window_length:
        raise SceneError(f"sequence length {length} shorter than the window {window_length}")
    rng = np.random.default_rng(seed)
    side, j = params.image_side, params.jitter
    phase = int(rng.integers(params.blink_period))
    offsets = rng.integers(-j, j + 1, size=(length, 2)) if j else np.zeros((length, 2), dtype=int)

    distractor = None
    if params.distractor_prob > 0 and rng.random() < params.distractor_prob:
        by0, _, bx0, bx1 = params.pixels(params.body)
        lamp_top = min(params.pixels(params.left_lamp)[0], params.pixels(params.right_lamp)[0])
        size = max(2, int(round(params.distractor_size * side)))
        y = int(rng.integers(by0, max(by0 + 1, lamp_top - size + 1)))
        speed = float(rng.uniform(0.03, 0.08)) * side * (1 if rng.random() < 0.5 else -1)
        x_start = float(rng.uniform(bx0 - size, bx1))
        distractor = (y, size, x_start, speed)

    base = np.empty((side + 2 * j, side + 2 * j, 3), dtype=np.float64)
    base[:] = params.background
    _fill(base, params.pixels(params.body), params.body_color, j)
    _fill(base, params.pixels(params.window), params.window_color, j)
    resting = params.lamp_brake if state.brake else params.lamp_off
    _fill(base, params.pixels(params.center_bar), params.lamp_brake if state.brake else params.bar_off, j)

    frames = np.empty((length, side, side, 3), dtype=np.uint8)
    left_px, right_px = params.pixels(params.left_lamp), params.pixels(params.right_lamp)
    body_px = params.pixels(params.body)
    for f in range(length):
        canvas = base.copy()
        on = blink_on(f, phase, params)
        _fill(canvas, left_px, params.lamp_on if (state.left and on) else resting, j)
        _fill(canvas, right_px, params.lamp_on if (state.right and on) else resting, j)
        if distractor is not None:
            y, size, x_start, speed = distractor
            x0 = int(round(x_start + speed * f))
            x0c, x1c = max(x0, body_px[2]), min(x0 + size, body_px[3])
            if x1c > x0c:
                patch = canvas[y + j:y + size + j, x0c + j:x1c + j]
                patch[:] = 0.25 * patch + 0.75 * np.asarray(params.distractor_color, dtype=np.float64)
        dx, dy = offsets[f]
        # content moves by (dx, dy): crop the canvas the opposite way
        crop = canvas[j - dy:j - dy + side, j - dx:j - dx + side]
        if params.noise_sigma > 0:
            crop = crop + rng.normal(0.0, params.noise_sigma, size=crop.shape)
        frames[f] = np.clip(np.rint(crop), 0, 255).astype(np.uint8)
    return FrameSequence(frames, source_id, state)


_BODY_PALETTE = ((150, 155, 165), (60, 62, 70), (205, 205, 200), (40, 70, 120), (60, 110, 80), (180, 170, 140),
                 (110, 110, 115))


def vary_scene(base: SceneParams, rng: np.random.Generator) -> SceneParams:
    """Per-sequence appearance: body colour, small placement offset, lamp shade."""
    color = np.asarray(_BODY_PALETTE[int(rng.integers(len(_BODY_PALETTE)))], dtype=float)
    color = tuple(int(c) for c in np.clip(color + rng.integers(-15, 16, size=3), 0, 255))
    bg = tuple(int(c) for c in np.clip(np.asarray(base.background) + rng.integers(-30, 31), 0, 255))
    dx, dy = rng.uniform(-0.04, 0.04, size=2)

    def move(rect):
        x0, y0, x1, y1 = rect
        return (x0 + dx, y0 + dy, x1 + dx, y1 + dy)

    shade = float(rng.uniform(0.85, 1.15))
    lamp_off = tuple(int(min(255, c * shade)) for c in base.lamp_off)
    return replace(base, background=bg, body=move(base.body), body_color=color, window=move(base.window),
                   left_lamp=move(base.left_lamp), right_lamp=move(base.right_lamp),
                   center_bar=move(base.center_bar), lamp_off=lamp_off)
