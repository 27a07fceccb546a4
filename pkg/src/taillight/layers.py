"""Residual backbone split into head/tail, fully connected layers, LSTM cell.

Parameters live in a flat ``{name: Tensor}`` dict; layer functions are pure
functions of their inputs and that dict.  Images are ``(N, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import BackboneConfig


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> Tensor:
    bound = gain * np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _conv_param(rng, c_out, c_in, k, dtype):
    # He-style gain for layers followed by ReLU
    return uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, np.sqrt(6.0), dtype)


def init_backbone(cfg: BackboneConfig, in_channels: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    p = {
        "backbone.stem.w": _conv_param(rng, cfg.stem_channels, in_channels, 3, dtype),
        "backbone.stem.b": zeros_param((cfg.stem_channels,), dtype),
    }
    c_prev = cfg.stem_channels
    for s, c in enumerate(cfg.stage_channels, 1):
        pre = f"backbone.stage{s}"
        p[f"{pre}.conv1.w"] = _conv_param(rng, c, c_prev, 3, dtype)
        p[f"{pre}.conv1.b"] = zeros_param((c,), dtype)
        p[f"{pre}.conv2.w"] = _conv_param(rng, c, c, 3, dtype)
        p[f"{pre}.conv2.b"] = zeros_param((c,), dtype)
        p[f"{pre}.skip.w"] = uniform_init(rng, (c, c_prev, 1, 1), c_prev, np.sqrt(3.0), dtype)
        p[f"{pre}.skip.b"] = zeros_param((c,), dtype)
        c_prev = c
    fc_in = c_prev if cfg.pool == "avg" else c_prev * cfg.stage_side(cfg.num_stages) ** 2
    p["backbone.fc.w"] = uniform_init(rng, (cfg.feature_dim, fc_in), fc_in, 1.0, dtype)
    p["backbone.fc.b"] = zeros_param((cfg.feature_dim,), dtype)
    return p


def init_lstm(input_dim: int, hidden: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    p = {}
    fan_in = input_dim + hidden
    for gate in "ifog":
        p[f"lstm.W_{gate}"] = uniform_init(rng, (hidden, fan_in), fan_in, 1.0, dtype)
        p[f"lstm.b_{gate}"] = zeros_param((hidden,), dtype)
    p["lstm.b_f"] = Tensor(np.ones(hidden), requires_grad=True, dtype=dtype)
    return p


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as ``(out, in)``."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    y = ad.matmul(x, ad.swapaxes(w, 0, 1))
    return y if b is None else y + b


def conv_block(x: Tensor, params, name: str, stride: int, pad: int) -> Tensor:
    w = params[f"{name}.w"]
    y = ad.conv2d(x, w, stride=stride, pad=pad)
    return y + ad.reshape(params[f"{name}.b"], (1, -1, 1, 1))


def residual_stage(x: Tensor, params, stage: int) -> Tensor:
    pre = f"backbone.stage{stage}"
    y = ad.relu(conv_block(x, params, f"{pre}.conv1", stride=2, pad=1))
    y = conv_block(y, params, f"{pre}.conv2", stride=1, pad=1)
    skip = conv_block(x, params, f"{pre}.skip", stride=2, pad=0)
    return ad.relu(y + skip)


def _as_batch(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def pool(y: Tensor, cfg: BackboneConfig) -> Tensor:
    if cfg.pool == "avg":
        return ad.mean(y, axis=(2, 3))
    return ad.reshape(y, (y.shape[0], -1))


def backbone_head(x: Tensor, params, cfg: BackboneConfig) -> Tensor:
    """Stem plus stages ``1..split_l``: ``(N, C, S, S) -> (N, d, G, G)``."""
    x, single = _as_batch(x, 4)
    if x.shape[2] != cfg.input_side or x.shape[3] != cfg.input_side:
        raise ShapeError(f"backbone_head: input is {x.shape[2]}x{x.shape[3]}, config wants {cfg.input_side}x{cfg.input_side}")
    y = ad.relu(conv_block(x, params, "backbone.stem", stride=2, pad=1))
    for s in range(1, cfg.split_l + 1):
        y = residual_stage(y, params, s)
    return ad.reshape(y, y.shape[1:]) if single else y


def backbone_tail(z: Tensor, params, cfg: BackboneConfig) -> Tensor:
    """Remaining stages, pooling (see ``cfg.pool``) and the final FC: ``(N, d, G, G) -> (N, feature_dim)``.

    The input is the attention-weighted map.  It is rescaled by the cell
    count so that uniform weights reproduce the unweighted features; at the
    deepest split this makes pooling equal the attention-weighted sum.
    """
    z, single = _as_batch(z, 4)
    g = cfg.grid_side
    want = (cfg.split_channels, g, g)
    if tuple(z.shape[1:]) != want:
        raise ShapeError(f"backbone_tail: got {tuple(z.shape[1:])}, split point produces {want}")
    y = z * float(g * g)
    for s in range(cfg.split_l + 1, cfg.num_stages + 1):
        y = residual_stage(y, params, s)
    out = linear(pool(y, cfg), params["backbone.fc.w"], params["backbone.fc.b"])
    return ad.reshape(out, out.shape[1:]) if single else out


def backbone_forward(x: Tensor, params, cfg: BackboneConfig) -> Tensor:
    """Unsplit backbone: all stages, pooling, FC."""
    x, single = _as_batch(x, 4)
    y = ad.relu(conv_block(x, params, "backbone.stem", stride=2, pad=1))
    for s in range(1, cfg.num_stages + 1):
        y = residual_stage(y, params, s)
    out = linear(pool(y, cfg), params["backbone.fc.w"], params["backbone.fc.b"])
    return ad.reshape(out, out.shape[1:]) if single else out


def lstm_step(z: Tensor, prev: LstmState, params) -> LstmState:
    """One LSTM step on ``z`` of shape ``(N, F)`` or ``(F,)``."""
    xh = ad.concat([z, prev.h], axis=-1)
    i = ad.sigmoid(linear(xh, params["lstm.W_i"], params["lstm.b_i"]))
    f = ad.sigmoid(linear(xh, params["lstm.W_f"], params["lstm.b_f"]))
    o = ad.sigmoid(linear(xh, params["lstm.W_o"], params["lstm.b_o"]))
    g = ad.tanh(linear(xh, params["lstm.W_g"], params["lstm.b_g"]))
    c = f * prev.c + i * g
    h = o * ad.tanh(c)
    return LstmState(h, c)


def zero_state(batch: int | None, hidden: int, dtype) -> LstmState:
    shape = (hidden,) if batch is None else (batch, hidden)
    return LstmState(Tensor(np.zeros(shape), dtype=dtype), Tensor(np.zeros(shape), dtype=dtype))
