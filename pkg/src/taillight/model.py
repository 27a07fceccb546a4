"""The full CNN-LSTM pipeline with optional spatial and temporal attention.

``stage`` selects which mechanisms are live:

* 1 -- plain CNN + LSTM (uniform spatial weights, identity temporal mixing)
* 2 -- adds temporal attention
* 3 -- adds spatial attention
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .layers import (backbone_forward, backbone_head, backbone_tail, init_backbone, init_lstm,
                     lstm_step, zero_state)
from .spatial import apply_spatial, init_spatial, scalar_map, scores_from_map, spatial_weights
from .temporal import init_head, init_temporal, mix_hidden, predict, state_summary, temporal_weights

GROUPS = ("backbone", "lstm", "spatial", "temporal", "head")
STAGE_GROUPS = {
    1: ("backbone", "lstm", "head"),
    2: ("backbone", "lstm", "temporal", "head"),
    3: GROUPS,
}


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def init_group(group: str, cfg: ModelConfig, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    bb = cfg.backbone
    if group == "backbone":
        return init_backbone(bb, cfg.in_channels, rng, dtype)
    if group == "lstm":
        return init_lstm(bb.feature_dim, cfg.hidden_size, rng, dtype)
    if group == "spatial":
        return init_spatial(bb.split_channels, cfg.hidden_size, cfg.attn_hidden, rng, dtype)
    if group == "temporal":
        return init_temporal(cfg.hidden_size, rng, dtype)
    if group == "head":
        return init_head(cfg.hidden_size, cfg.num_classes, rng, dtype)
    raise KeyError(group)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    for i, group in enumerate(GROUPS):
        params.update(init_group(group, cfg, np.random.default_rng([seed, i]), dtype))
    return params


def reinit_groups(params, groups, cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Copy of ``params`` with ``groups`` freshly initialised."""
    dtype = next(iter(params.values())).dtype
    out = dict(params)
    for group in groups:
        out.update(init_group(group, cfg, rng, dtype))
    return out


@dataclass
class ForwardResult:
    logits: Tensor  # (B, T, classes)
    hidden: Tensor  # (B, T, hidden)
    cells: Tensor
    alpha: np.ndarray  # (B, T, G, G)
    beta: np.ndarray  # (B, T, T)


def forward(params, cfg: ModelConfig, x, stage: int = 3) -> ForwardResult:
    """Run a batch of network-input sequences ``x`` of shape ``(B, T, C, S, S)``."""
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=params["head.b_p"].dtype)
    if x.ndim != 5:
        raise ad.ShapeError(f"forward expects (B, T, C, S, S), got {x.shape}")
    b, t_len = x.shape[:2]
    bb = cfg.backbone
    g = bb.grid_side
    dtype = x.dtype
    frames = ad.reshape(x, (b * t_len,) + x.shape[2:])
    state = zero_state(b, cfg.hidden_size, dtype)
    hs, cs = [], []

    if stage >= 3:
        zl = backbone_head(frames, params, bb)
        m = ad.reshape(scalar_map(zl, params), (b, t_len, g, g))
        zl = ad.reshape(zl, (b, t_len) + zl.shape[1:])
        alphas = []
        for t in range(t_len):
            alpha = spatial_weights(scores_from_map(m[:, t], state.h, params))
            zf = backbone_tail(apply_spatial(zl[:, t], alpha), params, bb)
            state = lstm_step(zf, state, params)
            hs.append(state.h)
            cs.append(state.c)
            alphas.append(alpha.data)
        alpha_arr = np.stack(alphas, axis=1)
    else:
        # uniform spatial weights: the split backbone reduces to the plain one
        feats = ad.reshape(backbone_forward(frames, params, bb), (b, t_len, -1))
        for t in range(t_len):
            state = lstm_step(feats[:, t], state, params)
            hs.append(state.h)
            cs.append(state.c)
        alpha_arr = np.full((b, t_len, g, g), 1.0 / (g * g), dtype=dtype)

    hidden = ad.stack(hs, axis=1)
    cells = ad.stack(cs, axis=1)
    if stage >= 2:
        beta = temporal_weights(state_summary(hidden, cells, params), hidden)
        mixed = mix_hidden(beta, hidden)
        beta_arr = beta.data
    else:
        mixed = hidden
        beta_arr = np.broadcast_to(np.eye(t_len, dtype=dtype), (b, t_len, t_len)).copy()
    logits = predict(mixed, cells, params)
    return ForwardResult(logits, hidden, cells, alpha_arr, beta_arr)


def last_logits(result: ForwardResult) -> Tensor:
    return result.logits[:, -1]
