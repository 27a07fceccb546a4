"""Central finite-difference checks for every layer type and the composed model.

Each check builds a scalar loss from a set of named float64 tensors, takes
the analytic gradient with :func:`autodiff.backward`, then perturbs randomly
chosen coordinates by ``+-step`` and compares.  The relative error of one
probe is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the
floor keeps coordinates whose true gradient is ~0 from dividing noise by noise.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .layers import LstmState, backbone_forward, linear, lstm_step
from .model import forward, init_params
from .spatial import apply_spatial, init_spatial, spatial_scores, spatial_weights
from .temporal import init_head, init_temporal, mix_hidden, predict, state_summary, temporal_weights
from .training import bootstrapped_batch_loss, chunk_loss, label_bootstrap_loss

log = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    probes: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def rel_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(name: str, loss_fn: Callable[[dict], Tensor], tensors: dict[str, Tensor], probes: int,
                    rng: np.random.Generator, step: float = STEP) -> CheckResult:
    """Compare analytic and central-difference gradients on ``probes`` random coordinates.

    ``loss_fn(tensors)`` must rebuild the loss from the tensor values, which
    are perturbed in place during probing.
    """
    t0 = time.time()
    with ad.Tape():
        loss = loss_fn(tensors)
        grads = ad.backward(loss, tensors)
    names = sorted(tensors)
    sizes = np.array([tensors[n].data.size for n in names], dtype=float)
    worst = 0.0
    for _ in range(probes):
        # spread probes over tensors in proportion to sqrt(size) so small biases get visited
        n = names[rng.choice(len(names), p=np.sqrt(sizes) / np.sqrt(sizes).sum())]
        flat = tensors[n].data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn(tensors).data)
        flat[i] = orig - step
        down = float(loss_fn(tensors).data)
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        err = rel_error(float(grads[n].reshape(-1)[i]), numeric)
        worst = max(worst, err)
    return CheckResult(name, probes, worst, time.time() - t0)


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True, dtype=F64)


def _weights(rng, out_shape) -> np.ndarray:
    # fixed random projection turns any output into a scalar loss
    return rng.normal(size=out_shape)


def check_conv(rng, probes: int) -> list[CheckResult]:
    results = []
    for stride, pad in ((1, 0), (2, 1), (1, 2)):
        t = {"x": _param(rng, 2, 3, 7, 7), "w": _param(rng, 4, 3, 3, 3, scale=0.5)}
        r = _weights(rng, ad.conv2d(t["x"], t["w"], stride=stride, pad=pad).shape)
        results.append(check_gradients(f"conv2d s{stride} p{pad}", lambda p: ad.sum_(
            ad.conv2d(p["x"], p["w"], stride=stride, pad=pad) * r), t, probes, rng))
    return results


def check_fc(rng, probes: int) -> CheckResult:
    t = {"x": _param(rng, 5, 6), "w": _param(rng, 4, 6), "b": _param(rng, 4)}
    r = _weights(rng, (5, 4))
    return check_gradients("fc", lambda p: ad.sum_(ad.tanh(linear(p["x"], p["w"], p["b"])) * r), t, probes, rng)


def check_backbone(cfg: RunConfig, rng, probes: int) -> CheckResult:
    params = {k: v for k, v in init_params(cfg.model, 7, F64).items() if k.startswith("backbone.")}
    bb = cfg.model.backbone
    params["x"] = Tensor(rng.uniform(0, 1, size=(2, cfg.model.in_channels, bb.input_side, bb.input_side)),
                         requires_grad=True, dtype=F64)
    r = _weights(rng, (2, bb.feature_dim))
    return check_gradients("backbone (conv + residual + fc)",
                           lambda p: ad.sum_(backbone_forward(p["x"], p, bb) * r), params, probes, rng)


def check_lstm(rng, probes: int) -> CheckResult:
    f, h = 5, 4
    t = {"z": _param(rng, 3, f), "h0": _param(rng, 3, h, scale=0.5), "c0": _param(rng, 3, h)}
    for gate in "ifog":
        t[f"lstm.W_{gate}"] = _param(rng, h, f + h, scale=0.5)
        t[f"lstm.b_{gate}"] = _param(rng, h, scale=0.5)
    rh, rc = _weights(rng, (3, h)), _weights(rng, (3, h))

    def loss(p):
        s1 = lstm_step(p["z"], LstmState(p["h0"], p["c0"]), p)
        s2 = lstm_step(p["z"] * 0.5, s1, p)
        return ad.sum_(s2.h * rh) + ad.sum_(s2.c * rc)

    return check_gradients("lstm step (two unrolled)", loss, t, probes, rng)


def check_spatial(rng, probes: int) -> CheckResult:
    d, hidden, k, g = 4, 5, 6, 3
    t = dict(init_spatial(d, hidden, k, rng, F64))
    for n in ("spatial.b_a_zh", "spatial.b_a"):
        t[n] = _param(rng, *t[n].shape, scale=0.3)
    t["z"] = _param(rng, 2, d, g, g)
    t["h"] = _param(rng, 2, hidden, scale=0.5)
    r = _weights(rng, (2, d, g, g))

    def loss(p):
        alpha = spatial_weights(spatial_scores(p["z"], p["h"], p))
        return ad.sum_(apply_spatial(p["z"], alpha) * r)

    return check_gradients("spatial attention", loss, t, probes, rng)


def check_temporal(rng, probes: int) -> CheckResult:
    hidden, steps, classes = 5, 4, 8
    t = dict(init_temporal(hidden, rng, F64))
    t.update(init_head(hidden, classes, rng, F64))
    for n in ("temporal.b_d_hc", "head.b_p_hc", "head.b_p"):
        t[n] = _param(rng, *t[n].shape, scale=0.3)
    t["H"] = Tensor(np.tanh(rng.normal(size=(2, steps, hidden))), requires_grad=True, dtype=F64)
    t["C"] = _param(rng, 2, steps, hidden)
    r = _weights(rng, (2, steps, classes))

    def loss(p):
        beta = temporal_weights(state_summary(p["H"], p["C"], p), p["H"])
        return ad.sum_(predict(mix_hidden(beta, p["H"]), p["C"], p) * r)

    return check_gradients("temporal attention + head", loss, t, probes, rng)


def check_losses(rng, probes: int) -> list[CheckResult]:
    labels = rng.integers(0, 8, size=10)
    t = {"logits": _param(rng, 10, 8, scale=2.0)}
    return [
        check_gradients("cross-entropy", lambda p: ad.mean(chunk_loss(p["logits"], labels)), t, probes, rng),
        check_gradients("top-k bootstrapped loss",
                        lambda p: bootstrapped_batch_loss(chunk_loss(p["logits"], labels), 0.3), t, probes, rng),
        check_gradients("soft label bootstrap",
                        lambda p: ad.mean(label_bootstrap_loss(p["logits"], labels, 0.3, hard=False)), t, probes, rng),
    ]


def check_model(cfg: RunConfig, rng, probes: int, steps: int = 4) -> CheckResult:
    params = init_params(cfg.model, 11, F64)
    bb = cfg.model.backbone
    x = rng.uniform(0, 1, size=(2, steps, cfg.model.in_channels, bb.input_side, bb.input_side))
    labels = np.array([1, 6])

    def loss(p):
        logits = forward(p, cfg.model, x, stage=3).logits[:, -1]
        return ad.mean(chunk_loss(logits, labels))

    return check_gradients("full model (stage 3)", loss, params, probes, rng)


def run_suite(cfg: RunConfig, probes: int = 24, seed: int = 0) -> list[CheckResult]:
    """All checks at test precision; probes are per check."""
    rng = np.random.default_rng(seed)
    results = check_conv(rng, probes)
    results.append(check_fc(rng, probes))
    results.append(check_backbone(cfg, rng, probes))
    results.append(check_lstm(rng, probes))
    results.append(check_spatial(rng, probes))
    results.append(check_temporal(rng, probes))
    results += check_losses(rng, probes)
    results.append(check_model(cfg, rng, probes))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{status:4}  {r.name:34} probes={r.probes:3d}  max_rel_err={r.max_rel_err:.2e}  ({r.seconds:.1f}s)")
    return "\n".join(lines)
