"""Losses, SGD with momentum, and the three-stage progressive schedule.

Stage 1 trains the CNN + LSTM from scratch, stage 2 fine-tunes it with
temporal attention switched on, stage 3 with both attention mechanisms.
Each stage starts from the previous stage's checkpoint; parameters of the
mechanism being switched on are freshly initialised and momentum is reset.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import Dataset
from .model import STAGE_GROUPS, forward, init_params, reinit_groups
from .preprocess import Chunk, apply_augment, build_net_input, chunk_starts, estimate_shifts, prepare_frames, \
    sample_augment
from .states import TaillightState

log = logging.getLogger(__name__)

NEW_GROUPS = {2: ("temporal",), 3: ("spatial",)}
METRIC_FIELDS = ("stage", "epoch", "split", "loss", "accuracy")


class StageOrderError(RuntimeError):
    """A stage was started without the previous stage's checkpoint."""


class DivergenceError(FloatingPointError):
    pass


# ---------------------------------------------------------------- losses


def chunk_loss(logits: Tensor, label) -> Tensor:
    """Cross-entropy of ``softmax(logits)`` against ``label``.

    ``logits`` is ``(K,)`` with an int label, or ``(B, K)`` with a label array
    (then one loss per chunk is returned).
    """
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    batched = logits.ndim == 2
    lg = logits if batched else ad.reshape(logits, (1, -1))
    onehot = np.zeros(lg.shape, dtype=lg.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    per = -ad.sum_(ad.log_softmax(lg, axis=-1) * onehot, axis=-1)
    return per if batched else ad.reshape(per, ())


def topk_count(ratio: float, batch: int) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"bootstrap ratio must lie in (0, 1], got {ratio}")
    # round first so 0.3 * 10 counts as 3, not 4
    return max(1, math.ceil(round(ratio * batch, 9)))


def bootstrapped_batch_loss(per_chunk, ratio: float) -> Tensor:
    """Mean of the ``ceil(ratio * B)`` largest per-chunk losses."""
    if not isinstance(per_chunk, Tensor) and len(per_chunk) == 0:
        raise ValueError("bootstrapped_batch_loss needs a non-empty batch")
    if isinstance(per_chunk, Tensor):
        losses = per_chunk
    elif isinstance(per_chunk[0], Tensor):
        losses = ad.stack(list(per_chunk))
    else:
        losses = Tensor(np.asarray(per_chunk, dtype=np.float64))
    if losses.ndim != 1 or losses.shape[0] == 0:
        raise ValueError("bootstrapped_batch_loss needs a non-empty 1-D batch of losses")
    k = topk_count(ratio, losses.shape[0])
    # hardest first; stable so equal losses keep batch order
    order = np.argsort(-losses.data, kind="stable")[:k]
    return ad.mean(losses[order])


def label_bootstrap_loss(logits: Tensor, labels, ratio: float, hard: bool) -> Tensor:
    """Per-chunk cross-entropy against targets blended with the model's own prediction.

    Soft mode blends with the predicted distribution, hard mode with its
    one-hot argmax; ``ratio`` is the weight given to the prediction.
    """
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    if hard:
        own = np.zeros_like(onehot)
        own[np.arange(len(labels)), logp.data.argmax(axis=-1)] = 1
        target = Tensor((1 - ratio) * onehot + ratio * own, dtype=logits.dtype)
    else:
        # gradient flows through the prediction term too
        target = ad.softmax(logits, axis=-1) * ratio + onehot * (1 - ratio)
    return -ad.sum_(logp * target, axis=-1)


def batch_objective(logits_T: Tensor, labels, mode: str, ratio: float) -> tuple[Tensor, np.ndarray]:
    """Training objective and the plain per-chunk cross-entropies (for logging)."""
    per = chunk_loss(logits_T, labels)
    if mode == "topk":
        return bootstrapped_batch_loss(per, ratio), per.data
    return ad.mean(label_bootstrap_loss(logits_T, labels, ratio, hard=mode == "hard")), per.data


# ---------------------------------------------------------------- optimiser


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """``v <- momentum * v + g; p <- p - lr * v``; returns new params and buffers."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        if g is not None:
            v = momentum * v + g
        v = v.astype(p.dtype, copy=False)
        new_v[name] = v
        new_p[name] = Tensor(p.data - p.dtype.type(lr) * v, requires_grad=True, dtype=p.dtype)
    return new_p, new_v


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    scale = max_norm / total
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}


# ---------------------------------------------------------------- data


@dataclass
class PreparedSequence:
    frames: np.ndarray  # (N, C, S, S) network layout
    shifts: np.ndarray  # (N - 1, 2)
    label: TaillightState
    source_id: str

    def chunk(self, start: int, window: int) -> Chunk:
        raw = self.frames[start:start + window]
        sh = self.shifts[start:start + window - 1]
        return Chunk(raw, build_net_input(raw, sh), self.label, (self.source_id, start), sh)


def prepare_split(dataset: Dataset, split: str, cfg: RunConfig) -> list[PreparedSequence]:
    """Load, resize and align every sequence of a split once."""
    t = cfg.train
    dtype = ad.dtype_for(t.precision)
    out = []
    for rec in dataset.split(split):
        seq = dataset.sequence(rec)
        frames = prepare_frames(seq, cfg.model.backbone.input_side, dtype)
        out.append(PreparedSequence(frames, estimate_shifts(frames, t.align_mode, t.max_shift), seq.label, rec.path))
    return out


def chunk_index(seqs: Sequence[PreparedSequence], window: int, stride: int) -> list[tuple[int, int]]:
    return [(i, s) for i, seq in enumerate(seqs) for s in chunk_starts(len(seq.frames), window, stride)]


def batch_inputs(seqs, index, window: int, rng: np.random.Generator | None):
    """Stack network inputs for ``index``; augments each chunk when ``rng`` is given."""
    xs, ys = [], []
    for i, s in index:
        chunk = seqs[i].chunk(s, window)
        label = chunk.label
        if rng is not None:
            chunk, label = apply_augment(chunk, label, sample_augment(rng))
        xs.append(chunk.net_input)
        ys.append(label.index)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def infer_logits(params, cfg: RunConfig, stage: int, seqs, index, batch_size: int = 64) -> np.ndarray:
    """Last-step logits for every chunk in ``index`` (no tape, no augmentation)."""
    out = []
    for b in range(0, len(index), batch_size):
        x, _ = batch_inputs(seqs, index[b:b + batch_size], cfg.train.window, None)
        out.append(forward(params, cfg.model, x, stage).logits.data[:, -1])
    return np.concatenate(out) if out else np.zeros((0, cfg.model.num_classes))


# ---------------------------------------------------------------- training


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)
    path: Path | None = None

    def add(self, stage: int, epoch: int, split: str, loss: float, accuracy: float) -> None:
        row = {"stage": stage, "epoch": epoch, "split": split, "loss": loss, "accuracy": accuracy}
        self.rows.append(row)
        if self.path is not None:
            new = not self.path.exists()
            with open(self.path, "a", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                if new:
                    w.writerow(METRIC_FIELDS)
                w.writerow((stage, epoch, split, f"{loss:.6f}", f"{accuracy:.6f}"))

    def losses(self, stage: int, split: str = "train") -> list[float]:
        return [r["loss"] for r in self.rows if r["stage"] == stage and r["split"] == split]


def train_epoch(params, velocity, cfg: RunConfig, stage: int, seqs, rng: np.random.Generator):
    t = cfg.train
    index = chunk_index(seqs, t.window, t.chunk_stride)
    order = rng.permutation(len(index))
    index = [index[i] for i in order]
    names = [n for n in params if n.split(".", 1)[0] in STAGE_GROUPS[stage]]
    total_loss, correct, seen = 0.0, 0, 0
    for b in range(0, len(index), t.batch_size):
        x, y = batch_inputs(seqs, index[b:b + t.batch_size], t.window, rng if t.augment else None)
        with ad.Tape():
            logits = forward(params, cfg.model, x, stage).logits[:, -1]
            objective, per = batch_objective(logits, y, t.bootstrap_mode, t.bootstrap_ratio)
            if not np.isfinite(objective.data):
                raise DivergenceError(f"non-finite training loss at stage {stage}")
            grads = ad.backward(objective, {n: params[n] for n in names})
        if t.grad_clip > 0:
            grads = clip_grad_norm(grads, t.grad_clip)
        params, velocity = sgd_step(params, grads, t.lr, t.momentum, velocity)
        total_loss += float(per.sum())
        correct += int((np.argmax(logits.data, axis=-1) == y).sum())
        seen += len(y)
    return params, velocity, total_loss / max(seen, 1), correct / max(seen, 1)


def evaluate_chunks(params, cfg: RunConfig, stage: int, seqs, stride: int | None = None) -> tuple[float, float]:
    """Mean cross-entropy and chunk-level accuracy over all chunks of ``seqs``."""
    index = chunk_index(seqs, cfg.train.window, stride or cfg.train.eval_stride)
    if not index:
        return float("nan"), float("nan")
    logits = infer_logits(params, cfg, stage, seqs, index)
    labels = np.asarray([seqs[i].label.index for i, _ in index])
    losses = chunk_loss(Tensor(logits), labels).data
    return float(losses.mean()), float((np.argmax(logits, axis=-1) == labels).mean())


def stage_start(cfg: RunConfig, stage: int, prev: Checkpoint | None) -> tuple[dict[str, Tensor], np.random.Generator]:
    """Initial parameters for ``stage``: fresh for stage 1, else the previous checkpoint
    with the newly enabled mechanism re-initialised."""
    dtype = ad.dtype_for(cfg.train.precision)
    seed = cfg.train.seed
    if stage == 1:
        params = init_params(cfg.model, seed, dtype)
    else:
        if prev is None:
            raise StageOrderError(f"stage {stage} needs the stage {stage - 1} checkpoint")
        if prev.stage != stage - 1:
            raise StageOrderError(f"stage {stage} must start from a stage {stage - 1} checkpoint, got stage {prev.stage}")
        params = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in prev.params.items()}
        params = reinit_groups(params, NEW_GROUPS[stage], cfg.model, np.random.default_rng([seed, 1000 + stage]))
    return params, np.random.default_rng([seed, stage])


def train_stage(cfg: RunConfig, stage: int, train_seqs, test_seqs=None, prev: Checkpoint | None = None,
                metrics: MetricsLog | None = None, epochs: int | None = None,
                on_epoch: Callable | None = None) -> Checkpoint:
    params, rng = stage_start(cfg, stage, prev)
    velocity: dict[str, np.ndarray] = {}
    metrics = metrics if metrics is not None else MetricsLog()
    n_epochs = cfg.train.epochs[stage - 1] if epochs is None else epochs
    for epoch in range(n_epochs):
        t0 = time.time()
        params, velocity, loss, acc = train_epoch(params, velocity, cfg, stage, train_seqs, rng)
        metrics.add(stage, epoch, "train", loss, acc)
        msg = f"stage {stage} epoch {epoch}: train loss {loss:.4f} acc {acc:.3f}"
        if test_seqs and cfg.train.eval_each_epoch:
            tl, ta = evaluate_chunks(params, cfg, stage, test_seqs)
            metrics.add(stage, epoch, "test", tl, ta)
            msg += f" | test loss {tl:.4f} acc {ta:.3f}"
        log.info("%s (%.1fs)", msg, time.time() - t0)
        if on_epoch is not None:
            on_epoch(stage, epoch, params)
    return Checkpoint(cfg, stage, {k: p.data for k, p in params.items()}, velocity, rng.bit_generator.state)


def stage_path(out_dir, stage: int) -> Path:
    return Path(out_dir) / f"stage{stage}.ckpt"


def train_progressive(cfg: RunConfig, dataset: Dataset, out_dir, stages: Sequence[int] = (1, 2, 3),
                      prev: Checkpoint | None = None, train_seqs=None, test_seqs=None) -> tuple[Checkpoint, MetricsLog]:
    """Run ``stages`` in order, chaining checkpoints through ``out_dir``.

    A run starting at stage 2 or 3 needs ``prev`` or the previous stage's
    checkpoint file in ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = list(stages)
    if stages != sorted(stages) or any(b - a != 1 for a, b in zip(stages, stages[1:])):
        raise StageOrderError(f"stages must run consecutively in order, got {stages}")
    if stages[0] > 1 and prev is None:
        path = stage_path(out_dir, stages[0] - 1)
        if not path.exists():
            raise StageOrderError(f"stage {stages[0]} needs {path}")
        prev = load_checkpoint(path)
    if train_seqs is None:
        train_seqs = prepare_split(dataset, "train", cfg)
    if test_seqs is None:
        test_seqs = prepare_split(dataset, "test", cfg) if dataset.split("test") else []
    metrics = MetricsLog(path=out_dir / "metrics.csv")
    ckpt = prev
    for stage in stages:
        ckpt = train_stage(cfg, stage, train_seqs, test_seqs, prev=ckpt, metrics=metrics)
        save_checkpoint(stage_path(out_dir, stage), ckpt)
    return ckpt, metrics
