"""Accuracy reports, attention export and the comparison harnesses.

Chunk predictions are aggregated per video by majority vote (ties go to the
lowest class index).  Reports carry both the video-level and the raw
chunk-level numbers.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .checkpoint import Checkpoint
from .config import RunConfig
from .dataset import Dataset
from .imageio import write_pnm
from .model import forward
from .preprocess import Chunk
from .states import CLASS_CODES, NUM_CLASSES
from .temporal import predicted_class
from .training import chunk_index, infer_logits, prepare_split, train_progressive

log = logging.getLogger(__name__)

ABSENT = "absent"
STAGE_NAMES = {1: "none", 2: "T", 3: "S+T"}


def confusion_matrix(labels, preds, num_classes: int = NUM_CLASSES) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def majority_vote(preds, num_classes: int = NUM_CLASSES) -> int:
    counts = np.bincount(np.asarray(preds, dtype=np.int64), minlength=num_classes)
    return int(np.argmax(counts))


@dataclass
class EvalReport:
    confusion: np.ndarray  # video level, rows = true class
    chunk_confusion: np.ndarray

    @staticmethod
    def _per_class(cm: np.ndarray) -> np.ndarray:
        counts = cm.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, 100.0 * np.diag(cm) / counts, np.nan)

    @staticmethod
    def _total(cm: np.ndarray) -> float:
        n = cm.sum()
        return 100.0 * np.trace(cm) / n if n else float("nan")

    @property
    def per_class(self) -> np.ndarray:
        """Video-level accuracy per class in percent; NaN where the class is absent."""
        return self._per_class(self.confusion)

    @property
    def total(self) -> float:
        return self._total(self.confusion)

    @property
    def chunk_per_class(self) -> np.ndarray:
        return self._per_class(self.chunk_confusion)

    @property
    def chunk_accuracy(self) -> float:
        return self._total(self.chunk_confusion)

    def rows(self) -> list[list[str]]:
        def fmt(values, total):
            return [ABSENT if np.isnan(v) else f"{v:.2f}" for v in values] + [f"{total:.2f}"]

        return [["video"] + fmt(self.per_class, self.total),
                ["chunk"] + fmt(self.chunk_per_class, self.chunk_accuracy)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("level",) + CLASS_CODES + ("Total",))
            w.writerows(self.rows())

    def format(self) -> str:
        header = ["level"] + list(CLASS_CODES) + ["Total"]
        lines = ["  ".join(f"{h:>7}" for h in header)]
        lines += ["  ".join(f"{c:>7}" for c in row) for row in self.rows()]
        return "\n".join(lines)


def build_report(chunk_labels, chunk_preds, video_ids) -> EvalReport:
    """Aggregate chunk predictions into a report; ``video_ids`` groups chunks into videos."""
    chunk_labels = np.asarray(chunk_labels, dtype=np.int64)
    chunk_preds = np.asarray(chunk_preds, dtype=np.int64)
    video_ids = list(video_ids)
    groups: dict = {}
    for i, vid in enumerate(video_ids):
        groups.setdefault(vid, []).append(i)
    v_labels, v_preds = [], []
    for idx in groups.values():
        labels = set(chunk_labels[idx].tolist())
        if len(labels) != 1:
            raise ValueError(f"chunks of one video carry different labels: {sorted(labels)}")
        v_labels.append(labels.pop())
        v_preds.append(majority_vote(chunk_preds[idx]))
    return EvalReport(confusion_matrix(v_labels, v_preds), confusion_matrix(chunk_labels, chunk_preds))


def evaluate_prepared(params, cfg: RunConfig, stage: int, seqs, stride: int | None = None) -> EvalReport:
    index = chunk_index(seqs, cfg.train.window, stride or cfg.train.eval_stride)
    if not index:
        raise ValueError("no chunks to evaluate")
    logits = infer_logits(params, cfg, stage, seqs, index)
    labels = [seqs[i].label.index for i, _ in index]
    return build_report(labels, predicted_class(logits), [seqs[i].source_id for i, _ in index])


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, dtype=v.dtype) for k, v in params.items()}


def evaluate(ckpt: Checkpoint, dataset: Dataset, split: str = "test", stride: int | None = None,
             seqs=None) -> EvalReport:
    """Evaluate ``ckpt`` on every chunk of ``split``."""
    if seqs is None:
        if not dataset.split(split):
            raise ValueError(f"split {split!r} is empty")
        seqs = prepare_split(dataset, split, ckpt.config)
    return evaluate_prepared(as_tensors(ckpt.params), ckpt.config, ckpt.stage, seqs, stride)


# ---------------------------------------------------------------- attention traces


@dataclass
class AttentionTrace:
    alpha: np.ndarray  # (T, G, G)
    beta: np.ndarray  # (T, T)
    logits: np.ndarray  # (T, classes)

    @property
    def predicted(self) -> int:
        return int(predicted_class(self.logits[-1]))


def trace_chunk(ckpt: Checkpoint, chunk: Chunk) -> AttentionTrace:
    res = forward(as_tensors(ckpt.params), ckpt.config.model, chunk.net_input[None], ckpt.stage)
    return AttentionTrace(res.alpha[0], res.beta[0], res.logits.data[0])


def alpha_image(alpha: np.ndarray, side: int) -> np.ndarray:
    """Min-max normalise one map to 0..255 and upscale by nearest neighbour."""
    lo, hi = float(alpha.min()), float(alpha.max())
    if hi - lo <= 0:
        img = np.full(alpha.shape, 128, dtype=np.uint8)
    else:
        img = np.round(255 * (alpha - lo) / (hi - lo)).astype(np.uint8)
    rep = max(1, side // alpha.shape[0])
    return np.repeat(np.repeat(img, rep, axis=0), rep, axis=1)


def export_attention(ckpt: Checkpoint, chunk: Chunk, out_dir) -> AttentionTrace:
    """Write ``alpha_##.pgm``, ``alpha.csv``, ``alpha_stats.csv``, ``beta.csv`` and ``logits.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = trace_chunk(ckpt, chunk)
    side = ckpt.config.model.backbone.input_side
    g = trace.alpha.shape[-1]
    with open(out / "alpha.csv", "w", newline="") as fa, open(out / "alpha_stats.csv", "w", newline="") as fs:
        wa, ws = csv.writer(fa, lineterminator="\n"), csv.writer(fs, lineterminator="\n")
        wa.writerow(("step", "row", "col", "weight"))
        ws.writerow(("step", "max_weight", "argmax_row", "argmax_col"))
        for t, a in enumerate(trace.alpha):
            write_pnm(out / f"alpha_{t:02d}.pgm", alpha_image(a, side))
            for i in range(g):
                for j in range(g):
                    wa.writerow((t, i, j, repr(float(a[i, j]))))
            r, c = np.unravel_index(int(np.argmax(a)), a.shape)
            ws.writerow((t, repr(float(a.max())), r, c))
    np.savetxt(out / "beta.csv", trace.beta, delimiter=",", fmt="%.9g")
    with open(out / "logits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step",) + CLASS_CODES)
        for t, row in enumerate(trace.logits):
            w.writerow([t] + [repr(float(v)) for v in row])
    return trace


# ---------------------------------------------------------------- comparisons


def write_stage_comparison(path, results: dict[int, Sequence[float]]) -> None:
    """One row per stage: the mechanisms switched on and the chunk accuracy per seed."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stage", "attention", "median_chunk_accuracy", "per_seed"))
        for stage in sorted(results):
            accs = list(results[stage])
            w.writerow((stage, STAGE_NAMES[stage], f"{np.median(accs):.4f}",
                        " ".join(f"{a:.4f}" for a in accs)))


def layer_ablation(cfg: RunConfig, dataset: Dataset, out_dir, split_ls: Sequence[int] | None = None) -> list[dict]:
    """Train and evaluate the full schedule once per split point; writes ``layer_ablation.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.model.backbone.num_stages
    rows = []
    for split_l in split_ls or range(1, n + 1):
        try:
            run_cfg = cfg.replace(split_l=split_l)
        except ValueError as exc:
            log.warning("skipping split_l=%d: %s", split_l, exc)
            continue
        test = prepare_split(dataset, "test", run_cfg)
        ckpt, _ = train_progressive(run_cfg, dataset, out / f"split{split_l}", test_seqs=test)
        rep = evaluate(ckpt, dataset, seqs=test)
        rows.append({"split_l": split_l, "grid": run_cfg.model.backbone.grid_side,
                     "chunk_accuracy": rep.chunk_accuracy, "video_accuracy": rep.total})
    with open(out / "layer_ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("split_l", "grid", "chunk_accuracy", "video_accuracy"),
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "chunk_accuracy": f"{r['chunk_accuracy']:.2f}", "video_accuracy": f"{r['video_accuracy']:.2f}"})
    return rows
