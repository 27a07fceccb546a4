"""On-disk dataset layout.

::

    root/manifest.csv                                 path,frames,label,split
    root/<split>/<CLASS>/seq_####/frame_####.ppm      binary P6, maxval 255
"""

from __future__ import annotations

import csv
import io
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import DataConfig
from .imageio import read_pnm, write_pnm
from .preprocess import FrameSequence
from .states import CLASS_CODES, TaillightState
from .synth import SceneParams, render_sequence, vary_scene

SPLITS = ("train", "test")
MANIFEST = "manifest.csv"
FIELDS = ("path", "frames", "label", "split")


class DatasetError(ValueError):
    pass


class MissingFrameError(DatasetError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    path: str  # sequence directory relative to the root
    frames: int
    label: str
    split: str

    @property
    def state(self) -> TaillightState:
        return TaillightState.from_code(self.label)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def class_counts(self, split: str | None = None) -> dict[str, int]:
        counts = dict.fromkeys(CLASS_CODES, 0)
        for r in self.records:
            if split is None or r.split == split:
                counts[r.label] += 1
        return counts

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(FIELDS)
        for r in self.records:
            writer.writerow((r.path, r.frames, r.label, r.split))
        return buf.getvalue()


def frame_name(i: int) -> str:
    return f"frame_{i:04d}.ppm"


def scene_from_config(cfg: DataConfig) -> SceneParams:
    return SceneParams(image_side=cfg.image_side, blink_period=cfg.blink_period, duty_cycle=cfg.duty_cycle,
                       noise_sigma=cfg.noise_sigma, jitter=cfg.jitter, distractor_prob=cfg.distractor_prob)


def _write_sequence(root: Path, rel: str, seq: FrameSequence) -> None:
    final = root / rel
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp_", dir=final.parent))
    try:
        for i, frame in enumerate(seq.frames):
            write_pnm(tmp / frame_name(i), frame)
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def generate_dataset(root, class_counts: Mapping[str, Mapping[str, int]], params: SceneParams, seed: int,
                     length: int = 48, window_length: int = 16, vary: bool = True) -> DatasetManifest:
    """Render ``class_counts[split][code]`` sequences per split and class under ``root``.

    Every sequence draws from its own seed derived from ``(seed, split, class, index)``,
    so any subset of the counts reproduces the same files.
    """
    root = Path(root)
    for split, counts in class_counts.items():
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
        for code, n in counts.items():
            TaillightState.from_code(code)
            if n < 0:
                raise DatasetError(f"negative count {n} for {split}/{code}")
    params.validate(window_length)
    manifest = DatasetManifest()
    total = sum(n for counts in class_counts.values() for n in counts.values())
    if total == 0:
        return manifest
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset root {root}: {exc}") from exc
    for s_idx, split in enumerate(SPLITS):
        counts = class_counts.get(split, {})
        for c_idx, code in enumerate(CLASS_CODES):
            for i in range(counts.get(code, 0)):
                ss = np.random.SeedSequence([seed, s_idx, c_idx, i])
                scene_seed, render_seed = ss.spawn(2)
                scene = vary_scene(params, np.random.default_rng(scene_seed)) if vary else params
                rel = f"{split}/{code}/seq_{i:04d}"
                seq = render_sequence(TaillightState.from_code(code), scene, length, render_seed,
                                      window_length=window_length, source_id=rel)
                try:
                    _write_sequence(root, rel, seq)
                except OSError as exc:
                    raise DatasetError(f"cannot write sequence {root / rel}: {exc}") from exc
                manifest.records.append(ManifestRecord(rel, length, code, split))
    (root / MANIFEST).write_text(manifest.to_csv(), encoding="utf-8")
    return manifest


def class_counts_from_config(cfg: DataConfig) -> dict[str, dict[str, int]]:
    return {"train": dict.fromkeys(CLASS_CODES, cfg.train_per_class),
            "test": dict.fromkeys(CLASS_CODES, cfg.test_per_class)}


class Dataset:
    """Manifest plus lazy frame access."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest

    def split(self, name: str) -> list[ManifestRecord]:
        return self.manifest.split(name)

    def frames(self, record: ManifestRecord) -> np.ndarray:
        seq_dir = self.root / record.path
        if not seq_dir.is_dir():
            raise MissingFrameError(f"missing sequence directory: {seq_dir}")
        present = sorted(p.name for p in seq_dir.glob("frame_*.ppm"))
        if len(present) != record.frames:
            expected = {frame_name(i) for i in range(record.frames)}
            missing = sorted(expected - set(present))
            if missing:
                raise MissingFrameError(f"missing frame file: {seq_dir / missing[0]}")
            raise DatasetError(f"{seq_dir}: manifest says {record.frames} frames, found {len(present)}")
        images = []
        for i in range(record.frames):
            path = seq_dir / frame_name(i)
            if not path.exists():
                raise MissingFrameError(f"missing frame file: {path}")
            img = read_pnm(path)
            if img.ndim != 3:
                raise DatasetError(f"{path}: expected an RGB (P6) frame")
            if images and img.shape != images[0].shape:
                raise DatasetError(f"{path}: size {img.shape[:2]} differs from first frame {images[0].shape[:2]}")
            images.append(img)
        return np.stack(images)

    def sequence(self, record: ManifestRecord) -> FrameSequence:
        return FrameSequence(self.frames(record), record.path, record.state)

    def sequences(self, split: str) -> list[FrameSequence]:
        return [self.sequence(r) for r in self.split(split)]


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise MissingFrameError(f"missing manifest: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise DatasetError(f"{path}: header {reader.fieldnames} != {list(FIELDS)}")
        for lineno, row in enumerate(reader, 2):
            TaillightState.from_code(row["label"])
            if row["split"] not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split {row['split']!r}")
            try:
                frames = int(row["frames"])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad frame count {row['frames']!r}") from None
            records.append(ManifestRecord(row["path"], frames, row["label"], row["split"]))
    return DatasetManifest(records)


def read_dataset(root) -> Dataset:
    return Dataset(root, read_manifest(root))

