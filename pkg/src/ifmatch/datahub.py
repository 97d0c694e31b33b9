"""Dataset generation, ingestion, and labeled/unlabeled split construction.

Synthetic data is class-conditional oriented gratings: each class owns a
fixed orientation/frequency signature; a difficulty knob in [0, 1] mixes
in phase jitter, amplitude jitter, and pixel noise.  At difficulty 0 the
classes are linearly separable.

Real data enters through the IDX byte format (big-endian magic, u32
dimensions, u8 pixels scaled to [0, 1]) or through a plain CSV with
header ``id,class,p0,p1,...`` and row-major pixels.

Splits are deterministic in (source, config, seed), disjoint by id, and
keep the true class of unlabeled samples for diagnostics only.
"""

import csv
import os
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import DataError
from .streams import named_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Source:
    """A pool of candidate training samples plus a held-out test set."""

    images: np.ndarray        # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray        # (N,) int
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int


@dataclass
class DatasetSplit:
    labeled_ids: np.ndarray
    labeled_images: np.ndarray
    labeled_classes: np.ndarray
    unlabeled_ids: np.ndarray
    unlabeled_images: np.ndarray
    unlabeled_true: np.ndarray   # diagnostics only; never reaches a loss
    test_ids: np.ndarray
    test_images: np.ndarray
    test_classes: np.ndarray
    num_classes: int

    def image_shape(self) -> Tuple[int, int, int]:
        base = self.labeled_images if self.labeled_images.size else self.test_images
        return tuple(base.shape[1:])

    def channel_means(self) -> np.ndarray:
        pools = [a for a in (self.labeled_images, self.unlabeled_images) if a.size]
        stacked = np.concatenate(pools, axis=0)
        return stacked.mean(axis=(0, 2, 3))


@dataclass(frozen=True)
class LongTailConfig:
    """Exponential class-count profile N_c = int(N1 * gamma^(-(c-1)/(C-1)))."""

    n1: int
    m1: int
    gamma: float
    num_classes: int

    def labeled_counts(self):
        return [self._count(self.n1, c) for c in range(1, self.num_classes + 1)]

    def unlabeled_counts(self):
        return [self._count(self.m1, c) for c in range(1, self.num_classes + 1)]

    def _count(self, head: int, c: int) -> int:
        if self.num_classes < 2:
            raise DataError("long-tail profile needs at least 2 classes")
        n = int(head * self.gamma ** (-(c - 1) / (self.num_classes - 1)))
        if n < 1:
            raise DataError(
                f"long-tail count for class {c} is {n} < 1 (head={head}, gamma={self.gamma})"
            )
        return n


def _grating(c_in: int, h: int, w: int, theta: float, freq: float, phase: float) -> np.ndarray:
    v, u = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.empty((c_in, h, w))
    for ch in range(c_in):
        img[ch] = 0.5 + 0.4 * np.sin(
            2.0 * np.pi * freq * (np.cos(theta) * u + np.sin(theta) * v)
            + phase
            + ch * 2.0 * np.pi / 3.0
        )
    return img


def gen_synthetic(
    classes: int,
    per_class: int,
    image_size: int,
    difficulty: float,
    seed: int,
    channels: int = 1,
    test_per_class: int = 100,
) -> Source:
    """Class-conditional textured patterns rendered to (C, H, W) tensors."""
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}")
    if image_size < 4:
        raise DataError(f"degenerate image size {image_size}")
    if not 0.0 <= difficulty <= 1.0:
        raise DataError(f"difficulty must be in [0, 1], got {difficulty}")
    rng = named_stream(seed, "split", step=0)
    h = w = image_size

    # Difficulty squeezes the classes together (smaller angular separation,
    # converging frequencies) and adds phase/amplitude jitter plus pixel
    # noise; at 0 the fixed per-class patterns are linearly separable.
    spread = 1.0 / (1.0 + 3.0 * difficulty)

    def render(n_per_class):
        images, labels = [], []
        for c in range(classes):
            theta = np.pi * (c * spread) / classes
            freq = 2.0 + (c % 3) * spread
            for _ in range(n_per_class):
                phase = float(rng.uniform(0.0, 2.0 * np.pi)) * difficulty
                amp = float(rng.uniform(1.0 - 0.6 * difficulty, 1.0))
                base = _grating(channels, h, w, theta, freq, phase)
                noise = rng.standard_normal((channels, h, w)) * (0.03 + 0.25 * difficulty)
                img = 0.5 + amp * (base - 0.5) + noise
                images.append(np.clip(img, 0.0, 1.0))
                labels.append(c)
        return np.stack(images), np.array(labels, dtype=np.int64)

    images, labels = render(per_class)
    test_images, test_labels = render(test_per_class)
    return Source(images, labels, test_images, test_labels, classes)


def _finish_split(source: Source, labeled_idx, unlabeled_idx, allow_overlap=False) -> DatasetSplit:
    n = source.images.shape[0]
    labeled_idx = np.array(sorted(labeled_idx), dtype=np.int64)
    unlabeled_idx = np.array(sorted(unlabeled_idx), dtype=np.int64)
    if not allow_overlap:
        overlap = np.intersect1d(labeled_idx, unlabeled_idx)
        if overlap.size:
            raise DataError(f"labeled/unlabeled overlap on ids {overlap[:5]}")
    test_ids = n + np.arange(source.test_images.shape[0], dtype=np.int64)
    return DatasetSplit(
        labeled_ids=labeled_idx,
        labeled_images=source.images[labeled_idx],
        labeled_classes=source.labels[labeled_idx],
        unlabeled_ids=unlabeled_idx,
        unlabeled_images=source.images[unlabeled_idx],
        unlabeled_true=source.labels[unlabeled_idx],
        test_ids=test_ids,
        test_images=source.test_images,
        test_classes=source.test_labels,
        num_classes=source.num_classes,
    )


def split_balanced(
    source: Source, num_labels: int, seed: int, include_labeled_in_unlabeled: bool = False
) -> DatasetSplit:
    """Exactly num_labels/C labeled per class; the remainder is unlabeled."""
    c = source.num_classes
    if num_labels % c != 0:
        raise DataError(f"num_labels {num_labels} not divisible by {c} classes")
    per = num_labels // c
    rng = named_stream(seed, "split", step=1)
    labeled, unlabeled = [], []
    for cls in range(c):
        ids = np.flatnonzero(source.labels == cls)
        if ids.size < per:
            raise DataError(f"class {cls} has {ids.size} samples, need {per} labeled")
        perm = rng.permutation(ids)
        labeled.extend(perm[:per].tolist())
        rest = perm[per:] if not include_labeled_in_unlabeled else perm
        unlabeled.extend(rest.tolist())
    return _finish_split(source, labeled, unlabeled, allow_overlap=include_labeled_in_unlabeled)


def split_longtail(source: Source, cfg: LongTailConfig, seed: int) -> DatasetSplit:
    """Labeled counts N_c and unlabeled counts M_c, truncated toward zero."""
    if cfg.num_classes != source.num_classes:
        raise DataError(
            f"profile has {cfg.num_classes} classes, source has {source.num_classes}"
        )
    rng = named_stream(seed, "split", step=2)
    n_counts = cfg.labeled_counts()
    m_counts = cfg.unlabeled_counts()
    labeled, unlabeled = [], []
    for cls in range(cfg.num_classes):
        need = n_counts[cls] + m_counts[cls]
        ids = np.flatnonzero(source.labels == cls)
        if ids.size < need:
            raise DataError(
                f"class {cls} has {ids.size} samples, need {need} "
                f"(N_c={n_counts[cls]}, M_c={m_counts[cls]})"
            )
        perm = rng.permutation(ids)
        labeled.extend(perm[: n_counts[cls]].tolist())
        unlabeled.extend(perm[n_counts[cls] : need].tolist())
    return _finish_split(source, labeled, unlabeled)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _read_exact(fh, n: int, path: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def load_idx(images_path: str, labels_path: str):
    """Byte-exact IDX ingestion; pixels scaled to [0, 1]."""
    for p in (images_path, labels_path):
        if not os.path.exists(p):
            raise DataError(f"{p}: file not found")
    with open(images_path, "rb") as fh:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(
                f"{images_path}: bad magic, expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"
            )
        raw = _read_exact(fh, n * h * w, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    with open(labels_path, "rb") as fh:
        magic, nl = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise DataError(
                f"{labels_path}: bad magic, expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"
            )
        raw = _read_exact(fh, nl, labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if labels.shape[0] != images.shape[0]:
        raise DataError(
            f"image/label count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return images, labels


def load_csv(path: str, channels: int, height: int, width: int):
    """CSV ingestion with header ``id,class,p0,p1,...`` (row-major pixels)."""
    if not os.path.exists(path):
        raise DataError(f"{path}: file not found")
    want = channels * height * width
    ids, labels, images = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "class"]:
            raise DataError(f"{path}: header must start with 'id,class,p0,...'")
        if len(header) - 2 != want:
            raise DataError(
                f"{path}: header has {len(header) - 2} pixel columns, expected {want}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != want + 2:
                raise DataError(f"{path}:{lineno}: expected {want + 2} fields, got {len(row)}")
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            images.append(
                np.array([float(v) for v in row[2:]]).reshape(channels, height, width)
            )
    if not ids:
        raise DataError(f"{path}: no data rows")
    return np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64), np.stack(images)


def source_from_idx(train_images, train_labels, test_images, test_labels) -> Source:
    imgs, labels = load_idx(train_images, train_labels)
    timgs, tlabels = load_idx(test_images, test_labels)
    classes = int(max(labels.max(), tlabels.max())) + 1
    return Source(imgs, labels, timgs, tlabels, classes)


def source_from_csv(train_csv, test_csv, channels, height, width) -> Source:
    _, labels, imgs = load_csv(train_csv, channels, height, width)
    _, tlabels, timgs = load_csv(test_csv, channels, height, width)
    classes = int(max(labels.max(), tlabels.max())) + 1
    return Source(imgs, labels, timgs, tlabels, classes)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def write_manifest(split: DatasetSplit, path: str):
    """CSV manifest (id, role, class-if-labeled)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "role", "class"])
        for sid, cls in zip(split.labeled_ids, split.labeled_classes):
            writer.writerow([int(sid), "labeled", int(cls)])
        for sid in split.unlabeled_ids:
            writer.writerow([int(sid), "unlabeled", ""])
        for sid, cls in zip(split.test_ids, split.test_classes):
            writer.writerow([int(sid), "test", int(cls)])
