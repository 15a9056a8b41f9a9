"""Dataset ingestion and forget/remain splitting.

Datasets are immutable-by-convention (inputs, labels) pairs; every split
is a partition by index and all randomized splitters are deterministic
given their seed. IDX ingestion follows the big-endian binary layout
(magic 0x00000803 for images, 0x00000801 for labels) and rejects
malformed input without leaving partial state.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX input; message names the failing offset."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    original_labels: np.ndarray | None = None  # pre-noise labels, noisy setup only
    provenance: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.inputs[indices].copy(),
            self.labels[indices].copy(),
            None if self.original_labels is None else self.original_labels[indices].copy(),
            self.provenance,
        )

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass
class ForgetSplit:
    """Partition of a dataset into forgetting and remaining parts."""

    forget: Dataset
    remain: Dataset
    forget_indices: np.ndarray
    remain_indices: np.ndarray
    setup: str  # class_level | data_level | noisy
    seed: int | None = None
    n_total: int = field(default=0)

    def __post_init__(self):
        self.forget_indices = np.asarray(self.forget_indices, dtype=np.int64)
        self.remain_indices = np.asarray(self.remain_indices, dtype=np.int64)
        if self.n_total == 0:
            self.n_total = len(self.forget_indices) + len(self.remain_indices)
        self.validate()

    def validate(self) -> None:
        joined = np.concatenate([self.forget_indices, self.remain_indices])
        if len(np.unique(joined)) != len(joined):
            raise ValueError("forget and remain index sets overlap")
        if len(joined) != self.n_total or (np.sort(joined) != np.arange(self.n_total)).any():
            raise ValueError("forget and remain do not cover the dataset")


# ------------------------------------------------------------------- IDX


def _read_be32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lbl_buf = f.read()

    magic = _read_be32(img_buf, 0, str(images_path))
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    count = _read_be32(img_buf, 4, str(images_path))
    rows = _read_be32(img_buf, 8, str(images_path))
    cols = _read_be32(img_buf, 12, str(images_path))
    expected = 16 + count * rows * cols
    if len(img_buf) != expected:
        raise IdxFormatError(
            f"{images_path}: expected {expected} bytes for {count}x{rows}x{cols}, got {len(img_buf)}"
        )

    lmagic = _read_be32(lbl_buf, 0, str(labels_path))
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad label magic 0x{lmagic:08x} at offset 0, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    lcount = _read_be32(lbl_buf, 4, str(labels_path))
    if len(lbl_buf) != 8 + lcount:
        raise IdxFormatError(f"{labels_path}: expected {8 + lcount} bytes, got {len(lbl_buf)}")
    if lcount != count:
        raise IdxFormatError(
            f"count mismatch: {count} images in {images_path} vs {lcount} labels in {labels_path}"
        )

    pixels = np.frombuffer(img_buf, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, offset=8)
    return Dataset(pixels.astype(np.float64) / 255.0, labels.astype(np.int64), provenance="idx")


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray) -> None:
    """Inverse of load_idx for (N, rows, cols) uint8 images and uint8 labels."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    if images_u8.ndim != 3 or len(images_u8) != len(labels_u8):
        raise ValueError(f"need (N, rows, cols) images and N labels, got {images_u8.shape}")
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(labels_u8.tobytes())


# ------------------------------------------------------------- synthetic


def make_blobs(classes: int, per_class: int, dim: int, separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian clusters, means at least `separation` apart."""
    if classes < 2 or per_class < 1 or dim < 1 or separation <= 0:
        raise ValueError(
            f"bad blob spec: classes={classes}, per_class={per_class}, dim={dim}, separation={separation}"
        )
    rng = np.random.default_rng(seed)
    means = []
    # Means on a sphere of radius `separation`: the minimum spacing is the
    # stated separation while typical spacing stays ~1.4x it, so clusters
    # genuinely compete instead of drifting arbitrarily far apart.
    radius = float(separation)
    attempts = 0
    while len(means) < classes:
        direction = rng.normal(size=dim)
        cand = radius * direction / np.linalg.norm(direction)
        if all(np.linalg.norm(cand - m) >= separation for m in means):
            means.append(cand)
        attempts += 1
        if attempts > 1000 * classes:  # loosen packing rather than spin forever
            radius *= 1.1
            attempts = 0
    inputs = np.concatenate(
        [rng.normal(loc=m, scale=1.0, size=(per_class, dim)) for m in means], axis=0
    )
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(inputs, labels, provenance=f"blobs(seed={seed})")


def split_train_test_per_class(d: Dataset, train_per_class: int) -> tuple[Dataset, Dataset]:
    """First train_per_class samples of each class become train, rest test."""
    train_idx, test_idx = [], []
    for c in np.unique(d.labels):
        idx = d.class_indices(int(c))
        if len(idx) <= train_per_class:
            raise ValueError(f"class {c} has {len(idx)} samples, need > {train_per_class}")
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:])
    return d.subset(np.concatenate(train_idx)), d.subset(np.concatenate(test_idx))


# Seven-segment style glyphs on a 7x7 grid, upscaled to 28x28.
_SEGMENTS = {
    "top": [(0, c) for c in range(1, 6)],
    "mid": [(3, c) for c in range(1, 6)],
    "bot": [(6, c) for c in range(1, 6)],
    "tl": [(r, 0) for r in range(1, 3)],
    "bl": [(r, 0) for r in range(4, 6)],
    "tr": [(r, 6) for r in range(1, 3)],
    "br": [(r, 6) for r in range(4, 6)],
}
_DIGIT_SEGMENTS = [
    ("top", "tl", "tr", "bl", "br", "bot"),
    ("tr", "br"),
    ("top", "tr", "mid", "bl", "bot"),
    ("top", "tr", "mid", "br", "bot"),
    ("tl", "tr", "mid", "br"),
    ("top", "tl", "mid", "br", "bot"),
    ("top", "tl", "mid", "bl", "br", "bot"),
    ("top", "tr", "br"),
    ("top", "tl", "tr", "mid", "bl", "br", "bot"),
    ("top", "tl", "tr", "mid", "br", "bot"),
]


def _digit_templates() -> np.ndarray:
    glyphs = np.zeros((10, 7, 7))
    for digit, segs in enumerate(_DIGIT_SEGMENTS):
        for seg in segs:
            for r, c in _SEGMENTS[seg]:
                glyphs[digit, r, c] = 1.0
    return np.kron(glyphs, np.ones((4, 4)))  # 28x28, 4px strokes


def make_synth_digits(per_class: int, seed: int, max_shift: int = 3, noise: float = 0.25) -> Dataset:
    """Deterministic 28x28 10-class digit-glyph images with jitter and noise.

    A desk-scale stand-in for scanned-digit data: same shape, same class
    count, loadable through the IDX path via to_idx_arrays/write_idx.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    templates = _digit_templates()
    n = 10 * per_class
    images = np.zeros((n, 28, 28))
    labels = np.repeat(np.arange(10), per_class)
    for i, lbl in enumerate(labels):
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        canvas = np.zeros((28, 28))
        src = templates[lbl]
        ys, ye = max(0, dy), min(28, 28 + dy)
        xs, xe = max(0, dx), min(28, 28 + dx)
        canvas[ys:ye, xs:xe] = src[ys - dy : ye - dy, xs - dx : xe - dx]
        intensity = rng.uniform(0.7, 1.0)
        images[i] = np.clip(canvas * intensity + rng.normal(0.0, noise, size=(28, 28)), 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(
        images[order].reshape(n, 1, 28, 28), labels[order], provenance=f"synth_digits(seed={seed})"
    )


def to_idx_arrays(d: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Quantize an image dataset back to the (N, rows, cols) uint8 IDX layout."""
    if d.inputs.ndim != 4 or d.inputs.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W) images, got {d.inputs.shape}")
    images = np.round(d.inputs[:, 0] * 255.0).astype(np.uint8)
    return images, d.labels.astype(np.uint8)


# ---------------------------------------------------------------- splits


def split_class_level(d: Dataset, forgotten_class: int) -> ForgetSplit:
    forget_idx = d.class_indices(forgotten_class)
    if len(forget_idx) == 0:
        raise ValueError(f"class {forgotten_class} absent from dataset")
    remain_idx = np.flatnonzero(d.labels != forgotten_class)
    return ForgetSplit(
        d.subset(forget_idx), d.subset(remain_idx), forget_idx, remain_idx, "class_level"
    )


def _sample_fraction_per_class(d: Dataset, classes, fraction: float, seed: int) -> np.ndarray:
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise ValueError("empty class set")
    rng = np.random.default_rng(seed)
    picked = []
    for c in classes:
        idx = d.class_indices(c)
        if len(idx) == 0:
            raise ValueError(f"class {c} absent from dataset")
        k = int(np.floor(fraction * len(idx)))  # floor per class
        picked.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(picked))


def split_data_level(d: Dataset, classes, fraction: float, seed: int) -> ForgetSplit:
    forget_idx = _sample_fraction_per_class(d, classes, fraction, seed)
    mask = np.ones(len(d), dtype=bool)
    mask[forget_idx] = False
    remain_idx = np.flatnonzero(mask)
    return ForgetSplit(
        d.subset(forget_idx), d.subset(remain_idx), forget_idx, remain_idx, "data_level", seed
    )


def split_noisy(d: Dataset, classes, fraction: float, seed: int) -> ForgetSplit:
    """Mislabel a per-class fraction; the mislabeled samples form the forget set.

    The forget part carries the noisy labels with original labels recorded;
    the remain part keeps clean labels.
    """
    forget_idx = _sample_fraction_per_class(d, classes, fraction, seed)
    mask = np.ones(len(d), dtype=bool)
    mask[forget_idx] = False
    remain_idx = np.flatnonzero(mask)
    n_classes = int(d.labels.max()) + 1
    rng = np.random.default_rng(seed + 1)  # separate stream from index sampling
    originals = d.labels[forget_idx].copy()
    offsets = rng.integers(1, n_classes, size=len(forget_idx))
    noisy = (originals + offsets) % n_classes  # uniform over the other classes
    forget = Dataset(
        d.inputs[forget_idx].copy(), noisy, original_labels=originals, provenance=d.provenance
    )
    return ForgetSplit(forget, d.subset(remain_idx), forget_idx, remain_idx, "noisy", seed)


def restore_original_labels(split: ForgetSplit) -> Dataset:
    """Undo noisy-label injection, reproducing the clean parent dataset order."""
    if split.forget.original_labels is None:
        raise ValueError("split carries no noisy-label record")
    n = split.n_total
    inputs = np.zeros((n,) + split.forget.inputs.shape[1:])
    labels = np.zeros(n, dtype=np.int64)
    inputs[split.forget_indices] = split.forget.inputs
    labels[split.forget_indices] = split.forget.original_labels
    inputs[split.remain_indices] = split.remain.inputs
    labels[split.remain_indices] = split.remain.labels
    return Dataset(inputs, labels, provenance=split.forget.provenance)


def merged_training_view(split: ForgetSplit) -> Dataset:
    """Parent-order dataset with the forget part's (possibly noisy) labels in place."""
    n = split.n_total
    inputs = np.zeros((n,) + split.forget.inputs.shape[1:])
    labels = np.zeros(n, dtype=np.int64)
    inputs[split.forget_indices] = split.forget.inputs
    labels[split.forget_indices] = split.forget.labels
    inputs[split.remain_indices] = split.remain.inputs
    labels[split.remain_indices] = split.remain.labels
    return Dataset(inputs, labels)


def write_split_manifest(split: ForgetSplit, path) -> None:
    """CSV of (index, part) rows for reproducibility audits."""
    rows = [(int(i), "forget") for i in split.forget_indices]
    rows += [(int(i), "remain") for i in split.remain_indices]
    rows.sort()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "part"])
        writer.writerows(rows)
