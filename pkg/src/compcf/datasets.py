"""Dataset generation and directory I/O.

Datasets live on disk as ``<root>/<class_label>/<name>.png``. Images are
8-bit RGB PNGs; in memory they are float32 H x W x C arrays in [0, 1].

The built-in synthetic "shapes" dataset renders six easily separable
classes at 32x32. One class is typically held out of training and used
as the pool of spatial anomalies.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError

SHAPE_CLASSES = ("circle", "square", "triangle", "plus", "stripes", "checker")
DEFAULT_HELDOUT_CLASS = "stripes"


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a float [0,1] image to the 8-bit grid."""
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap a float image onto the representable 8-bit grid.

    Images that round-trip through PNG must score identically before and
    after the trip, so anything persisted is quantized first.
    """
    return from_uint8(to_uint8(img))


def save_image(img: np.ndarray, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


@dataclasses.dataclass
class LabeledImageSet:
    """In-memory image set with per-image string labels and stable ids."""

    images: np.ndarray  # N x H x W x C float32 in [0,1]
    labels: list[str]
    ids: list[str]

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.images) != len(self.ids):
            raise DataError("images, labels, and ids must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def class_labels(self) -> list[str]:
        return sorted(set(self.labels))

    def subset(self, indices) -> "LabeledImageSet":
        indices = list(indices)
        return LabeledImageSet(
            images=self.images[indices],
            labels=[self.labels[i] for i in indices],
            ids=[self.ids[i] for i in indices],
        )

    def filter_classes(self, keep: set[str]) -> "LabeledImageSet":
        idx = [i for i, lab in enumerate(self.labels) if lab in keep]
        return self.subset(idx)

    def count_per_class(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for lab in self.labels:
            out[lab] = out.get(lab, 0) + 1
        return out


def _render_shape(cls: str, rng: np.random.Generator, size: int) -> np.ndarray:
    """Render one image of the given shape class."""
    bg = rng.uniform(0.15, 0.40, size=3)
    fg = rng.uniform(0.60, 0.95, size=3)
    img = np.ones((size, size, 3), dtype=np.float32) * bg.astype(np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    cy = size / 2 + rng.uniform(-3, 3)
    cx = size / 2 + rng.uniform(-3, 3)

    if cls == "circle":
        r = rng.uniform(0.22, 0.34) * size
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    elif cls == "square":
        half = rng.uniform(0.18, 0.30) * size
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif cls == "triangle":
        half = rng.uniform(0.24, 0.36) * size
        # upward-pointing triangle: widens linearly from apex to base
        rel = (yy - (cy - half)) / (2 * half)
        mask = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * half)
    elif cls == "plus":
        arm = rng.uniform(0.28, 0.40) * size
        width = rng.uniform(0.06, 0.10) * size
        mask = ((np.abs(yy - cy) <= width) & (np.abs(xx - cx) <= arm)) | (
            (np.abs(xx - cx) <= width) & (np.abs(yy - cy) <= arm)
        )
    elif cls == "stripes":
        period = int(rng.choice([6, 8]))
        phase = int(rng.integers(0, period))
        mask = ((yy + phase) // (period // 2)) % 2 == 0
    elif cls == "checker":
        cell = 4
        py = int(rng.integers(0, cell))
        px = int(rng.integers(0, cell))
        mask = (((yy + py) // cell) + ((xx + px) // cell)) % 2 == 0
    else:
        raise DataError(f"unknown shape class: {cls!r}")

    img[mask] = fg.astype(np.float32)
    img += rng.uniform(-0.02, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_shapes_dataset(
    per_class: int = 200,
    size: int = 32,
    seed: int = 0,
    classes: tuple[str, ...] = SHAPE_CLASSES,
) -> LabeledImageSet:
    """Render the synthetic shapes dataset, deterministically from the seed.

    Every image gets its own RNG stream derived from (seed, class, index),
    so subsets and render order cannot change pixel content.
    """
    if per_class <= 0:
        raise DataError("per_class must be positive")
    images, labels, ids = [], [], []
    for ci, cls in enumerate(classes):
        for k in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence((seed, ci, k)))
            img = _render_shape(cls, rng, size)
            images.append(quantize(img))
            labels.append(cls)
            ids.append(f"{cls}_{k:04d}")
    return LabeledImageSet(np.stack(images), labels, ids)


def write_dataset(dataset: LabeledImageSet, root: Path) -> None:
    root = Path(root)
    for img, label, img_id in zip(dataset.images, dataset.labels, dataset.ids):
        save_image(img, root / label / f"{img_id}.png")


def load_dataset(root: Path) -> LabeledImageSet:
    """Load a ``<root>/<class_label>/<image>.png`` directory tree."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    images, labels, ids = [], [], []
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} contains no class directories")
    for cdir in class_dirs:
        for f in sorted(cdir.glob("*.png")):
            images.append(load_image(f))
            labels.append(cdir.name)
            ids.append(f.stem)
    if not images:
        raise DataError(f"dataset root {root} contains no PNG images")
    return LabeledImageSet(np.stack(images), labels, ids)


@dataclasses.dataclass
class DatasetSplits:
    """Per-class stratified splits: train/val for models, calib/test for scoring."""

    train: LabeledImageSet
    val: LabeledImageSet
    calib: LabeledImageSet
    test: LabeledImageSet
    heldout: LabeledImageSet  # the spatial-anomaly pool, never trained on


def split_dataset(
    dataset: LabeledImageSet,
    heldout_class: str = DEFAULT_HELDOUT_CLASS,
    seed: int = 0,
    fractions: tuple[float, float, float] = (0.6, 0.1, 0.15),
) -> DatasetSplits:
    """Split per class into train/val/calib/test; the held-out class is kept whole.

    `fractions` gives the train/val/calib shares; the remainder is test.
    """
    if heldout_class not in set(dataset.labels):
        raise DataError(f"held-out class {heldout_class!r} not present in dataset")
    if sum(fractions) >= 1.0:
        raise DataError("train/val/calib fractions must leave room for a test split")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD5)))
    buckets: dict[str, list[int]] = {"train": [], "val": [], "calib": [], "test": []}
    heldout_idx: list[int] = []
    for cls in dataset.class_labels:
        idx = [i for i, lab in enumerate(dataset.labels) if lab == cls]
        if cls == heldout_class:
            heldout_idx.extend(idx)
            continue
        idx = list(rng.permutation(idx))
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        n_calib = int(round(fractions[2] * n))
        buckets["train"].extend(idx[:n_train])
        buckets["val"].extend(idx[n_train : n_train + n_val])
        buckets["calib"].extend(idx[n_train + n_val : n_train + n_val + n_calib])
        buckets["test"].extend(idx[n_train + n_val + n_calib :])
    return DatasetSplits(
        train=dataset.subset(sorted(buckets["train"])),
        val=dataset.subset(sorted(buckets["val"])),
        calib=dataset.subset(sorted(buckets["calib"])),
        test=dataset.subset(sorted(buckets["test"])),
        heldout=dataset.subset(sorted(heldout_idx)),
    )
