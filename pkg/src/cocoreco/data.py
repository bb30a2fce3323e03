"""Datasets: synthetic shapes, directory trees of images, and split assignment."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .imageio import PNG_SUPPORTED, read_image, write_ppm
from .tensor import bilinear_resize

log = logging.getLogger(__name__)

SHAPES = ("square", "disk", "cross")
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = {".ppm", ".pgm", ".pnm"}
PNG_EXTENSIONS = {".png"}


@dataclass
class DatasetIndex:
    """Labelled samples with a split tag each; pixels in [0, 1] when loaded."""

    samples: list
    class_names: list
    split: list
    images: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.samples], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == split], dtype=np.int64)

    def ids(self, split: str) -> set:
        return {self.samples[i][0] for i in self.indices(split)}

    def subset(self, split: str):
        """(images, labels) of one split."""
        idx = self.indices(split)
        return self.images[idx], self.labels[idx]


def standardize(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to mean 0.5 / std 0.5 standardised values."""
    return ((images - 0.5) / 0.5).astype(np.float32)


# ----------------------------------------------------------------------------
# synthetic shapes


def _render(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    img = rng.uniform(0.0, 0.5, size=(3, size, size))
    r = rng.uniform(0.15, 0.3) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if shape == "square":
        mask = (dy <= r) & (dx <= r)
    elif shape == "disk":
        mask = dy * dy + dx * dx <= r * r
    elif shape == "cross":
        arm = r / 3
        mask = ((dy <= arm) & (dx <= r)) | ((dx <= arm) & (dy <= r))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    color = rng.uniform(0.7, 1.0, size=3)
    img[:, mask] = color[:, None]
    return img


def synth_dataset(
    n_per_class: int,
    classes: Sequence[str] = SHAPES,
    image_size: int = 64,
    seed: int = 0,
    splits: Optional[Mapping[str, int]] = None,
) -> DatasetIndex:
    """One bright shape per image over uniform noise, balanced over classes.

    ``splits`` gives per-class counts per split (e.g. ``{"train": 100,
    "val": 20, "test": 20}``); without it all ``n_per_class`` samples are
    tagged ``train``.
    """
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    counts = dict(splits) if splits else {"train": n_per_class}
    rng = np.random.default_rng(seed)
    samples, split, images = [], [], []
    for tag, n in counts.items():
        for i in range(n):
            for k, shape in enumerate(classes):
                samples.append((f"{tag}/{shape}/{i:05d}", k))
                split.append(tag)
                images.append(_render(shape, image_size, rng))
    arr = np.stack(images).astype(np.float32)
    return DatasetIndex(samples=samples, class_names=list(classes), split=split, images=arr)


def write_dataset(index: DatasetIndex, root) -> None:
    """Materialise ``index`` as ``root/<split>/<class>/<n>.ppm``."""
    root = Path(root)
    for i, (sid, k) in enumerate(index.samples):
        d = root / index.split[i] / index.class_names[k]
        d.mkdir(parents=True, exist_ok=True)
        write_ppm(d / f"{Path(sid).name}.ppm", index.images[i])


# ----------------------------------------------------------------------------
# directory trees


def _class_tree(root: Path, allow_png: bool):
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    exts = IMAGE_EXTENSIONS | (PNG_EXTENSIONS if allow_png else set())
    files = {}
    for name in classes:
        found = sorted(f for f in (root / name).iterdir() if f.is_file() and f.suffix.lower() in exts)
        if not found:
            raise ValueError(f"empty class directory: {root / name}")
        files[name] = found
    return classes, files


def load_dataset(root, image_size: int = 64, allow_png: bool = PNG_SUPPORTED, split: str = "train") -> DatasetIndex:
    """Load ``root/<class_name>/<images>``.

    If ``root`` contains ``train/`` and ``val/`` subtrees those become the
    official splits; otherwise every sample is tagged ``split``. Classes are
    the sorted subdirectory names. Images are bilinearly resized to
    ``image_size`` with pixels in [0, 1] (see :func:`standardize`).
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    trees = [(root / s, s) for s in ("train", "val", "test") if (root / s).is_dir()]
    if not trees:
        trees = [(root, split)]
    class_names = None
    samples, tags, images = [], [], []
    for sub, tag in trees:
        classes, files = _class_tree(sub, allow_png)
        if class_names is None:
            class_names = classes
        elif classes != class_names:
            raise ValueError(f"class directories differ between splits: {class_names} vs {classes}")
        for k, name in enumerate(classes):
            for f in files[name]:
                img = read_image(f)
                if img.shape[1:] != (image_size, image_size):
                    img = bilinear_resize(img, image_size, image_size)
                samples.append((os.fspath(f.relative_to(root)), k))
                tags.append(tag)
                images.append(img)
    return DatasetIndex(samples, class_names, tags, np.stack(images).astype(np.float32))


def split_dataset(index: DatasetIndex, seed: int = 0, ratios=(0.6, 0.3)) -> DatasetIndex:
    """Split the ``val`` samples of each class into val/test by ``ratios``.

    Samples beyond both ratios are tagged ``discard``; train is untouched.
    """
    val_frac, test_frac = ratios
    rng = np.random.default_rng(seed)
    tags = list(index.split)
    labels = index.labels
    val_idx = index.indices("val")
    if val_idx.size == 0:
        raise ValueError("split_dataset: no val samples to split")
    for k in range(index.num_classes):
        members = val_idx[labels[val_idx] == k]
        if members.size == 0:
            continue
        if members.size < 4:
            log.warning("class %s has only %d val samples; split is best-effort", index.class_names[k], members.size)
        members = rng.permutation(members)
        n_val = int(round(val_frac * members.size))
        n_test = min(int(round(test_frac * members.size)), members.size - n_val)
        for j, i in enumerate(members):
            tags[i] = "val" if j < n_val else ("test" if j < n_val + n_test else "discard")
    return replace(index, split=tags)
