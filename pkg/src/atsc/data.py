"""Deterministic datasets: Gaussian clusters and class-per-folder images."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import torch

from .errors import ConfigurationError, IngestionError

DATA_DIR_ENV = "ATSC_DATA_DIR"
STATS_FILE = "atsc_stats.json"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm"}


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 10
    dims: int = 32
    n_train: int = 2000
    n_test: int = 500
    separation: float = 4.0
    noise: float = 1.0
    modes_per_class: int = 1
    seed: Optional[int] = None
    # image_folder only
    path: Optional[str] = None
    image_size: Optional[tuple] = None
    augment: bool = True
    hflip: bool = True
    pad: int = 4

    def __post_init__(self):
        if self.kind not in ("synthetic", "image_folder"):
            raise ConfigurationError(f"dataset.kind must be synthetic or image_folder, got {self.kind!r}")
        if self.image_size is not None:
            self.image_size = tuple(int(s) for s in self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["image_size"] is not None:
            d["image_size"] = list(d["image_size"])
        return d

    @classmethod
    def from_dict(cls, d) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Split:
    """Inputs and labels held in memory.

    ``augment``, when set, is applied to each training batch as
    ``augment(x_batch, rng)`` and must return a new tensor.
    """

    x: torch.Tensor
    y: torch.Tensor
    num_classes: int
    augment: Optional[Callable] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.y)

    def to(self, dtype) -> "Split":
        return Split(self.x.to(dtype), self.y, self.num_classes, self.augment)


@dataclass
class Batch:
    x: torch.Tensor
    y: torch.Tensor
    indices: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise IngestionError("batch inputs and labels differ in length")


# --------------------------------------------------------------------------- #
# Synthetic clusters
# --------------------------------------------------------------------------- #


def _cluster_centers(rng: np.random.Generator, k: int, dims: int, separation: float) -> np.ndarray:
    # Orthonormal directions scaled by sep/sqrt(2) put every pair of centers
    # exactly `separation` apart. With more classes than dims, fall back to
    # random unit directions.
    if k <= dims:
        q, _ = np.linalg.qr(rng.standard_normal((dims, k)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((k, dims))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (separation / np.sqrt(2.0))


def make_synthetic(spec: DatasetSpec, seed: Optional[int] = None):
    """Isotropic Gaussian clusters, ``modes_per_class`` per class. Returns
    ``(train, test)`` splits.

    Labels are assigned round-robin before shuffling, so every class count is
    within one of ``n / K``; modes within a class are equally likely.
    ``separation`` is the distance between cluster centers in units of the
    per-coordinate noise scale. With one mode per class the classes are
    linearly separable up to noise; more modes give non-convex classes.
    """
    if spec.num_classes < 2 or spec.dims < 1 or spec.modes_per_class < 1:
        raise ConfigurationError("synthetic data needs num_classes >= 2, dims >= 1, modes_per_class >= 1")
    if spec.n_train < 1 or spec.n_test < 0 or not spec.noise > 0 or spec.separation < 0:
        raise ConfigurationError("synthetic data needs n_train >= 1, n_test >= 0, noise > 0, separation >= 0")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(0 if seed is None else seed)
    k, m = spec.num_classes, spec.modes_per_class
    centers = _cluster_centers(rng, k * m, spec.dims, spec.separation * spec.noise)

    def draw(n):
        y = np.arange(n) % k
        rng.shuffle(y)
        mode = rng.integers(0, m, size=n)
        x = centers[mode * k + y] + spec.noise * rng.standard_normal((n, spec.dims))
        return Split(torch.from_numpy(x).float(), torch.from_numpy(y).long(), spec.num_classes)

    return draw(spec.n_train), draw(spec.n_test)


# --------------------------------------------------------------------------- #
# Image preprocessing
# --------------------------------------------------------------------------- #


def _as_chw(img) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(img), dtype=torch.float32)
    if t.dim() == 2:
        t = t[None]
    return t


def preprocess_image(
    img,
    train: bool,
    mean,
    std,
    size: Optional[tuple] = None,
    rng: Optional[np.random.Generator] = None,
    pad: int = 4,
    hflip: bool = True,
    crop_offset: Optional[tuple] = None,
    flip: Optional[bool] = None,
) -> torch.Tensor:
    """Normalize a CHW image; in training, also zero-pad, random-crop back to
    the original size and (optionally) flip horizontally.

    ``crop_offset`` and ``flip`` pin the random choices, mainly for tests.
    """
    x = _as_chw(img)
    c, h, w = x.shape
    if size is not None and (h, w) != tuple(size):
        raise IngestionError(f"image is {h}x{w}, expected {size[0]}x{size[1]}")
    mean = torch.as_tensor(mean, dtype=x.dtype).reshape(-1, 1, 1)
    std = torch.as_tensor(std, dtype=x.dtype).reshape(-1, 1, 1)
    if mean.shape[0] not in (1, c) or std.shape[0] not in (1, c):
        raise IngestionError(f"normalization stats do not match {c} channels")
    if train:
        rng = rng if rng is not None else np.random.default_rng()
        if pad > 0:
            padded = torch.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
            padded[:, pad : pad + h, pad : pad + w] = x
            if crop_offset is None:
                i, j = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
            else:
                i, j = crop_offset
            x = padded[:, i : i + h, j : j + w]
        if flip is None:
            flip = hflip and bool(rng.random() < 0.5)
        if flip:
            x = x.flip(-1)
    return (x - mean) / std


def channel_stats(images: torch.Tensor):
    """Per-channel mean and std over an (N, C, H, W) stack."""
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3), unbiased=False).clamp_min(1e-8)
    return mean.tolist(), std.tolist()


def resolve_data_path(path: Optional[str]) -> Path:
    if not path:
        raise ConfigurationError("dataset.path: required for image_folder datasets")
    p = Path(path)
    if not p.is_absolute() and os.environ.get(DATA_DIR_ENV):
        p = Path(os.environ[DATA_DIR_ENV]) / p
    if not p.is_dir():
        raise ConfigurationError(f"dataset.path: {p} is not a directory")
    return p


def _load_folder(root: Path, classes: list, size):
    from PIL import Image

    xs, ys = [], []
    for label, name in enumerate(classes):
        d = root / name
        if not d.is_dir():
            continue
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            if size is not None and arr.shape[:2] != tuple(size):
                raise IngestionError(f"{f}: image is {arr.shape[0]}x{arr.shape[1]}, expected {size[0]}x{size[1]}")
            xs.append(arr.transpose(2, 0, 1))
            ys.append(label)
    if not xs:
        raise IngestionError(f"no images found under {root}")
    return torch.from_numpy(np.stack(xs)), torch.tensor(ys, dtype=torch.long)


def load_image_folder(spec: DatasetSpec):
    """Read ``<root>/train/<class>/*`` and ``<root>/test/<class>/*``.

    Channel statistics come from the training images and are cached in
    ``<root>/atsc_stats.json``.
    """
    root = resolve_data_path(spec.path)
    train_dir, test_dir = root / "train", root / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise IngestionError(f"{root} must contain train/ and test/ subdirectories")
    classes = sorted(p.name for p in train_dir.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise IngestionError(f"{train_dir} needs at least two class subdirectories")
    if spec.num_classes and spec.num_classes != len(classes):
        raise ConfigurationError(
            f"dataset.num_classes is {spec.num_classes} but {train_dir} has {len(classes)} classes"
        )
    x_tr, y_tr = _load_folder(train_dir, classes, spec.image_size)
    x_te, y_te = _load_folder(test_dir, classes, spec.image_size or tuple(x_tr.shape[-2:]))
    size = tuple(x_tr.shape[-2:])

    stats_path = root / STATS_FILE
    if stats_path.exists():
        cached = json.loads(stats_path.read_text())
        mean, std = cached["mean"], cached["std"]
    else:
        mean, std = channel_stats(x_tr)
        stats_path.write_text(json.dumps({"classes": classes, "mean": mean, "std": std}, indent=2))

    x_te = torch.stack([preprocess_image(im, False, mean, std, size) for im in x_te])
    if spec.augment:
        def augment(xb, rng):
            return torch.stack([
                preprocess_image(im, True, mean, std, size, rng=rng, pad=spec.pad, hflip=spec.hflip)
                for im in xb
            ])
        train = Split(x_tr, y_tr, len(classes), augment)
    else:
        x_tr = torch.stack([preprocess_image(im, False, mean, std, size) for im in x_tr])
        train = Split(x_tr, y_tr, len(classes))
    return train, Split(x_te, y_te, len(classes))


def make_dataset(spec: DatasetSpec, seed: Optional[int] = None):
    if spec.kind == "synthetic":
        return make_synthetic(spec, seed)
    return load_image_folder(spec)


def iterate_batches(split: Split, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Shuffled mini-batches; the order is a function of ``(seed, epoch)`` and
    the last short batch is kept. Augmentation, if the split has one, draws
    from an RNG keyed on ``(seed, epoch, batch index)``."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(split))
    for b, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start : start + batch_size]
        x = split.x[idx]
        if split.augment is not None:
            x = split.augment(x, np.random.default_rng([seed, epoch, b, 1])).to(split.x.dtype)
        yield Batch(x, split.y[idx], idx)
