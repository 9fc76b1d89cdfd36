"""Unpaired two-folder image data.

Images are decoded with Pillow and mapped to channels-first float32 arrays
in [-1, 1] via ``2 * v / 255 - 1``.
"""

from __future__ import annotations

import io
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .losses import SIGMA_FLOOR, DistanceStats

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    pass


class ImageDecodeError(DatasetError):
    pass


@dataclass(frozen=True)
class Augment:
    """Random resize-crop and horizontal flip, both off by default."""

    load_size: Optional[int] = None
    crop: bool = False
    hflip: bool = False

    @property
    def enabled(self) -> bool:
        return self.crop or self.hflip

    @classmethod
    def standard(cls, load_size: int = 286) -> "Augment":
        return cls(load_size=load_size, crop=True, hflip=True)


def list_images(directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    files = sorted(
        (p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS),
        key=lambda p: p.name,
    )
    if not files:
        raise DatasetError(f"no images found in {directory}")
    return files


def _open(source, name: str) -> Image.Image:
    try:
        if isinstance(source, Image.Image):
            img = source
        elif isinstance(source, (bytes, bytearray)):
            img = Image.open(io.BytesIO(source))
        else:
            img = Image.open(source)
        img.load()
    except Exception as exc:  # Pillow raises a zoo of types here
        raise ImageDecodeError(f"cannot decode image {name}: {exc}") from exc
    return img


def to_array(img: Image.Image, channels: int = 3) -> np.ndarray:
    """Pillow image -> float32 (C, H, W) in [-1, 1]."""
    if channels == 1:
        img = img.convert("L")
    elif channels == 3:
        # grayscale and palette images are expanded to RGB by replication
        img = img.convert("RGB")
    else:
        raise ValueError(f"unsupported channel count {channels}")
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr * np.float32(2.0 / 255.0) - np.float32(1.0))


def preprocess(
    source,
    resolution: Union[int, Tuple[int, int]],
    augment: Optional[Augment] = None,
    rng: Optional[np.random.Generator] = None,
    channels: int = 3,
    name: str = "<bytes>",
) -> np.ndarray:
    """Decode ``source`` (bytes, path or Pillow image) into a model input.

    Without augmentation the image is resized straight to ``resolution``
    (skipped if it already has that size). With augmentation it is resized
    to ``augment.load_size`` and randomly cropped, and/or randomly flipped
    left-right, using ``rng``.
    """
    h, w = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
    img = _open(source, name if not isinstance(source, (str, Path)) else str(source))
    augment = augment or Augment()
    if augment.enabled and rng is None:
        raise ValueError("augmentation needs an rng")
    if augment.crop:
        load = augment.load_size or max(h, w)
        img = img.resize((max(load, w), max(load, h)), Image.BICUBIC)
        top = int(rng.integers(img.height - h + 1))
        left = int(rng.integers(img.width - w + 1))
        img = img.crop((left, top, left + w, top + h))
    elif img.size != (w, h):
        img = img.resize((w, h), Image.BICUBIC)
    arr = to_array(img, channels)
    if augment.hflip and rng.random() < 0.5:
        arr = np.ascontiguousarray(arr[:, :, ::-1])
    return arr


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Inverse of the [-1, 1] map, rounding half away from zero.

    Accepts (C, H, W) and returns (H, W, C) uint8 (or (H, W) for one channel).
    """
    v = (np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    v = np.floor(v + 0.5)  # v >= 0, so this is half-away-from-zero
    v = np.clip(v, 0, 255).astype(np.uint8)
    if v.shape[0] == 1:
        return v[0]
    return v.transpose(1, 2, 0)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    x_index: List[int]
    y_index: List[int]
    x_next: Optional[np.ndarray] = None


class UnpairedDataset:
    """Two independently ordered image folders.

    An epoch visits every X image once in a seeded random order; Y
    partners come from independent reshuffles of Y, so the two domains may
    have different sizes. All randomness is keyed on ``(seed, epoch)``, so
    any epoch can be replayed without replaying the ones before it.
    """

    def __init__(
        self,
        files_x: Sequence[Path],
        files_y: Sequence[Path],
        resolution: Union[int, Tuple[int, int]],
        seed: int = 0,
        augment: Optional[Augment] = None,
        channels: int = 3,
        workers: int = 0,
    ):
        self.files_x = list(files_x)
        self.files_y = list(files_y)
        self.resolution = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
        self.seed = int(seed)
        self.augment = augment or Augment()
        self.channels = channels
        self.workers = workers
        self._cache = {}

    def __len__(self) -> int:
        return len(self.files_x)

    @property
    def sizes(self) -> Tuple[int, int]:
        return len(self.files_x), len(self.files_y)

    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *key])

    def load(self, domain: str, index: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        path = (self.files_x if domain == "x" else self.files_y)[index]
        if self.augment.enabled:
            return preprocess(path, self.resolution, self.augment, rng, self.channels)
        key = (domain, index)
        if key not in self._cache:
            self._cache[key] = preprocess(path, self.resolution, None, None, self.channels)
        return self._cache[key]

    def epoch_order(self, epoch: int) -> List[Tuple[int, int]]:
        """``(x_index, y_index)`` pairs for one epoch, length ``len(X)``."""
        n_x, n_y = self.sizes
        order_x = self._rng(epoch, 0).permutation(n_x)
        rng_y = self._rng(epoch, 1)
        reps = -(-n_x // n_y)
        order_y = np.concatenate([rng_y.permutation(n_y) for _ in range(reps)])[:n_x]
        return [(int(i), int(j)) for i, j in zip(order_x, order_y)]

    def batches(self, epoch: int, batch_size: int = 1, with_next: bool = False) -> Iterator[Batch]:
        """Yield the epoch in order. ``with_next`` attaches, for each X item,
        the X image that follows it in the shuffled order (wrapping), which
        is how distance pairs are formed."""
        order = self.epoch_order(epoch)
        n = len(order)
        jobs = []
        for start in range(0, n, batch_size):
            chunk = list(range(start, min(start + batch_size, n)))
            jobs.append(chunk)

        def fetch(chunk):
            xs, ys, nxt = [], [], []
            for pos in chunk:
                i, j = order[pos]
                rng = self._rng(epoch, 2, pos) if self.augment.enabled else None
                xs.append(self.load("x", i, rng))
                ys.append(self.load("y", j, rng))
                if with_next:
                    k = order[(pos + 1) % n][0]
                    nrng = self._rng(epoch, 3, pos) if self.augment.enabled else None
                    nxt.append(self.load("x", k, nrng))
            return Batch(
                x=np.stack(xs),
                y=np.stack(ys),
                x_index=[order[p][0] for p in chunk],
                y_index=[order[p][1] for p in chunk],
                x_next=np.stack(nxt) if with_next else None,
            )

        if self.workers > 0:
            # Executor.map preserves submission order
            with ThreadPoolExecutor(self.workers) as pool:
                yield from pool.map(fetch, jobs)
        else:
            for chunk in jobs:
                yield fetch(chunk)

    def domain_arrays(self, domain: str) -> np.ndarray:
        files = self.files_x if domain == "x" else self.files_y
        return np.stack([preprocess(p, self.resolution, None, None, self.channels) for p in files])


def load_unpaired(
    dir_x: Union[str, Path],
    dir_y: Union[str, Path],
    resolution: Union[int, Tuple[int, int]] = 256,
    seed: int = 0,
    augment: Optional[Augment] = None,
    channels: int = 3,
    workers: int = 0,
) -> UnpairedDataset:
    files_x = list_images(dir_x)
    files_y = list_images(dir_y)
    return UnpairedDataset(files_x, files_y, resolution, seed, augment, channels, workers)


def all_pairs(n: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64).reshape(-1, 2)


def sample_pairs(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` unordered pairs of distinct indices, uniform with replacement."""
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j = np.where(j >= i, j + 1, j)
    return np.stack([i, j], axis=1)


def pair_set(n: int, max_pairs: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Every pair when there are at most ``max_pairs`` of them, else a sample."""
    if n < 2:
        raise DatasetError(f"need at least 2 images for distance statistics, got {n}")
    total = n * (n - 1) // 2
    if max_pairs is None or total <= max_pairs:
        return all_pairs(n)
    return sample_pairs(n, max_pairs, np.random.default_rng(seed))


def pairwise_distances(images: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    flat = images.reshape(len(images), -1).astype(np.float64)
    return np.array([np.abs(flat[i] - flat[j]).mean() for i, j in pairs])


def distance_moments(
    images: np.ndarray, max_pairs: Optional[int] = None, seed: int = 0, floor: float = SIGMA_FLOOR
) -> Tuple[float, float]:
    """Mean and population std of pairwise distances, std floored."""
    d = pairwise_distances(images, pair_set(len(images), max_pairs, seed))
    return float(d.mean()), max(float(d.std()), floor)


def precompute_distance_stats(
    dataset: Union[UnpairedDataset, Tuple[np.ndarray, np.ndarray]],
    max_pairs: Optional[int] = 10000,
    seed: int = 0,
) -> DistanceStats:
    if isinstance(dataset, UnpairedDataset):
        if min(dataset.sizes) < 2:
            raise DatasetError(f"need at least 2 images per domain, got {dataset.sizes}")
        xs, ys = dataset.domain_arrays("x"), dataset.domain_arrays("y")
    else:
        xs, ys = dataset
    mu_x, sigma_x = distance_moments(np.asarray(xs), max_pairs, seed)
    mu_y, sigma_y = distance_moments(np.asarray(ys), max_pairs, seed + 1)
    return DistanceStats(mu_x, sigma_x, mu_y, sigma_y)
