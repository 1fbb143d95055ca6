"""Synthetic blob images, a raw on-disk format, and seeded mini-batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# upper-left, upper-right, lower-left, lower-right
QUADRANT_LABELS = {(0, 0): 0, (0, 1): 1, (1, 0): 2, (1, 1): 3}

STREAM_DATA = 11


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.meta))

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def blob_image(seed: int, index: int, image_size: int, num_classes: int = 4,
               noise: float = 0.2, amplitude: float = 0.9, sigma: float = 1.0) -> tuple[np.ndarray, int]:
    """One image as a pure function of ``(seed, index)``.

    Low-amplitude uniform noise plus a Gaussian blob; the blob's quadrant
    (or half, for two classes) is the label.
    """
    if image_size < 8:
        raise ValueError("image_size must be at least 8")
    if num_classes not in (2, 4):
        raise ValueError("synthetic blobs support 2 or 4 classes")
    rng = np.random.default_rng([seed, index])
    label = int(rng.integers(num_classes))
    s = image_size
    if num_classes == 4:
        qy, qx = divmod(label, 2)
    else:
        qy, qx = int(rng.integers(2)), label
    half = s / 2.0
    margin = min(sigma, half / 2 - 0.5)
    cy = qy * half + rng.uniform(margin, half - margin)
    cx = qx * half + rng.uniform(margin, half - margin)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    blob = amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    img = noise * rng.random((s, s)) + blob
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32), label


def synth_blobs(seed: int, count: int, image_size: int = 16, num_classes: int = 4, start: int = 0,
                **kw) -> Dataset:
    imgs = np.empty((count, 1, image_size, image_size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        imgs[i], labels[i] = blob_image(seed, start + i, image_size, num_classes, **kw)
    return Dataset(imgs, labels, num_classes, {"source": "synth_blobs", "seed": seed, "start": start})


def save_raw(dataset: Dataset, directory) -> None:
    """Write ``images.bin`` (uint8 with an M,C,H,W header) and ``labels.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imgs = np.asarray(dataset.images)
    if imgs.ndim != 4:
        imgs = imgs.reshape(0, 1, 1, 1) if imgs.size == 0 else imgs
    q = np.clip(np.rint(imgs * 255.0), 0, 255).astype("<u1")
    with open(d / "images.bin", "wb") as fh:
        fh.write(struct.pack("<4i", *q.shape))
        fh.write(q.tobytes(order="C"))
    with open(d / "labels.csv", "w") as fh:
        fh.writelines(f"{int(x)}\n" for x in dataset.labels)


def load_raw(directory, num_classes: int | None = None) -> Dataset:
    d = Path(directory)
    raw = (d / "images.bin").read_bytes()
    if len(raw) < 16:
        raise FormatError(f"images.bin header needs 16 bytes, found {len(raw)}")
    M, C, H, W = struct.unpack("<4i", raw[:16])
    if min(M, C, H, W) < 0:
        raise FormatError(f"negative header dimension {(M, C, H, W)}")
    expected = M * C * H * W
    body = raw[16:]
    if len(body) != expected:
        raise FormatError(f"header says {expected} pixel bytes (M={M},C={C},H={H},W={W}) but file has {len(body)}")
    images = (np.frombuffer(body, dtype="<u1").reshape(M, C, H, W).astype(np.float32) / 255.0)
    lines = [ln.strip() for ln in (d / "labels.csv").read_text().splitlines() if ln.strip()]
    if len(lines) != M:
        raise FormatError(f"header says {M} images but labels.csv has {len(lines)} labels")
    labels = np.array([int(x) for x in lines], dtype=np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if M else 1)
    return Dataset(images, labels, k, {"source": str(d)})


def minibatches(dataset, batch_size: int, seed: int, epoch: int) -> list:
    """Index batches from a permutation determined by ``(seed, epoch)``; last batch may be short.

    ``dataset`` may be a :class:`Dataset` or an item count.
    """
    n_items = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, STREAM_DATA, epoch]).permutation(n_items)
    return [perm[i:i + batch_size] for i in range(0, n_items, batch_size)]
