"""Shared plumbing: image arrays, seeded random streams, the shapes dataset, PPM I/O.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` holding float64
intensities in ``[0, 1]``.  Use :func:`as_image` at API boundaries to validate
and freeze them.

Random streams
--------------
:class:`Rng` wraps numpy's ``PCG64`` bit generator.  The stream for a given
``(seed, label)`` pair is seeded through ``numpy.random.SeedSequence`` with
entropy ``[seed & 0xffffffff, seed >> 32, *utf8(label) packed as little-endian
uint32 words, len(label)]``.  Draws come from ``Generator.random`` (53-bit
doubles in ``[0, 1)``) and ``Generator.integers``; both are covered by numpy's
stream-compatibility policy for a fixed bit generator.  Reference vectors are
checked in under ``tests/data/rng_vectors.json``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Rng",
    "prng_new",
    "as_image",
    "Dataset",
    "gen_shapes_dataset",
    "write_ppm",
    "read_ppm",
    "save_dataset",
    "load_dataset",
    "SHAPE_NAMES",
]

_MASK32 = 0xFFFFFFFF


def _label_words(label: str) -> list[int]:
    raw = label.encode("utf-8")
    raw += b"\0" * (-len(raw) % 4)
    words = np.frombuffer(raw, dtype="<u4").tolist() if raw else []
    return words + [len(label)]


class Rng:
    """Deterministic random stream identified by ``(seed, stream_label)``.

    Single owner.  Parallel work should take a :meth:`child` stream per task
    rather than share one instance.
    """

    def __init__(self, seed: int, stream_label: str = ""):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.stream_label = stream_label
        entropy = [seed & _MASK32, seed >> 32, *_label_words(stream_label)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_label={self.stream_label!r})"

    def child(self, label: str) -> "Rng":
        """Independent stream derived from this one's identity, not its state."""
        return Rng(self.seed, f"{self.stream_label}/{label}")

    def uniform_f64(self, size=None):
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None):
        return low + (high - low) * self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def normal(self, scale: float = 1.0, size=None):
        return self._gen.normal(0.0, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def prng_new(seed: int, stream_label: str) -> Rng:
    return Rng(seed, stream_label)


def as_image(arr) -> np.ndarray:
    """Validate an ``(H, W, C)`` intensity array and return a read-only float64 copy.

    Raises ``ValueError`` for the wrong rank, a channel count other than 1 or 3,
    non-finite entries, or any intensity outside ``[0, 1]``.
    """
    img = np.array(arr, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must have shape (H, W, C), got {img.shape}")
    if img.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {img.shape[2]}")
    if img.size and not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite intensities")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError(f"intensities must lie in [0, 1], got [{img.min()}, {img.max()}]")
    img.flags.writeable = False
    return img


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, H, W, C)
    labels: np.ndarray  # (N,)
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.class_count)


# foreground offset from the background base colour, per channel
FG_CONTRAST = (0.25, 0.4)

SHAPE_NAMES = ("disk", "frame", "cross", "hstripes", "triangle", "ring", "vstripes", "checker")


def _shape_mask(kind: int, yy, xx, cy, cx, r, phase):
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return dy * dy + dx * dx <= r * r
    if kind == 1:
        edge = np.maximum(np.abs(dy), np.abs(dx))
        return (edge <= 0.9 * r) & (edge >= 0.55 * r)
    if kind == 2:
        arm = 0.32 * r
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return inside & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    if kind == 3:
        period = max(r * 0.7, 3.0)
        band = np.floor((dy + phase * period) / (period / 2.0)) % 2 == 0
        return band & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == 4:
        return (dy <= 0.8 * r) & (dy >= -r) & (np.abs(dx) <= 0.5 * (dy + r))
    if kind == 5:
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == 6:
        period = max(r * 0.7, 3.0)
        band = np.floor((dx + phase * period) / (period / 2.0)) % 2 == 0
        return band & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == 7:
        cell = max(r * 0.5, 2.0)
        chk = (np.floor(dy / cell) + np.floor(dx / cell)) % 2 == 0
        return chk & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    raise ValueError(f"no pattern for class {kind}")


def _render(kind: int, side: int, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    base = rng.uniform(0.25, 0.75, 3)
    tilt = rng.uniform(-0.15, 0.15, (2, 3))
    bg = base + tilt[0] * (yy[..., None] / side - 0.5) + tilt[1] * (xx[..., None] / side - 0.5)

    r = rng.uniform(0.22, 0.34) * side
    cy, cx = rng.uniform(0.5 * side - 0.18 * side, 0.5 * side + 0.18 * side, 2)
    phase = rng.uniform_f64()
    mask = _shape_mask(kind, yy, xx, cy, cx, r, phase)

    # brighter or darker than the background in every channel
    polarity = 1.0 if base.mean() < 0.5 else -1.0
    fg = np.clip(base + polarity * rng.uniform(*FG_CONTRAST, 3), 0.0, 1.0)
    img = np.where(mask[..., None], fg, bg)
    img = img + rng.normal(0.03, img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_shapes_dataset(n: int, class_count: int, side: int, rng: Rng) -> Dataset:
    """``n`` procedural ``side x side x 3`` images, one pattern family per class.

    Labels cycle through the classes in a seeded random order; every image gets
    its own child stream so the dataset is a pure function of ``rng``'s identity.
    """
    if n <= 0:
        raise ValueError("empty dataset requested (n = 0)")
    if not 2 <= class_count <= len(SHAPE_NAMES):
        raise ValueError(f"class_count must be in [2, {len(SHAPE_NAMES)}]")
    if side < 16:
        raise ValueError("side must be at least 16 pixels")
    labels = np.arange(n) % class_count
    labels = labels[rng.child("labels").permutation(n)]
    images = np.empty((n, side, side, 3))
    for i in range(n):
        images[i] = _render(int(labels[i]), side, rng.child(f"img{i}"))
    return Dataset(images, labels.astype(np.int64), class_count)


def write_ppm(img, path) -> None:
    """Binary P6, maxval 255, round-half-up quantisation."""
    img = as_image(img)
    if img.shape[2] != 3:
        raise ValueError("PPM output needs 3 channels")
    h, w, _ = img.shape
    data = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ValueError("malformed PPM: truncated header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"malformed PPM: magic {tokens[0]!r}, expected b'P6'")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError("malformed PPM: non-integer header field") from exc
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}")
    if w <= 0 or h <= 0:
        raise ValueError("malformed PPM: non-positive size")
    raster = buf[offset : offset + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError("malformed PPM: raster shorter than header claims")
    data = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return as_image(data / 255.0)


def save_dataset(data: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = len(str(max(len(data) - 1, 0)))
    with open(directory / "index.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["filename", "label"])
        for i, (img, label) in enumerate(zip(data.images, data.labels)):
            name = f"img_{i:0{width}d}.ppm"
            write_ppm(img, directory / name)
            out.writerow([name, int(label)])


def load_dataset(directory, class_count: int | None = None) -> Dataset:
    directory = Path(directory)
    index = directory / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"{index} not found")
    images, labels = [], []
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["filename", "label"]:
            raise ValueError(f"index.csv must have columns filename,label; got {reader.fieldnames}")
        for row in reader:
            images.append(read_ppm(directory / os.path.basename(row["filename"])))
            labels.append(int(row["label"]))
    if not images:
        raise ValueError("empty dataset directory")
    k = class_count if class_count is not None else max(labels) + 1
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), k)
