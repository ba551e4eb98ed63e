"""MNIST IDX ingestion, synthetic bar images, checkpoints and CSV helpers."""
from __future__ import annotations

import csv
import gzip
import hashlib
import io
import logging
import math
import os
import shutil
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Rng

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DEFAULT_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"

# Digests of the canonical gzip files. Entries carry "sha256" when known;
# the MD5 values are the ones published with the common MNIST mirrors.
MNIST_FILES = {
    "train-images-idx3-ubyte.gz": {"md5": "f68b3c2dcbeaaa9fbdd348bbdeb94873"},
    "train-labels-idx1-ubyte.gz": {"md5": "d53e105ee54ea40749a09fcbcd1e9432"},
    "t10k-images-idx3-ubyte.gz": {"md5": "9fb629c4189551a2d022fa330f9573f3"},
    "t10k-labels-idx1-ubyte.gz": {"md5": "ec29112dd5afa0611ce80d1b7f02629c"},
}

SPLITS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(Exception):
    """Malformed or missing data files."""


class IdxFormatError(DataError):
    pass


class DigestMismatch(DataError):
    pass


@dataclass
class Dataset:
    """Images ``[N, 1, 28, 28]`` in ``[0, 1]`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def head(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


def _open(path: Path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path) -> tuple[int, np.ndarray]:
    """Parse an unsigned-byte IDX file; returns ``(magic, array)``."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: not an unsigned-byte IDX file (magic {magic:#010x})")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise IdxFormatError(f"{path}: expected {count} data bytes, found {len(raw) - head}")
    return magic, np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "") -> Dataset:
    img_magic, imgs = read_idx(images_path)
    if img_magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: expected magic {IMAGES_MAGIC} (0x00000803), found {img_magic}")
    lab_magic, labs = read_idx(labels_path)
    if lab_magic != LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: expected magic {LABELS_MAGIC} (0x00000801), found {lab_magic}")
    if imgs.shape[1:] != (28, 28):
        raise IdxFormatError(f"{images_path}: expected 28x28 images, got {imgs.shape[1:]}")
    if imgs.shape[0] != labs.shape[0]:
        raise IdxFormatError(f"{imgs.shape[0]} images but {labs.shape[0]} labels")
    return Dataset(imgs[:, None].astype(np.float64) / 255.0, labs.astype(np.int64), split)


def _find(data_dir: Path, stem: str) -> Path:
    for cand in (data_dir / stem, data_dir / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise DataError(f"{stem}[.gz] not found in {data_dir}; run `gabornet fetch-data --data-dir {data_dir}`")


def load_mnist(data_dir, split: str) -> Dataset:
    data_dir = Path(data_dir)
    images, labels = SPLITS[split]
    return load_mnist_idx(_find(data_dir, images), _find(data_dir, labels), split)


def mnist_available(data_dir) -> bool:
    try:
        for stems in SPLITS.values():
            for stem in stems:
                _find(Path(data_dir), stem)
    except DataError:
        return False
    return True


def file_digest(path, algo: str) -> str:
    h = hashlib.new(algo)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify(path, expected: dict) -> bool:
    for algo in ("sha256", "md5"):
        if algo in expected:
            return file_digest(path, algo) == expected[algo]
    raise DataError(f"no pinned digest for {path}")


def fetch_mnist(dest_dir, base_url: str = DEFAULT_BASE_URL, files: dict | None = None) -> dict[str, Path]:
    """Download, verify and decompress the MNIST files into ``dest_dir``.

    Files already present and matching their pinned digests are not fetched
    again. A download that fails verification is deleted before raising.
    """
    files = MNIST_FILES if files is None else files
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, digest in files.items():
        gz = dest / name
        if not (gz.exists() and verify(gz, digest)):
            url = base_url.rstrip("/") + "/" + name
            part = gz.with_suffix(gz.suffix + ".part")
            log.info("downloading %s", url)
            try:
                with urllib.request.urlopen(url, timeout=60) as resp, open(part, "wb") as fh:
                    shutil.copyfileobj(resp, fh)
            except OSError as e:
                part.unlink(missing_ok=True)
                raise DataError(f"download of {url} failed: {e}") from e
            if not verify(part, digest):
                part.unlink()
                raise DigestMismatch(f"{name}: downloaded file does not match its pinned digest")
            part.replace(gz)
        raw = dest / name[:-3] if name.endswith(".gz") else gz
        if raw != gz and not raw.exists():
            with gzip.open(gz, "rb") as src, open(raw, "wb") as dst:
                shutil.copyfileobj(src, dst)
        out[name] = raw
    return out


def synthetic_bars(n: int, k_classes: int = 4, seed: int = 0, size: int = 28, split: str = "synthetic") -> Dataset:
    """Images with one anti-aliased bar whose angle encodes the class.

    Class ``c`` draws a bar at angle ``c*pi/k_classes`` (class 0 horizontal)
    through a point jittered around the centre, then adds N(0, 0.05) noise and
    clips to ``[0, 1]``.
    """
    if n < k_classes:
        raise ValueError(f"need at least one image per class: n={n} < k={k_classes}")
    rng = Rng(seed)
    labels = np.arange(n) % k_classes
    labels = labels[rng.permutation(n)]
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        angle = lab * math.pi / k_classes
        off = rng.uniform(-4.0, 4.0, 2)
        half_len = rng.uniform(7.0, 11.0)
        dx, dy = xx - (c + off[0]), yy - (c + off[1])
        along = dx * math.cos(angle) + dy * math.sin(angle)
        across = -dx * math.sin(angle) + dy * math.cos(angle)
        bar = np.clip(1.5 - np.abs(across), 0.0, 1.0) * np.clip(half_len + 0.5 - np.abs(along), 0.0, 1.0)
        noisy = bar + rng.normal(0.0, 0.05, (size, size))
        images[i, 0] = np.clip(noisy, 0.0, 1.0)
    return Dataset(images, labels, split)


# ------------------------------------------------------------------ CSV

def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6f}"
    return str(x)


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header: list[str], rows: list[list]) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def append_csv_row(path, header: list[str], row: list) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerow([fmt(v) for v in row])


def default_data_dir() -> Path:
    return Path(os.environ.get("GABOR_DATA_DIR", "data"))
