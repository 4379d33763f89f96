"""Image datasets: CIFAR-10 from its published archives, or seeded synthetic images."""

from __future__ import annotations

import hashlib
import logging
import os
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np
import torch

from .errors import CorruptArchive, DatasetNotFound

log = logging.getLogger(__name__)

DATA_ENV = "LAYERED_JSCC_DATA"
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR_ARCHIVES = {
    "cifar-10-python.tar.gz": "c58f30108f718f92721af3b95e74349a",
    "cifar-10-binary.tar.gz": "c32a1d4ab5d03f1284b67883e8d87530",
}
CIFAR_BIN_RECORD = 1 + 32 * 32 * 3
CIFAR_VAL_SIZE = 5000


@dataclass
class ImageSet:
    """A split held in memory as ``(N, C, H, W)`` float32 pixels in [0, 1]."""

    images: torch.Tensor
    name: str = ""

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        _, c, h, w = self.images.shape
        return (h, w, c)

    def subset(self, count: Optional[int]) -> "ImageSet":
        if count is None or count >= len(self):
            return self
        return ImageSet(self.images[:count], self.name)

    def batches(self, batch_size: int, shuffle: bool = False,
                generator: Optional[torch.Generator] = None) -> Iterator[torch.Tensor]:
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            yield self.images[order[start:start + batch_size]]


def default_root() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "layered_jscc"))


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _to_unit(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def _read_python_batches(folder: Path, names) -> np.ndarray:
    out = []
    for name in names:
        path = folder / name
        try:
            with open(path, "rb") as f:
                entry = pickle.load(f, encoding="bytes")
            data = np.asarray(entry[b"data"], dtype=np.uint8)
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise CorruptArchive(f"unreadable CIFAR-10 batch {path}: {exc}") from exc
        if data.ndim != 2 or data.shape[1] != 3072:
            raise CorruptArchive(f"unexpected array shape {data.shape} in {path}")
        out.append(data.reshape(-1, 3, 32, 32))
    return np.concatenate(out)


def _read_binary_batches(folder: Path, names) -> np.ndarray:
    out = []
    for name in names:
        raw = np.fromfile(folder / name, dtype=np.uint8)
        if raw.size % CIFAR_BIN_RECORD:
            raise CorruptArchive(f"{folder / name} is not a whole number of CIFAR-10 records")
        # first byte of each record is the label
        out.append(raw.reshape(-1, CIFAR_BIN_RECORD)[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(out)


def _extract_archives(root: Path):
    for archive, digest in CIFAR_ARCHIVES.items():
        path = root / archive
        if not path.exists():
            continue
        folder = root / ("cifar-10-batches-py" if "python" in archive else "cifar-10-batches-bin")
        if folder.exists():
            continue
        if _md5(path) != digest:
            raise CorruptArchive(f"checksum mismatch for {path}")
        log.info("extracting %s", path)
        with tarfile.open(path, "r:gz") as tar:
            tar.extractall(root)


def download_cifar10(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    target = root / "cifar-10-python.tar.gz"
    try:
        urllib.request.urlretrieve(CIFAR_URL, target)
    except OSError as exc:
        target.unlink(missing_ok=True)
        raise DatasetNotFound(f"could not download CIFAR-10 into {root}: {exc}") from exc
    return target


def load_cifar10(root=None, download: bool = False, val_size: int = CIFAR_VAL_SIZE):
    """Train/validation/test splits of CIFAR-10 found under ``root``.

    Accepts the python or binary release, either as the original ``.tar.gz``
    (md5-verified, extracted in place) or already extracted.  The validation
    split is the last ``val_size`` training images.
    """
    root = Path(root) if root is not None else default_root()
    _extract_archives(root)
    py_dir, bin_dir = root / "cifar-10-batches-py", root / "cifar-10-batches-bin"
    train_names = [f"data_batch_{i}" for i in range(1, 6)]
    if py_dir.exists():
        try:
            train = _read_python_batches(py_dir, train_names)
            test = _read_python_batches(py_dir, ["test_batch"])
        except FileNotFoundError as exc:
            raise CorruptArchive(f"incomplete CIFAR-10 folder {py_dir}: {exc}") from exc
    elif bin_dir.exists():
        try:
            train = _read_binary_batches(bin_dir, [n + ".bin" for n in train_names])
            test = _read_binary_batches(bin_dir, ["test_batch.bin"])
        except FileNotFoundError as exc:
            raise CorruptArchive(f"incomplete CIFAR-10 folder {bin_dir}: {exc}") from exc
    elif download:
        download_cifar10(root)
        return load_cifar10(root, download=False, val_size=val_size)
    else:
        raise DatasetNotFound(f"no CIFAR-10 archive or extracted batches under {root} "
                              f"(set {DATA_ENV} or pass --download)")
    if train.shape[0] != 50000 or test.shape[0] != 10000:
        raise CorruptArchive(f"expected 50000/10000 images, found {train.shape[0]}/{test.shape[0]}")
    cut = train.shape[0] - val_size
    return (ImageSet(_to_unit(train[:cut]), "cifar10-train"),
            ImageSet(_to_unit(train[cut:]), "cifar10-val"),
            ImageSet(_to_unit(test), "cifar10-test"))


def synthetic_images(count: int, seed: int = 0, shape=(32, 32, 3), smoothness: float = 2.0) -> torch.Tensor:
    """Seeded smooth random fields with a natural-image-like ``1/f^a`` spectrum.

    Colour channels share a luminance field plus weaker independent chroma
    fields, so neighbouring pixels and channels are correlated as in photos.
    """
    h, w, c = shape
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    radius[0, 0] = 1.0 / max(h, w)
    envelope = radius ** (-smoothness / 1.0)

    def field(n):
        spec = (rng.standard_normal((n, h, w)) + 1j * rng.standard_normal((n, h, w))) * envelope
        f = np.fft.ifft2(spec).real
        f -= f.mean(axis=(1, 2), keepdims=True)
        return f / (f.std(axis=(1, 2), keepdims=True) + 1e-12)

    luma = field(count)[:, None]
    chroma = field(count * c).reshape(count, c, h, w)
    img = 0.8 * luma + 0.35 * chroma
    brightness = rng.uniform(0.35, 0.65, size=(count, 1, 1, 1))
    contrast = rng.uniform(0.10, 0.20, size=(count, 1, 1, 1))
    img = np.clip(brightness + contrast * img, 0.0, 1.0)
    return torch.from_numpy(img.astype(np.float32))


def load_synthetic(count: int = 256, seed: int = 0, val_fraction: float = 0.1,
                   test_count: Optional[int] = None, shape=(32, 32, 3)):
    """Synthetic stand-in with the same split structure as :func:`load_cifar10`."""
    test_count = max(1, count // 5) if test_count is None else test_count
    val = max(1, int(round(count * val_fraction)))
    pool = synthetic_images(count + test_count, seed, shape)
    cut = count - val
    return (ImageSet(pool[:cut], "synthetic-train"), ImageSet(pool[cut:count], "synthetic-val"),
            ImageSet(pool[count:], "synthetic-test"))


def load_dataset(name: str, root=None, download: bool = False, **options):
    """Dispatch on ``name`` (``"cifar10"`` or ``"synthetic"``)."""
    name = name.lower()
    if name in ("cifar10", "cifar-10"):
        return load_cifar10(root, download=download, **options)
    if name == "synthetic":
        return load_synthetic(**options)
    raise DatasetNotFound(f"unknown dataset {name!r}")
