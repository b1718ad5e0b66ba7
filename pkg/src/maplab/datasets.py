"""Dataset loading, normalization, IPC subsampling and epoch batching.

Images are held as one ``(N, H, W, C)`` float32 array with values in [0, 1];
``indices`` carries each sample's original identifier so subsets keep
provenance.
"""
import hashlib
import logging
import pickle
import shutil
import tarfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DatasetLoadError, InsufficientSamplesError, IntegrityError

log = logging.getLogger(__name__)

DATASET_NAMES = ("cifar10", "cifar100", "tiny-imagenet", "synthetic-blobs")

_NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "tiny-imagenet": 200}
_IMAGE_SHAPE = {"cifar10": (32, 32, 3), "cifar100": (32, 32, 3), "tiny-imagenet": (64, 64, 3)}

ARCHIVES = {
    "cifar10": (
        "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
        "c58f30108f718f92721af3b95e74349a",
    ),
    "cifar100": (
        "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz",
        "eb9058c3a382ffc7106e4002c42a8d85",
    ),
}


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: str = "data"
    split: str = "train"
    num_classes: int = None
    image_shape: tuple = None
    # synthetic-blobs only
    n: int = 300
    seed: int = 0
    spread: float = 0.15

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"unknown dataset {self.name!r}; expected one of {DATASET_NAMES}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", _NUM_CLASSES.get(self.name, 3))
        if self.image_shape is None:
            object.__setattr__(self, "image_shape", _IMAGE_SHAPE.get(self.name, (8, 8, 3)))
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))


class Sample(NamedTuple):
    index: int
    image: np.ndarray
    label: int


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    num_classes: int
    name: str = ""
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.indices)):
            raise IntegrityError("images, labels and indices differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise IntegrityError(
                f"labels outside [0, {self.num_classes}) in {self.name}/{self.split}"
            )
        if len(np.unique(self.indices)) != len(self.indices):
            raise IntegrityError("duplicate sample indices")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return Sample(int(self.indices[i]), self.images[i], int(self.labels[i]))

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        return ImageDataset(
            self.images[positions],
            self.labels[positions],
            self.indices[positions],
            self.num_classes,
            self.name,
            self.split,
        )


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple
    std: tuple

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std must be positive in every channel, got {self.std}")
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std lengths differ")

    @classmethod
    def from_dataset(cls, dataset):
        flat = dataset.images.reshape(-1, dataset.images.shape[-1]).astype(np.float64)
        return cls(tuple(float(v) for v in flat.mean(axis=0)), tuple(float(v) for v in flat.std(axis=0)))

    @classmethod
    def identity(cls, channels=3):
        return cls((0.0,) * channels, (1.0,) * channels)

    def as_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}


def normalize(image, stats):
    """Per-channel ``(x - mean) / std`` over the trailing channel axis."""
    image = np.asarray(image)
    if image.shape[-1] != len(stats.mean):
        raise ValueError(
            f"image has {image.shape[-1]} channels, stats have {len(stats.mean)}"
        )
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return ((image - mean) / std).astype(np.float32, copy=False)


def denormalize(image, stats):
    image = np.asarray(image)
    if image.shape[-1] != len(stats.mean):
        raise ValueError(
            f"image has {image.shape[-1]} channels, stats have {len(stats.mean)}"
        )
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return (image * std + mean).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# loaders


def load_dataset(spec):
    """Load every sample of ``spec.split`` in canonical order."""
    if spec.name == "synthetic-blobs":
        ds = _synthetic_blobs(spec)
    elif spec.name == "cifar10":
        ds = _load_cifar(spec, "cifar-10-batches-py", b"labels")
    elif spec.name == "cifar100":
        ds = _load_cifar(spec, "cifar-100-python", b"fine_labels")
    else:
        ds = _load_tiny_imagenet(spec)
    if ds.num_classes != spec.num_classes:
        raise IntegrityError(f"{spec.name}: expected {spec.num_classes} classes, got {ds.num_classes}")
    if ds.image_shape != spec.image_shape:
        raise IntegrityError(f"{spec.name}: expected image shape {spec.image_shape}, got {ds.image_shape}")
    return ds


def _synthetic_blobs(spec):
    # Class centres are drawn from the base seed so train and test share them;
    # the split only changes the per-sample draws.
    k = spec.num_classes
    h, w, c = spec.image_shape
    centres = np.random.default_rng([spec.seed, 0]).uniform(0.2, 0.8, size=(k, c))
    rng = np.random.default_rng([spec.seed, 1 if spec.split == "train" else 2])
    per_class = np.full(k, spec.n // k)
    per_class[: spec.n % k] += 1
    labels = np.repeat(np.arange(k), per_class)
    colours = centres[labels] + rng.normal(0.0, spec.spread, size=(spec.n, c))
    colours = np.clip(colours, 0.0, 1.0).astype(np.float32)
    images = np.broadcast_to(colours[:, None, None, :], (spec.n, h, w, c)).copy()
    return ImageDataset(images, labels, np.arange(spec.n), k, spec.name, spec.split)


def _unpickle(path):
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="bytes")
    except FileNotFoundError as exc:
        raise DatasetLoadError("missing dataset file", path) from exc
    except (pickle.UnpicklingError, EOFError, ValueError) as exc:
        raise DatasetLoadError(f"corrupt dataset file: {exc}", path) from exc


def _load_cifar(spec, folder, label_key):
    base = Path(spec.root) / folder
    if spec.name == "cifar10":
        names = [f"data_batch_{i}" for i in range(1, 6)] if spec.split == "train" else ["test_batch"]
    else:
        names = ["train" if spec.split == "train" else "test"]
    data, labels = [], []
    for name in names:
        path = base / name
        batch = _unpickle(path)
        try:
            raw = np.asarray(batch[b"data"], dtype=np.uint8)
            lab = np.asarray(batch[label_key], dtype=np.int64)
        except KeyError as exc:
            raise DatasetLoadError(f"corrupt dataset file: missing key {exc}", path) from exc
        if raw.ndim != 2 or raw.shape[1] != 3072 or len(raw) != len(lab):
            raise DatasetLoadError(f"corrupt dataset file: data shape {raw.shape}", path)
        data.append(raw)
        labels.append(lab)
    raw = np.concatenate(data)
    labels = np.concatenate(labels)
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise IntegrityError(f"{spec.name}: label out of range [0, {spec.num_classes})")
    images = raw.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return ImageDataset(images, labels, np.arange(len(labels)), spec.num_classes, spec.name, spec.split)


def _load_tiny_imagenet(spec):
    from PIL import Image

    base = Path(spec.root) / "tiny-imagenet-200"
    wnids_path = base / "wnids.txt"
    if not wnids_path.exists():
        raise DatasetLoadError("missing dataset file", wnids_path)
    wnids = wnids_path.read_text().split()
    lookup = {w: i for i, w in enumerate(wnids)}
    files = []
    if spec.split == "train":
        for wnid in wnids:
            folder = base / "train" / wnid / "images"
            files.extend((p, lookup[wnid]) for p in sorted(folder.glob("*.JPEG")))
    else:
        # the labelled validation split doubles as the test split
        ann = base / "val" / "val_annotations.txt"
        if not ann.exists():
            raise DatasetLoadError("missing dataset file", ann)
        for line in ann.read_text().splitlines():
            parts = line.split("\t")
            if len(parts) < 2:
                continue
            if parts[1] not in lookup:
                raise IntegrityError(f"unknown class id {parts[1]} in {ann}")
            files.append((base / "val" / "images" / parts[0], lookup[parts[1]]))
        files.sort(key=lambda item: item[0].name)
    h, w, c = spec.image_shape
    images = np.empty((len(files), h, w, c), dtype=np.float32)
    for i, (path, _) in enumerate(files):
        try:
            with Image.open(path) as im:
                images[i] = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            raise DatasetLoadError(f"corrupt image: {exc}", path) from exc
    labels = np.array([lab for _, lab in files], dtype=np.int64)
    return ImageDataset(images, labels, np.arange(len(files)), len(wnids), spec.name, spec.split)


def fetch(name, root, url=None, md5=None):
    """Download and unpack a dataset archive, verifying its MD5 first."""
    if url is None:
        if name not in ARCHIVES:
            raise ConfigError(f"no archive registered for {name!r}")
        url, md5 = ARCHIVES[name]
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    target = root / url.rsplit("/", 1)[-1]
    if not target.exists():
        log.info("downloading %s", url)
        with urllib.request.urlopen(url) as resp, open(target, "wb") as fh:
            shutil.copyfileobj(resp, fh)
    digest = hashlib.md5(target.read_bytes()).hexdigest()
    if md5 is not None and digest != md5:
        target.unlink()
        raise DatasetLoadError(f"checksum mismatch: got {digest}, expected {md5}", target)
    with tarfile.open(target) as tar:
        tar.extractall(root)
    return target


# ---------------------------------------------------------------------------
# subsampling and batching


def subsample_ipc(dataset, ipc, seed):
    """Keep exactly ``ipc`` samples per class, drawn uniformly without replacement."""
    if ipc < 1:
        raise ValueError("ipc must be a positive integer")
    counts = dataset.class_counts()
    for klass, count in enumerate(counts):
        if count < ipc:
            raise InsufficientSamplesError(klass, int(count), ipc)
    rng = np.random.default_rng(seed)
    keep = []
    for klass in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == klass)
        keep.append(np.sort(rng.choice(members, size=ipc, replace=False)))
    return dataset.take(np.sort(np.concatenate(keep)))


def write_manifest(dataset, path):
    """One original index per line, for auditing which samples a run used."""
    Path(path).write_text("".join(f"{i}\n" for i in dataset.indices))


def read_manifest(path):
    return np.array([int(line) for line in Path(path).read_text().split()], dtype=np.int64)


def make_batches(n, batch_size, epoch_seed):
    """Shuffled drop-last batches of dataset positions for one epoch.

    Returns ``floor(n / batch_size)`` arrays of exactly ``batch_size``
    positions; the trailing remainder is not emitted.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(n) if hasattr(n, "__len__") else int(n)
    count = n // batch_size
    perm = np.random.default_rng(epoch_seed).permutation(n)
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(count)]


@dataclass
class DataBundle:
    """Train/test pair plus the normalization stats computed on the full train split."""

    train: ImageDataset
    test: ImageDataset
    stats: NormalizationStats = field(default=None)

    def __post_init__(self):
        if self.stats is None:
            self.stats = NormalizationStats.from_dataset(self.train)

    @property
    def num_classes(self):
        return self.train.num_classes

    @classmethod
    def load(cls, spec):
        from dataclasses import replace

        train = load_dataset(replace(spec, split="train"))
        test = load_dataset(replace(spec, split="test"))
        return cls(train, test)
