"""Datasets, train/test splitting, non-IID shard plans and obfuscation noise."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus integer labels.

    ``image_shape`` is set when features are a flattened grayscale grid; the
    backdoor patch and the optional convolutional model need it.
    """

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
            raise DatasetError(f"bad dataset shapes X={X.shape} y={y.shape}")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise DatasetError("label out of range")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.n_classes, self.image_shape)

    def replace(self, X: np.ndarray | None = None, y: np.ndarray | None = None) -> "Dataset":
        return Dataset(self.X if X is None else X, self.y if y is None else y, self.n_classes, self.image_shape)

    def to_bytes(self) -> bytes:
        """Binary cache format: a JSON header line followed by raw little-endian arrays."""
        header = {
            "n": len(self),
            "d": self.n_features,
            "classes": self.n_classes,
            "image_shape": list(self.image_shape) if self.image_shape else None,
        }
        buf = io.BytesIO()
        buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        buf.write(self.X.astype("<f8").tobytes())
        buf.write(self.y.astype("<i8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        head, _, body = blob.partition(b"\n")
        meta = json.loads(head)
        n, d = meta["n"], meta["d"]
        X = np.frombuffer(body[: n * d * 8], dtype="<f8").reshape(n, d)
        y = np.frombuffer(body[n * d * 8 : n * d * 8 + n * 8], dtype="<i8")
        shape = tuple(meta["image_shape"]) if meta["image_shape"] else None
        return cls(X.copy(), y.copy(), meta["classes"], shape)


@dataclass
class ShardPlan:
    shard_size: int
    shards: list[list[int]] = field(default_factory=list)
    # per shard: the label-concentrated half followed by the label-uniform half
    concentrated: list[list[int]] = field(default_factory=list)
    uniform: list[list[int]] = field(default_factory=list)

    @property
    def shard_count(self) -> int:
        return len(self.shards)

    def to_json(self) -> str:
        return json.dumps(
            {"shard_size": self.shard_size, "shards": self.shards,
             "concentrated": self.concentrated, "uniform": self.uniform},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ShardPlan":
        raw = json.loads(text)
        return cls(raw["shard_size"], raw["shards"], raw["concentrated"], raw["uniform"])


def load_digits_dataset() -> Dataset:
    """The 8x8 handwritten digit set bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    return Dataset(raw.data / 16.0, raw.target, 10, (8, 8))


def make_blobs_dataset(n_samples: int = 1800, n_features: int = 16, n_classes: int = 10,
                       spread: float = 1.0, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 2.0, size=(n_classes, n_features))
    y = np.arange(n_samples) % n_classes
    X = centers[y] + rng.normal(0.0, spread, size=(n_samples, n_features))
    return Dataset(X, y, n_classes)


def load_dataset(name: str, seed: int = 0) -> Dataset:
    if name == "digits":
        return load_digits_dataset()
    if name == "blobs":
        return make_blobs_dataset(seed=seed)
    path = Path(name)
    if path.suffix == ".csv":
        return read_csv(path)
    if path.exists():
        return Dataset.from_bytes(path.read_bytes())
    raise DatasetError(f"unknown dataset {name!r}")


def read_csv(path: str | Path, n_classes: int | None = None) -> Dataset:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append(row)
    arr = np.array(rows, dtype=np.float64)
    y = arr[:, -1].astype(np.int64)
    return Dataset(arr[:, :-1], y, n_classes or int(y.max()) + 1)


def write_csv(data: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for x, y in zip(data.X, data.y):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def split_train_test(data: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError("train_fraction must be in (0, 1)")
    n_train = int(round(len(data) * train_fraction))
    if n_train == 0 or n_train == len(data):
        raise DatasetError(f"dataset of {len(data)} samples is too small to split at {train_fraction}")
    perm = np.random.default_rng([seed, 0x5711]).permutation(len(data))
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


def build_non_iid_shards(train: Dataset, shard_count: int, seed: int,
                         shard_size: int | None = None) -> ShardPlan:
    """Half label-sorted, half uniformly drawn samples per shard.

    The sample pool is split into two equal halves. The first half is sorted by
    label and cut into ``shard_count`` contiguous chunks; the second half is
    shuffled and cut the same way. Shard ``i`` merges concentrated chunk ``i``
    with a randomly paired uniform chunk.

    Without ``shard_size`` the whole training set is the pool and must divide
    into ``2 * shard_count`` equal chunks. With it, a seeded subset of
    ``shard_count * shard_size`` samples is used.
    """
    if shard_count < 1:
        raise DatasetError("shard_count must be positive")
    rng = np.random.default_rng([seed, 0x54A2])
    n = len(train)
    if shard_size is None:
        if n % (2 * shard_count):
            required = (n // (2 * shard_count)) * 2 * shard_count
            raise DatasetError(
                f"{n} samples do not divide into {2 * shard_count} equal half-shards; "
                f"use {required} samples or pass shard_size")
        shard_size = n // shard_count
        pool = rng.permutation(n)
    else:
        if shard_size < 2 or shard_size % 2:
            raise DatasetError("shard_size must be an even number >= 2")
        if shard_count * shard_size > n:
            raise DatasetError(f"need {shard_count * shard_size} samples, have {n}")
        pool = rng.permutation(n)[: shard_count * shard_size]
    half = shard_size // 2
    first, second = pool[: shard_count * half], pool[shard_count * half :]
    # stable sort keeps the shuffled order inside each label
    first = first[np.argsort(train.y[first], kind="stable")]
    second = rng.permutation(second)
    conc = [first[i * half:(i + 1) * half] for i in range(shard_count)]
    unif = [second[i * half:(i + 1) * half] for i in range(shard_count)]
    pairing = rng.permutation(shard_count)
    plan = ShardPlan(shard_size=shard_size)
    for i in range(shard_count):
        c = [int(v) for v in conc[i]]
        u = [int(v) for v in unif[pairing[i]]]
        plan.concentrated.append(c)
        plan.uniform.append(u)
        plan.shards.append(c + u)
    return plan


def obfuscate(data: Dataset, noise_std: float, seed: int) -> Dataset:
    """Additive zero-mean Gaussian feature noise; labels are untouched."""
    if noise_std < 0:
        raise DatasetError("noise_std must be non-negative")
    if noise_std == 0:
        return data.replace(X=data.X.copy())
    rng = np.random.default_rng([seed, 0x0B5F])
    return data.replace(X=data.X + rng.normal(0.0, noise_std, size=data.X.shape))


def perturb_samples(data: Dataset, sample_fraction: float, noise_std: float, seed: int) -> Dataset:
    """Gaussian noise on a random fraction of samples (data-quality experiments)."""
    rng = np.random.default_rng([seed, 0xDA7A])
    n_hit = int(round(len(data) * sample_fraction))
    idx = rng.permutation(len(data))[:n_hit]
    X = data.X.copy()
    X[idx] += rng.normal(0.0, noise_std, size=(n_hit, data.n_features))
    return data.replace(X=X)
