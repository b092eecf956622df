"""Datasets: loaders, standardization, splits, samplers, and generators.

All features are dense float64 arrays, all targets are {0, 1} integer
vectors.  File loaders fail loudly with the offending line or cell in the
message.  The fetcher resolves names through a JSON-able registry, caches
downloads atomically, and verifies checksums when the registry carries one.
"""

from __future__ import annotations

import csv as _csv
import hashlib
import math
import os
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

__all__ = [
    "Dataset",
    "LabeledBatch",
    "SplitSpec",
    "StandardizeStats",
    "BatchSampler",
    "sample_batch",
    "load_libsvm",
    "load_csv",
    "standardize",
    "split_dataset",
    "synth_universal_batch",
    "synth_toy_1d",
    "synth_two_cluster",
    "DEFAULT_REGISTRY",
    "load_registry",
    "default_cache_dir",
    "fetch_file",
    "fetch_dataset",
    "FetchError",
    "ChecksumError",
    "UnknownDatasetError",
]

CACHE_ENV_VAR = "LOSSNETS_CACHE"


@dataclass
class Dataset:
    """Dense feature matrix with binary targets."""

    features: np.ndarray
    targets: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.targets.shape != (self.features.shape[0],):
            raise ValueError(
                f"targets shape {self.targets.shape} does not match "
                f"{self.features.shape[0]} feature rows"
            )
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if not np.isin(self.targets, (0, 1)).all():
            raise ValueError("targets must take values in {0, 1}")
        self.targets = self.targets.astype(np.int64)

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def positive_fraction(self):
        return float(self.targets.mean())

    def subset(self, idx, name=None):
        return Dataset(
            features=self.features[idx],
            targets=self.targets[idx],
            name=self.name if name is None else name,
        )


class LabeledBatch(NamedTuple):
    features: np.ndarray
    targets: np.ndarray


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )


def _map_label(token, where):
    if token in ("1", "+1", "1.0"):
        return 1
    if token in ("0", "-1", "0.0", "-1.0"):
        return 0
    raise ValueError(f"{where}: label {token!r} is not one of -1/0/+1")


def load_libsvm(path, n_features=None):
    """Parse a sparse label index:value text file into a dense Dataset.

    Indices are 1-based; labels -1/0 map to 0 and +1/1 map to 1.  Malformed
    lines raise with their line number.  Feature count defaults to the
    largest index seen; rows are zero-padded.
    """
    path = Path(path)
    targets = []
    rows = []
    max_index = 0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            where = f"{path.name} line {lineno}"
            targets.append(_map_label(tokens[0], where))
            entries = {}
            for token in tokens[1:]:
                try:
                    idx_str, val_str = token.split(":", 1)
                    idx = int(idx_str)
                    val = float(val_str)
                except ValueError as exc:
                    raise ValueError(f"{where}: bad feature entry {token!r}") from exc
                if idx < 1:
                    raise ValueError(f"{where}: feature index {idx} is not 1-based")
                if idx in entries:
                    raise ValueError(f"{where}: duplicate feature index {idx}")
                entries[idx] = val
                max_index = max(max_index, idx)
            rows.append(entries)
    if not rows:
        raise ValueError(f"{path.name}: no data lines")
    if n_features is None:
        n_features = max_index
    elif max_index > n_features:
        raise ValueError(
            f"{path.name}: feature index {max_index} exceeds n_features={n_features}"
        )
    features = np.zeros((len(rows), n_features), dtype=np.float64)
    for i, entries in enumerate(rows):
        for idx, val in entries.items():
            features[i, idx - 1] = val
    return Dataset(features=features, targets=np.array(targets), name=path.stem)


def load_csv(path, target_column):
    """Load a numeric CSV with a header row; one column holds the targets.

    Non-numeric cells raise with their row number and column name.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = _csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path.name}: empty file") from None
        if target_column not in header:
            raise ValueError(
                f"{path.name}: target column {target_column!r} not in header {header}"
            )
        t_col = header.index(target_column)
        feature_cols = [j for j in range(len(header)) if j != t_col]
        targets = []
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path.name} row {rowno}: {len(row)} cells, header has {len(header)}"
                )
            where = f"{path.name} row {rowno}"
            targets.append(_map_label(row[t_col].strip(), f"{where}, column {target_column!r}"))
            values = []
            for j in feature_cols:
                cell = row[j].strip()
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{where}, column {header[j]!r}: non-numeric cell {cell!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise ValueError(f"{path.name}: no data rows")
    return Dataset(
        features=np.array(rows, dtype=np.float64),
        targets=np.array(targets),
        name=path.stem,
    )


@dataclass(frozen=True)
class StandardizeStats:
    mean: np.ndarray
    std: np.ndarray


def standardize(train, *others):
    """Zero-mean unit-variance features fit on the training set only.

    Constant columns are left untouched (their recorded mean is 0 and std
    is 1).  Returns the transformed datasets followed by the fitted stats.
    """
    x = train.features
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std == 0.0
    mean = np.where(constant, 0.0, mean)
    std = np.where(constant, 1.0, std)
    stats = StandardizeStats(mean=mean, std=std)

    def apply(ds):
        return Dataset(
            features=(ds.features - mean) / std,
            targets=ds.targets,
            name=ds.name,
        )

    transformed = [apply(train)] + [apply(ds) for ds in others]
    return (*transformed, stats)


def split_dataset(dataset, spec=SplitSpec()):
    """Seeded shuffle split into (train, test) by spec.train_fraction."""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(round(n * spec.train_fraction))
    n_train = min(max(n_train, 1), n - 1)
    return (
        dataset.subset(perm[:n_train], name=f"{dataset.name}-train"),
        dataset.subset(perm[n_train:], name=f"{dataset.name}-test"),
    )


class BatchSampler:
    """Stratified sampling with replacement: ceil(B/2) positives per batch.

    Construction fails if either class pool is empty.
    """

    def __init__(self, targets, batch_size, rng):
        targets = np.asarray(targets)
        self.pos_idx = np.flatnonzero(targets == 1)
        self.neg_idx = np.flatnonzero(targets == 0)
        if self.pos_idx.size == 0 or self.neg_idx.size == 0:
            raise ValueError(
                "cannot stratify: class pools have "
                f"{self.pos_idx.size} positive and {self.neg_idx.size} negative rows"
            )
        if batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {batch_size}")
        self.batch_size = int(batch_size)
        self.n_pos = math.ceil(self.batch_size / 2)
        self.n_neg = self.batch_size - self.n_pos
        self.rng = rng

    def sample_indices(self):
        pos = self.rng.choice(self.pos_idx, size=self.n_pos, replace=True)
        neg = self.rng.choice(self.neg_idx, size=self.n_neg, replace=True)
        return np.concatenate([pos, neg])


def sample_batch(sampler, dataset):
    """Draw one stratified batch of features and targets from dataset."""
    idx = sampler.sample_indices()
    return LabeledBatch(features=dataset.features[idx], targets=dataset.targets[idx])


def synth_universal_batch(n, rng, p=0.5, mu=0.0, sigma=1.0):
    """Synthetic (targets, scores): Bernoulli(p) labels, Normal(mu, sigma) scores."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    y = (rng.random(n) < p).astype(np.int64)
    scores = rng.normal(mu, sigma, size=n)
    return y, scores


def synth_toy_1d(n, rng):
    """Balanced 1-D toy set: negatives ~ N(0.5, 0.55^2), positives ~ N(3, 0.55^2).

    Sized so the threshold model alpha*x - 1 has its optimum near alpha=0.57,
    well separated from the alpha=0.3 starting point and from the all-negative
    plateau below alpha~0.22, with small but nonzero optimal error.
    """
    n_pos = n // 2
    n_neg = n - n_pos
    x_neg = rng.normal(0.5, 0.55, size=n_neg)
    x_pos = rng.normal(3.0, 0.55, size=n_pos)
    features = np.concatenate([x_neg, x_pos])[:, None]
    targets = np.concatenate([np.zeros(n_neg, dtype=np.int64), np.ones(n_pos, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(features=features[perm], targets=targets[perm], name="toy-1d")


def synth_two_cluster(n, rng, n_features=5, pos_fraction=0.3, separation=2.5):
    """Two overlapping isotropic Gaussian blobs with class imbalance.

    Negatives sit at the origin, positives at distance `separation`; unit
    variance in every coordinate gives partial overlap.
    """
    if not 0.0 < pos_fraction < 1.0:
        raise ValueError(f"pos_fraction must be in (0, 1), got {pos_fraction}")
    n_pos = int(round(n * pos_fraction))
    n_neg = n - n_pos
    offset = separation / math.sqrt(n_features)
    x_neg = rng.normal(0.0, 1.0, size=(n_neg, n_features))
    x_pos = rng.normal(offset, 1.0, size=(n_pos, n_features))
    features = np.vstack([x_neg, x_pos])
    targets = np.concatenate([np.zeros(n_neg, dtype=np.int64), np.ones(n_pos, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(features=features[perm], targets=targets[perm], name="two-cluster")


# -- fetching ----------------------------------------------------------------


class FetchError(RuntimeError):
    """Download failed (network, HTTP, or local IO)."""


class ChecksumError(FetchError):
    """Downloaded payload does not match the registry checksum."""


class UnknownDatasetError(KeyError):
    """Dataset name missing from the registry."""


# name -> url / sha256 (None: trust) / format ("libsvm" | "csv") / target column
DEFAULT_REGISTRY = {
    "a9a": {
        "url": "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/a9a",
        "sha256": None,
        "format": "libsvm",
    },
    "w8a": {
        "url": "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/w8a",
        "sha256": None,
        "format": "libsvm",
    },
}


def load_registry(path):
    """Read a JSON registry file mapping names to url/sha256/format entries."""
    import json

    with open(path, "r", encoding="utf-8") as f:
        registry = json.load(f)
    for name, entry in registry.items():
        if "url" not in entry or "format" not in entry:
            raise ValueError(f"registry entry {name!r} needs 'url' and 'format'")
    return registry


def default_cache_dir():
    """Cache directory, overridable through the LOSSNETS_CACHE variable."""
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "lossnets"


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def fetch_file(name, registry=None, cache_dir=None, timeout=60.0):
    """Download (or reuse) the raw file behind a registry name.

    Writes to a temporary file in the cache directory, verifies the sha256
    when the registry pins one, and renames into place atomically.  A cached
    file with a matching checksum is returned without touching the network.
    """
    registry = DEFAULT_REGISTRY if registry is None else registry
    if name not in registry:
        raise UnknownDatasetError(
            f"unknown dataset {name!r}; registry has {sorted(registry)}"
        )
    entry = registry[name]
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cache.mkdir(parents=True, exist_ok=True)
    suffix = Path(entry["url"]).suffix
    target = cache / f"{name}{suffix}"
    expected = entry.get("sha256")
    if target.exists():
        if expected is None or _sha256(target) == expected:
            return target
        target.unlink()
    fd, tmp_name = tempfile.mkstemp(prefix=f".{name}-", dir=cache)
    tmp = Path(tmp_name)
    try:
        try:
            with open(fd, "wb") as out, urllib.request.urlopen(
                entry["url"], timeout=timeout
            ) as resp:
                while True:
                    chunk = resp.read(1 << 20)
                    if not chunk:
                        break
                    out.write(chunk)
                out.flush()
                os.fsync(out.fileno())
        except (urllib.error.URLError, OSError) as exc:
            raise FetchError(f"download of {name!r} from {entry['url']} failed: {exc}") from exc
        if expected is not None:
            actual = _sha256(tmp)
            if actual != expected:
                raise ChecksumError(
                    f"{name!r}: sha256 mismatch (expected {expected}, got {actual})"
                )
        os.replace(tmp, target)
    finally:
        if tmp.exists():
            tmp.unlink()
    return target


def fetch_dataset(name, registry=None, cache_dir=None, timeout=60.0):
    """Fetch a registry dataset and load it per its declared format."""
    registry = DEFAULT_REGISTRY if registry is None else registry
    path = fetch_file(name, registry=registry, cache_dir=cache_dir, timeout=timeout)
    entry = registry[name]
    fmt = entry["format"]
    if fmt == "libsvm":
        ds = load_libsvm(path)
    elif fmt == "csv":
        ds = load_csv(path, entry["target"])
    else:
        raise ValueError(f"registry entry {name!r} has unsupported format {fmt!r}")
    ds.name = name
    return ds
