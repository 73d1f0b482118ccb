"""Labeled feature-vector datasets: file ingestion, class-disjoint splits and
synthetic clustered data.

Two on-disk formats are supported.

CSV::

    dim=<D>
    example_id,class_id,v0,...,v{D-1}

Binary (all little-endian)::

    b"SGV1" | u32 D | u64 count | count x (u16 id_len | id bytes | u32 class_id | D x f32)
"""
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from ._io import Reader, atomic_write
from .errors import DimensionError, FormatError, SplitError

BINARY_MAGIC = b"SGV1"
FORMATS = ("csv", "binary")


class LabeledExample(NamedTuple):
    example_id: str
    class_id: int
    features: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable set of labeled feature vectors.

    Features are held as a read-only ``(N, dimension)`` float64 array; labels
    as an int64 array aligned with ``ids``.
    """

    dimension: int
    ids: tuple
    labels: np.ndarray
    features: np.ndarray
    class_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise DimensionError(f"dimension must be positive, got {self.dimension}")
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.size == 0:
            feats = feats.reshape(0, self.dimension)
        if feats.ndim != 2 or feats.shape[1] != self.dimension:
            raise DimensionError(f"features of shape {feats.shape} do not have width {self.dimension}")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1).copy()
        ids = tuple(str(i) for i in self.ids)
        if feats.shape[0] != len(ids) or labels.shape[0] != len(ids):
            raise DimensionError(
                f"ids ({len(ids)}), labels ({labels.shape[0]}) and features ({feats.shape[0]}) disagree"
            )
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain NaN or Inf")
        if labels.size and labels.min() < 0:
            raise ValueError("class ids must be non-negative")
        if len(set(ids)) != len(ids):
            raise FormatError("example ids are not unique")
        feats.setflags(write=False)
        labels.setflags(write=False)
        index = {}
        for i, c in enumerate(labels.tolist()):
            index.setdefault(c, []).append(i)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "class_index", {c: tuple(v) for c, v in index.items()})

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.ids[i], int(self.labels[i]), self.features[i])

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self.ids == other.ids
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    @property
    def examples(self) -> list:
        return list(self)

    @property
    def classes(self) -> list:
        """Class ids in order of first appearance."""
        return list(self.class_index)

    @property
    def n_classes(self) -> int:
        return len(self.class_index)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.dimension,
            tuple(self.ids[i] for i in idx.tolist()),
            self.labels[idx],
            self.features[idx],
        )

    def select_classes(self, class_ids) -> "Dataset":
        """Sub-dataset holding all examples of ``class_ids``, original row order kept."""
        wanted = set(class_ids)
        return self.subset([i for i, c in enumerate(self.labels.tolist()) if c in wanted])


def infer_format(path) -> str:
    return "csv" if os.fspath(path).lower().endswith(".csv") else "binary"


def load_dataset(path, format: str | None = None) -> Dataset:
    fmt = format or infer_format(path)
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def save_dataset(ds: Dataset, path, format: str | None = None) -> None:
    fmt = format or infer_format(path)
    if fmt == "csv":
        _save_csv(ds, path)
    elif fmt == "binary":
        _save_binary(ds, path)
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def _parse_header(line: str) -> int:
    key, sep, value = line.strip().partition("=")
    if sep != "=" or key.strip() != "dim":
        raise FormatError(f"expected 'dim=<D>' header, got {line.strip()!r}")
    try:
        dim = int(value)
    except ValueError:
        raise FormatError(f"bad dimension in header: {value!r}") from None
    if dim < 1:
        raise FormatError(f"dimension must be positive, got {dim}")
    return dim


def _load_csv(path) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file")
    dim = _parse_header(lines[0])
    ids, labels, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise FormatError(f"{path}:{lineno}: blank line")
        parts = line.rstrip("\r").split(",")
        if len(parts) - 2 != dim:
            raise DimensionError(f"{path}:{lineno}: row has {len(parts) - 2} values, header says {dim}")
        try:
            class_id = int(parts[1])
            values = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if class_id < 0:
            raise FormatError(f"{path}:{lineno}: negative class id {class_id}")
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"{path}:{lineno}: non-finite feature value")
        ids.append(parts[0])
        labels.append(class_id)
        rows.append(values)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return Dataset(dim, tuple(ids), np.array(labels, dtype=np.int64), features)


def _save_csv(ds: Dataset, path) -> None:
    with atomic_write(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"dim={ds.dimension}\n")
        for eid, c, row in zip(ds.ids, ds.labels.tolist(), ds.features):
            if "," in eid or "\n" in eid:
                raise FormatError(f"example id {eid!r} cannot be written to CSV")
            fh.write(eid + "," + str(c) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def _load_binary(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    r = Reader(data, what=str(path))
    if r.take(4) != BINARY_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {BINARY_MAGIC!r}")
    dim = r.u32()
    count = r.u64()
    if dim < 1:
        raise FormatError(f"{path}: dimension must be positive")
    ids, labels = [], []
    features = np.empty((count, dim), dtype=np.float64)
    row_bytes = 4 * dim
    for i in range(count):
        n = r.u16()
        try:
            ids.append(r.take(n).decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"{path}: record {i} id is not UTF-8") from None
        labels.append(r.u32())
        features[i] = np.frombuffer(r.take(row_bytes), dtype="<f4")
    if not r.at_end():
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    if not np.all(np.isfinite(features)):
        raise ValueError(f"{path}: non-finite feature value")
    return Dataset(dim, tuple(ids), np.array(labels, dtype=np.int64), features)


def _save_binary(ds: Dataset, path) -> None:
    with atomic_write(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IQ", ds.dimension, len(ds)))
        f32 = ds.features.astype("<f4")
        for eid, c, row in zip(ds.ids, ds.labels.tolist(), f32):
            raw = eid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"example id too long ({len(raw)} bytes)")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", c))
            fh.write(row.tobytes())


def _class_counts(n_classes: int, fractions) -> list:
    # largest-remainder rounding so the counts always sum to n_classes
    raw = [f * n_classes for f in fractions]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n_classes - sum(counts)]:
        counts[k] += 1
    return counts


def split_dataset(ds: Dataset, class_fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Split into (train, val, bench) datasets that share no class.

    Classes are shuffled with ``seed`` and cut by ``class_fractions``; row
    order within each split follows the source dataset.
    """
    fractions = tuple(float(f) for f in class_fractions)
    if len(fractions) != 3:
        raise ValueError("class_fractions must have three entries (train, val, bench)")
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    classes = sorted(ds.class_index)
    counts = _class_counts(len(classes), fractions)
    for name, f, n in zip(("train", "val", "bench"), fractions, counts):
        if f > 0 and n == 0:
            raise SplitError(f"{name} fraction {f} yields no classes out of {len(classes)}")
    perm = np.random.default_rng(seed).permutation(len(classes))
    shuffled = [classes[i] for i in perm.tolist()]
    a, b = counts[0], counts[0] + counts[1]
    groups = (shuffled[:a], shuffled[a:b], shuffled[b:])
    return tuple(ds.select_classes(g) for g in groups)


def generate_synthetic(
    n_classes: int,
    per_class: int,
    dim: int,
    intra_spread: float,
    inter_spread: float,
    seed: int = 0,
) -> Dataset:
    """Isotropic Gaussian clusters: one center per class drawn as
    N(0, inter_spread^2 I), and examples drawn around it as N(center, intra_spread^2 I).
    """
    if n_classes < 1 or per_class < 1:
        raise ValueError("n_classes and per_class must be at least 1")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    if not (intra_spread > 0 and inter_spread > 0):
        raise ValueError("spreads must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, inter_spread, size=(n_classes, dim))
    noise = rng.normal(0.0, intra_spread, size=(n_classes, per_class, dim))
    features = (centers[:, None, :] + noise).reshape(n_classes * per_class, dim)
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    width = len(str(n_classes - 1))
    ids = tuple(f"c{c:0{width}d}_{k}" for c in range(n_classes) for k in range(per_class))
    return Dataset(dim, ids, labels, features)
