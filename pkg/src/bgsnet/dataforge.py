"""Feature datasets, attribute tables, seen/unseen splits and episode sampling.

On-disk layout of a dataset is three files:

* features (binary, little-endian): ``b"BGSF"``, u32 version (=1), u32 n,
  u32 K, then ``n*K`` float32 values row-major, then ``n`` u32 labels.
* attributes (CSV): header ``class_id,a_0,...,a_{d-1}``, one row per class.
* splits (JSON): ``seen``, ``unseen``, ``train_idx``, ``test_seen_idx``,
  ``test_unseen_idx``.

Features are stored as float32 and promoted to float64 on load.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SamplingError, ValidationError
from .numkit import make_rng

MAGIC = b"BGSF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class AttributeTable:
    class_ids: np.ndarray  # sorted, unique, int64
    rows: np.ndarray  # (num_classes, d) float64, aligned with class_ids

    def __post_init__(self):
        ids = np.asarray(self.class_ids, dtype=np.int64)
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != ids.shape[0]:
            raise ValidationError(f"{ids.shape[0]} class ids but rows shape {rows.shape}")
        if rows.shape[1] < 1:
            raise ValidationError("attribute dimension must be >= 1")
        if np.unique(ids).size != ids.size:
            raise ValidationError("duplicate class id in attribute table")
        order = np.argsort(ids, kind="stable")
        object.__setattr__(self, "class_ids", ids[order])
        object.__setattr__(self, "rows", np.ascontiguousarray(rows[order]))
        self.class_ids.setflags(write=False)
        self.rows.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return int(self.class_ids.size)

    @property
    def d(self) -> int:
        return int(self.rows.shape[1])

    def index_of(self, class_ids) -> np.ndarray:
        ids = np.asarray(class_ids, dtype=np.int64)
        pos = np.searchsorted(self.class_ids, ids)
        pos_c = np.clip(pos, 0, max(self.num_classes - 1, 0))
        if self.num_classes == 0 or np.any(self.class_ids[pos_c] != ids):
            raise ValidationError("class id missing from attribute table")
        return pos_c

    def phi(self, class_ids) -> np.ndarray:
        """Attribute matrix for the given class ids, in the given order."""
        return self.rows[self.index_of(class_ids)]


@dataclass(frozen=True)
class SplitSpec:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]
    train_idx: np.ndarray
    test_seen_idx: np.ndarray
    test_unseen_idx: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "seen", tuple(sorted(int(c) for c in self.seen)))
        object.__setattr__(self, "unseen", tuple(sorted(int(c) for c in self.unseen)))
        for name in ("train_idx", "test_seen_idx", "test_unseen_idx"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if set(self.seen) & set(self.unseen):
            raise ValidationError("seen and unseen class sets overlap")

    def to_json(self) -> dict:
        return {
            "seen": list(self.seen),
            "unseen": list(self.unseen),
            "train_idx": self.train_idx.tolist(),
            "test_seen_idx": self.test_seen_idx.tolist(),
            "test_unseen_idx": self.test_unseen_idx.tolist(),
        }


@dataclass(frozen=True)
class FeatureDataset:
    features: np.ndarray  # (n, K) float64
    labels: np.ndarray  # (n,) int64
    split: SplitSpec

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValidationError(f"features {x.shape} vs {y.shape[0]} labels")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        validate(self)

    @property
    def K(self) -> int:
        return int(self.features.shape[1])

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.features[idx], self.labels[idx]


def validate(ds: FeatureDataset, attrs: AttributeTable | None = None) -> None:
    split = ds.split
    known = set(split.seen) | set(split.unseen)
    if not set(np.unique(ds.labels).tolist()) <= known:
        raise ValidationError("label outside seen/unseen splits")
    for name in ("train_idx", "test_seen_idx", "test_unseen_idx"):
        idx = getattr(split, name)
        if idx.size and (idx.min() < 0 or idx.max() >= ds.n):
            raise ValidationError(f"{name} has an index outside [0, {ds.n})")
    seen = np.array(split.seen, dtype=np.int64)
    unseen = np.array(split.unseen, dtype=np.int64)
    if not np.isin(ds.labels[split.train_idx], seen).all():
        raise ValidationError("train_idx contains unseen-class instances")
    if not np.isin(ds.labels[split.test_seen_idx], seen).all():
        raise ValidationError("test_seen_idx contains unseen-class instances")
    if not np.isin(ds.labels[split.test_unseen_idx], unseen).all():
        raise ValidationError("test_unseen_idx contains seen-class instances")
    if attrs is not None:
        attrs.index_of(sorted(known))


# --------------------------------------------------------------------------- io


def save_dataset(ds: FeatureDataset, attrs: AttributeTable, features_path, attributes_path,
                 splits_path) -> None:
    with open(features_path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, ds.n, ds.K))
        fh.write(ds.features.astype("<f4").tobytes(order="C"))
        fh.write(ds.labels.astype("<u4").tobytes())

    with open(attributes_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id"] + [f"a_{j}" for j in range(attrs.d)])
        for cid, row in zip(attrs.class_ids, attrs.rows):
            writer.writerow([int(cid)] + [repr(float(v)) for v in row])

    with open(splits_path, "w") as fh:
        json.dump(ds.split.to_json(), fh)
        fh.write("\n")


def read_features(path) -> tuple[np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * k + 4 * n
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    off = _HEADER.size
    feats = np.frombuffer(blob, dtype="<f4", count=n * k, offset=off).reshape(n, k)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off + 4 * n * k)
    return feats.astype(np.float64), labels.astype(np.int64)


def read_attributes(path) -> AttributeTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty attributes file") from None
        d = len(header) - 1
        if d < 1 or header != ["class_id"] + [f"a_{j}" for j in range(d)]:
            raise FormatError(f"{path}: bad header {header}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise FormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(rec)}")
            try:
                ids.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return AttributeTable(np.array(ids, dtype=np.int64), np.array(rows).reshape(len(ids), d))


def read_splits(path) -> SplitSpec:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    keys = {"seen", "unseen", "train_idx", "test_seen_idx", "test_unseen_idx"}
    if not isinstance(obj, dict) or set(obj) != keys:
        raise FormatError(f"{path}: splits must have exactly the keys {sorted(keys)}")
    for k in keys:
        if not isinstance(obj[k], list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in obj[k]
        ):
            raise FormatError(f"{path}: {k} must be a list of integers")
    return SplitSpec(**obj)


def load_dataset(features_path, attributes_path,
                 splits_path) -> tuple[FeatureDataset, AttributeTable]:
    feats, labels = read_features(features_path)
    attrs = read_attributes(attributes_path)
    split = read_splits(splits_path)
    ds = FeatureDataset(feats, labels, split)
    validate(ds, attrs)
    return ds, attrs


# ------------------------------------------------------------------- synthetic


def synth_dataset(num_seen: int, num_unseen: int, per_class: int, K: int, d: int,
                  noise_sigma: float, seed: int,
                  holdout: float = 0.2) -> tuple[FeatureDataset, AttributeTable]:
    """Linear attribute-to-feature world with Gaussian noise.

    Class ids ``0..num_seen-1`` are seen, the next ``num_unseen`` unseen.
    Every class mean is ``P @ phi(c)`` for one fixed random projection ``P``
    (K x d, entries N(0, 1/d)); instances add N(0, noise_sigma^2) noise.
    A ``holdout`` fraction of every seen class goes to ``test_seen_idx``.
    """
    for name, v in (("num_seen", num_seen), ("num_unseen", num_unseen),
                    ("per_class", per_class), ("K", K), ("d", d)):
        if v < 1:
            raise ValidationError(f"{name} must be >= 1, got {v}")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    rng = make_rng(seed)
    n_cls = num_seen + num_unseen
    attrs = rng.uniform(0.0, 1.0, size=(n_cls, d))
    proj = rng.normal(0.0, 1.0 / np.sqrt(d), size=(K, d))
    means = attrs @ proj.T

    labels = np.repeat(np.arange(n_cls, dtype=np.int64), per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.size, K))
    feats = means[labels] + noise_sigma * noise

    n_hold = int(round(holdout * per_class))
    train, test_seen = [], []
    for c in range(num_seen):
        idx = c * per_class + rng.permutation(per_class)
        test_seen.append(np.sort(idx[:n_hold]))
        train.append(np.sort(idx[n_hold:]))
    test_unseen = np.arange(num_seen * per_class, n_cls * per_class, dtype=np.int64)
    split = SplitSpec(
        seen=tuple(range(num_seen)),
        unseen=tuple(range(num_seen, n_cls)),
        train_idx=np.concatenate(train),
        test_seen_idx=np.concatenate(test_seen),
        test_unseen_idx=test_unseen,
    )
    return FeatureDataset(feats, labels, split), AttributeTable(np.arange(n_cls), attrs)


# -------------------------------------------------------------------- episodes


@dataclass(frozen=True)
class EpisodeConfig:
    way: int = 10
    shot: int = 5
    query: int = 3

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.query < 1:
            raise ValidationError(f"invalid episode config {self}")


@dataclass(frozen=True)
class Episode:
    tr_x: np.ndarray
    tr_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    tr_classes: tuple[int, ...]
    val_classes: tuple[int, ...]


def sample_episode(ds: FeatureDataset, cfg: EpisodeConfig, rng: np.random.Generator) -> Episode:
    """Draw ``2*way`` distinct seen classes; the first half supplies ``shot``
    training instances each, the second half ``query`` validation instances."""
    train_idx = ds.split.train_idx
    train_labels = ds.labels[train_idx]
    by_class = {c: train_idx[train_labels == c] for c in ds.split.seen}
    need = max(cfg.shot, cfg.query)
    eligible = [c for c in ds.split.seen if by_class[c].size >= need]
    if len(eligible) < 2 * cfg.way:
        raise SamplingError(
            f"need {2 * cfg.way} seen classes with >= {need} training instances, "
            f"found {len(eligible)}"
        )
    chosen = rng.choice(np.array(eligible, dtype=np.int64), size=2 * cfg.way, replace=False)
    tr_cls, val_cls = chosen[: cfg.way], chosen[cfg.way:]

    def draw(classes, count):
        picks = [rng.choice(by_class[int(c)], size=count, replace=False) for c in classes]
        idx = np.concatenate(picks)
        return ds.features[idx], ds.labels[idx]

    tr_x, tr_y = draw(tr_cls, cfg.shot)
    val_x, val_y = draw(val_cls, cfg.query)
    return Episode(tr_x, tr_y, val_x, val_y,
                   tuple(int(c) for c in tr_cls), tuple(int(c) for c in val_cls))
