"""Grouped tabular datasets: CSV ingestion, splits, synthetic generators, batches.

Canonical serialized form (``.iads``): one ASCII header line
``IADS1 <json>`` followed by little-endian float64 blocks in this order:
features (row-major n x d), labels (n), group (n), split codes (n). The json
carries n, d, task, feature names and provenance. The content hash is the
sha256 of the binary block together with the feature names and task, so a
load -> serialize -> load round trip reproduces it exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_CODES = {"train": TRAIN, "val": VAL, "test": TEST}
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


class DataError(ValueError):
    pass


@dataclass
class GroupedDataset:
    features: np.ndarray
    labels: np.ndarray
    group: np.ndarray
    split: np.ndarray
    feature_names: tuple[str, ...]
    task: str = "regression"
    source: str = "memory"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64).reshape(-1)
        self.group = np.ascontiguousarray(self.group, dtype=np.int8).reshape(-1)
        self.split = np.ascontiguousarray(self.split, dtype=np.int8).reshape(-1)
        self.feature_names = tuple(self.feature_names)
        n = self.labels.size
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataError(f"features must be (n, d) with n={n}, got {self.features.shape}")
        if self.group.size != n or self.split.size != n:
            raise DataError("group/split length differs from label length")
        if len(self.feature_names) != self.features.shape[1]:
            raise DataError("feature_names length differs from feature width")
        if not np.all(np.isin(self.group, (0, 1))):
            raise DataError("group index must be 0 or 1")
        if not np.all(np.isfinite(self.features)) or not np.all(np.isfinite(self.labels)):
            raise DataError("dataset contains missing or non-finite values")

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def mask(self, split: str | int | None = None, group: int | None = None) -> np.ndarray:
        m = np.ones(self.n, dtype=bool)
        if split is not None:
            m &= self.split == (SPLIT_CODES[split] if isinstance(split, str) else split)
        if group is not None:
            m &= self.group == group
        return m

    def part(self, split: str | int | None = None, group: int | None = None):
        m = self.mask(split, group)
        return self.features[m], self.labels[m]

    def _binary_block(self) -> bytes:
        return b"".join(
            a.astype("<f8").tobytes()
            for a in (self.features, self.labels, self.group.astype(np.float64), self.split.astype(np.float64))
        )

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.task.encode())
        h.update(json.dumps(list(self.feature_names)).encode())
        h.update(self._binary_block())
        return h.hexdigest()

    def split_hash(self) -> str:
        return hashlib.sha256(self.split.tobytes() + self.group.tobytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

MAGIC = "IADS1"


def save_dataset(ds: GroupedDataset, path) -> str:
    header = {
        "n": ds.n,
        "d": ds.dim,
        "task": ds.task,
        "feature_names": list(ds.feature_names),
        "source": ds.source,
        "content_hash": ds.content_hash,
    }
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {json.dumps(header, sort_keys=True)}\n".encode("utf-8"))
        fh.write(ds._binary_block())
    return ds.content_hash


def load_dataset(path) -> GroupedDataset:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    magic, _, meta = raw[:nl].decode("utf-8").partition(" ")
    if magic != MAGIC:
        raise DataError(f"{path}: not a serialized dataset")
    meta = json.loads(meta)
    n, d = meta["n"], meta["d"]
    body = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    if body.size != n * d + 3 * n:
        raise DataError(f"{path}: expected {n * d + 3 * n} values, found {body.size}")
    feats = body[: n * d].reshape(n, d)
    rest = body[n * d :]
    ds = GroupedDataset(
        feats.copy(),
        rest[:n].copy(),
        rest[n : 2 * n].astype(np.int8),
        rest[2 * n :].astype(np.int8),
        tuple(meta["feature_names"]),
        meta["task"],
        meta.get("source", str(path)),
    )
    if meta.get("content_hash") and meta["content_hash"] != ds.content_hash:
        raise DataError(f"{path}: content hash mismatch")
    return ds


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


@dataclass
class CsvSchema:
    """Column roles for a CSV file.

    ``group_positive`` is the raw cell value (compared as a string) mapped to
    group 1; every other value maps to group 0. ``features`` defaults to all
    columns except label, group and ``drop``.
    """

    label: str
    group: str
    group_positive: str
    task: str = "regression"
    features: list[str] | None = None
    drop: list[str] = field(default_factory=list)
    label_scale: float = 1.0
    positive_label: str | None = None
    name: str = "csv"

    @classmethod
    def from_json(cls, path) -> "CsvSchema":
        data = json.loads(Path(path).read_text())
        data.pop("description", None)
        try:
            return cls(**data)
        except TypeError as exc:
            raise DataError(f"{path}: bad schema: {exc}") from None


def load_csv(
    path,
    schema: CsvSchema,
    fractions: Sequence[float] | None = DEFAULT_FRACTIONS,
    seed: int = 0,
    standardize_features: bool = True,
) -> GroupedDataset:
    """Parse, split (stratified by group) and standardize on train statistics.

    ``fractions=None`` leaves every row in the train split.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(c.strip() for c in r)]

    for col in (schema.label, schema.group):
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    if schema.features is not None:
        feat_cols = list(schema.features)
        missing = [c for c in feat_cols if c not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
    else:
        skip = {schema.label, schema.group, *schema.drop}
        feat_cols = [c for c in header if c not in skip]
    idx = {c: header.index(c) for c in header}

    n = len(rows)
    if n == 0:
        raise DataError(f"{path}: no data rows")
    feats = np.empty((n, len(feat_cols)))
    labels = np.empty(n)
    group = np.empty(n, dtype=np.int8)
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        for j, col in enumerate(feat_cols):
            feats[r - 2, j] = _to_float(row[idx[col]], path, r, col)
        cell = row[idx[schema.label]].strip()
        if schema.task == "binary_classification":
            if schema.positive_label is not None:
                labels[r - 2] = 1.0 if cell == schema.positive_label else -1.0
            else:
                v = _to_float(cell, path, r, schema.label)
                if v not in (-1.0, 1.0, 0.0):
                    raise DataError(f"{path}: row {r}, column {schema.label!r}: label {cell!r} not binary")
                labels[r - 2] = 1.0 if v == 1.0 else -1.0
        else:
            labels[r - 2] = _to_float(cell, path, r, schema.label) / schema.label_scale
        group[r - 2] = 1 if row[idx[schema.group]].strip() == schema.group_positive else 0

    for g in (0, 1):
        if not np.any(group == g):
            raise DataError(
                f"{path}: group {g} is empty (value {schema.group_positive!r} in column {schema.group!r})"
            )
    ds = GroupedDataset(
        feats, labels, group, np.zeros(n, dtype=np.int8), tuple(feat_cols), schema.task, f"csv:{schema.name}"
    )
    if fractions is not None:
        ds = split(ds, fractions, seed)
    if standardize_features:
        ds = standardize(ds)
    return ds


def _to_float(cell: str, path, row: int, col: str) -> float:
    cell = cell.strip()
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {row}, column {col!r}: missing or non-finite value {cell!r}")
    return v


def standardize(ds: GroupedDataset) -> GroupedDataset:
    """Zero-mean / unit-variance features using train-split statistics only.

    Constant columns are centred and left unscaled.
    """
    train = ds.features[ds.split == TRAIN]
    if train.shape[0] == 0:
        raise DataError("cannot standardize: empty train split")
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return replace(ds, features=(ds.features - mu) / sd)


def train_statistics(ds: GroupedDataset) -> tuple[np.ndarray, np.ndarray]:
    train = ds.features[ds.split == TRAIN]
    return train.mean(axis=0), train.std(axis=0)


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(ds: GroupedDataset, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> GroupedDataset:
    """Group-stratified train/val/test assignment, deterministic under ``seed``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    codes = np.empty(ds.n, dtype=np.int8)
    for g in (0, 1):
        idx = np.flatnonzero(ds.group == g)
        counts = _largest_remainder(idx.size, fractions)
        for code, (c, f) in enumerate(zip(counts, fractions)):
            if f > 0 and c == 0:
                raise DataError(
                    f"group {g} has {idx.size} rows, too few to place one in every split {fractions}"
                )
        perm = rng.permutation(idx)
        bounds = np.cumsum([0] + counts)
        for code in range(3):
            codes[perm[bounds[code] : bounds[code + 1]]] = code
    return replace(ds, split=codes)


# --------------------------------------------------------------------------
# Synthetic generators
# --------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Two-group linear data with a shared signal block and a spurious block.

    Features are ``[shared (d_s), spurious (d_p)]``, all N(0, 1) except that
    group 1's shared block is shifted by ``group_shift`` (different label
    distributions per group, sufficiency still attainable; the FAIR
    constructor uses no shift, so group and label are uncorrelated). Labels::

        y = c.x_shared + b.(g * x_spur + (1 - g) * xi) + noise

    with ``xi`` an unobserved N(0, I) draw when ``match_variance`` is set (so
    dropping the spurious block leaves Y | x_shared identically distributed in
    both groups), or zero otherwise. ``bias_coef`` all zero gives the
    FAIR-REALIZABLE regime; non-zero gives BIASED.

    Labels are computed from the raw draws; the stored features are then
    multiplied by ``feature_scale``. A small scale keeps the learned embedding
    small relative to the heads, which is the regime where a head-distance
    penalty acts on the representation instead of being absorbed by a rescale.
    """

    seed: int = 0
    n_per_group: int = 1000
    shared_coef: list[float] = field(default_factory=lambda: [1.0, -0.5, 0.75, 0.5])
    bias_coef: list[float] = field(default_factory=lambda: [1.0, -1.0])
    noise: float = 0.1
    group_shift: float = 0.5
    match_variance: bool = True
    feature_scale: float = 1.0
    task: str = "regression"
    fractions: list[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    name: str | None = None

    @classmethod
    def fair(cls, seed: int = 0, **kw) -> "SyntheticSpec":
        kw.setdefault("bias_coef", [0.0, 0.0])
        kw.setdefault("group_shift", 0.0)
        return cls(seed=seed, **kw)

    @classmethod
    def biased(cls, seed: int = 0, **kw) -> "SyntheticSpec":
        return cls(seed=seed, **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        regime = data.pop("regime", None)
        if regime == "fair":
            data["bias_coef"] = [0.0] * len(data.get("bias_coef", [0.0, 0.0]))
            data.setdefault("group_shift", 0.0)
        elif regime not in (None, "biased"):
            raise DataError(f"unknown regime {regime!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise DataError(f"bad synthetic spec: {exc}") from None

    @property
    def regime(self) -> str:
        return "fair" if not np.any(self.bias_coef) else "biased"

    @property
    def input_dim(self) -> int:
        return len(self.shared_coef) + len(self.bias_coef)

    def to_dict(self) -> dict:
        return asdict(self)


def gen_synthetic(spec: SyntheticSpec) -> GroupedDataset:
    if spec.n_per_group < 2:
        raise DataError("n_per_group must be at least 2")
    if spec.task not in ("regression", "binary_classification"):
        raise DataError(f"unknown task {spec.task!r}")
    if spec.noise < 0:
        raise DataError("noise must be non-negative")
    if not (spec.feature_scale > 0 and np.isfinite(spec.feature_scale)):
        raise DataError("feature_scale must be a finite value > 0")
    rng = np.random.default_rng(spec.seed)
    c = np.asarray(spec.shared_coef, dtype=np.float64)
    b = np.asarray(spec.bias_coef, dtype=np.float64)
    ds_, dp = c.size, b.size
    n = spec.n_per_group
    blocks, labels, groups = [], [], []
    for g in (0, 1):
        xs = rng.normal(size=(n, ds_)) + g * spec.group_shift
        xp = rng.normal(size=(n, dp))
        xi = rng.normal(size=(n, dp)) if spec.match_variance else np.zeros((n, dp))
        eps = rng.normal(scale=spec.noise, size=n)
        y = xs @ c + (g * xp + (1 - g) * xi) @ b + eps
        if spec.task == "binary_classification":
            y = np.where(y > 0, 1.0, -1.0)
        blocks.append(spec.feature_scale * np.hstack([xs, xp]))
        labels.append(y)
        groups.append(np.full(n, g, dtype=np.int8))
    names = [f"s{i}" for i in range(ds_)] + [f"p{i}" for i in range(dp)]
    source = spec.name or f"synthetic:{spec.regime}"
    ds = GroupedDataset(
        np.vstack(blocks), np.concatenate(labels), np.concatenate(groups), np.zeros(2 * n, dtype=np.int8),
        tuple(names), spec.task, source,
    )
    return split(ds, spec.fractions, spec.seed)


# --------------------------------------------------------------------------
# Mini-batches
# --------------------------------------------------------------------------


class BatchStream:
    """Endless paired per-group batches drawn with replacement.

    Each step yields ``((x0, y0), (x1, y1))`` with exactly ``size_per_group``
    rows per group. Independent instances with the same seed produce the same
    sequence.
    """

    def __init__(self, ds: GroupedDataset, split_name: str, size_per_group: int, seed: int):
        if size_per_group < 1:
            raise DataError("size_per_group must be positive")
        self.size = int(size_per_group)
        self.rng = np.random.default_rng(seed)
        self.parts = []
        for g in (0, 1):
            x, y = ds.part(split_name, g)
            if y.size == 0:
                raise DataError(f"group {g} is empty in split {split_name!r}")
            self.parts.append((x, y))

    def __iter__(self) -> Iterator:
        return self

    def next_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(self.rng.integers(0, y.size, size=self.size) for _, y in self.parts)

    def __next__(self):
        i0, i1 = self.next_indices()
        (x0, y0), (x1, y1) = self.parts
        return (x0[i0], y0[i0]), (x1[i1], y1[i1])


def batches(ds: GroupedDataset, split_name: str, size_per_group: int, seed: int) -> BatchStream:
    return BatchStream(ds, split_name, size_per_group, seed)
