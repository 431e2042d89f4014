"""Dataset loading, cleaning, min-max scaling, splitting and synthesis."""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError, PreconditionError, ShapeError
from .numcore import RngState, as_matrix

__all__ = [
    "Dataset",
    "ScalerParams",
    "SplitSpec",
    "SyntheticSpec",
    "DEFAULT_SENTINEL",
    "load_csv",
    "save_csv",
    "load_binary",
    "save_binary",
    "load_dataset",
    "drop_unlabeled",
    "fit_scaler",
    "apply_scaler",
    "split",
    "generate_synthetic",
]

DEFAULT_SENTINEL = -1
LMLD_MAGIC = b"LMLD"
LMLD_VERSION = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix (N x d, float64) plus integer labels."""

    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {feats.shape}")
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != feats.shape[0]:
            raise ShapeError(
                f"{labels.shape[0]} labels for {feats.shape[0]} feature rows")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n_samples

    def take(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], name or self.name)


@dataclass(frozen=True, eq=False)
class ScalerParams:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.minimum, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.maximum, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ShapeError("scaler minimum and maximum differ in length")
        if np.any(lo > hi):
            raise PreconditionError("scaler minimum exceeds maximum")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    @property
    def dim(self) -> int:
        return self.minimum.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    test_fraction: float
    holdout_fraction: float = 0.0
    seed: int = 42

    def __post_init__(self):
        fracs = (self.train_fraction, self.test_fraction, self.holdout_fraction)
        if any(not (0.0 <= f <= 1.0) for f in fracs):
            raise PreconditionError(f"split fractions must lie in [0, 1]: {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise PreconditionError(f"split fractions must sum to 1: {fracs}")

    @classmethod
    def from_label(cls, label: str, seed: int = 42) -> "SplitSpec":
        """Parse ``"30/30"`` style labels; the holdout takes the remainder."""
        tr, te = (int(p) for p in label.split("/"))
        return cls(tr / 100, te / 100, (100 - tr - te) / 100, seed)

    @property
    def label(self) -> str:
        return f"{round(self.train_fraction * 100)}/{round(self.test_fraction * 100)}"


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale stand-in for a static malware feature corpus.

    Rows are generated from ``n_factors`` hidden factors. Each class is a
    mixture of ``clusters_per_class`` Gaussian clusters in factor space
    (think malware families vs. benign software families) whose centres sit
    at ``+-class_separation / 2`` on every factor with random signs, so the
    class boundary is not linear. The factors are mixed into the
    ``n_informative`` leading columns through a random linear map with gain
    ``factor_gain`` plus ``noise_scale`` Gaussian noise, which gives those
    columns the correlated low-rank structure real static features have.
    The remaining columns are label-independent sparse noise: zero except
    for a ``background_density`` fraction of entries, like the many count
    and hashed-string features that are absent from most executables.
    Informative values and nonzero noise entries are squashed into (0, 1)
    by the logistic function.
    """

    n_samples: int = 5000
    feature_dim: int = 2381
    n_informative: int = 32
    class_separation: float = 2.0
    label_balance: float = 0.5
    clusters_per_class: int = 2
    n_factors: int = 4
    noise_scale: float = 0.3
    factor_gain: float = 6.0
    background_density: float = 0.05

    def __post_init__(self):
        if self.n_samples < 1 or self.feature_dim < 1:
            raise PreconditionError("n_samples and feature_dim must be positive")
        if not 0 <= self.n_informative <= self.feature_dim:
            raise PreconditionError("n_informative must lie in [0, feature_dim]")
        if self.class_separation < 0:
            raise PreconditionError("class_separation must be non-negative")
        if not 0.0 < self.label_balance < 1.0:
            raise PreconditionError("label_balance must lie in (0, 1)")
        if self.clusters_per_class < 1 or self.n_factors < 1:
            raise PreconditionError("clusters_per_class and n_factors must be >= 1")
        if self.noise_scale < 0 or self.factor_gain < 0:
            raise PreconditionError("noise_scale and factor_gain must be non-negative")
        if not 0.0 <= self.background_density <= 1.0:
            raise PreconditionError("background_density must lie in [0, 1]")


# -- ingestion ---------------------------------------------------------------

def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, label_column: int | str = -1, name: str | None = None) -> Dataset:
    """Read a comma-separated feature file.

    The first line is treated as a header when any of its cells is not
    numeric. ``label_column`` is a header name or a (possibly negative)
    column index.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = None
    if not all(_is_number(c) for c in rows[0]):
        header, rows = rows[0], rows[1:]
    width = len(header) if header is not None else (len(rows[0]) if rows else 0)
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise ParseError(f"{path}: no column named {label_column!r}")
        lab_idx = header.index(label_column)
    else:
        lab_idx = label_column if label_column >= 0 else width + label_column
        if not 0 <= lab_idx < width:
            raise ParseError(f"{path}: label column {label_column} out of range")

    feats = np.empty((len(rows), width - 1), dtype=np.float64)
    labels = np.empty(len(rows), dtype=np.int64)
    line_offset = 2 if header is not None else 1
    for i, row in enumerate(rows):
        lineno = i + line_offset
        if len(row) != width:
            raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
        try:
            labels[i] = int(row[lab_idx])
            vals = [float(c) for j, c in enumerate(row) if j != lab_idx]
        except ValueError as exc:
            raise ParseError(f"{path}: row {lineno}: {exc}") from None
        feats[i] = vals
    if not np.isfinite(feats).all():
        bad = int(np.nonzero(~np.isfinite(feats).all(axis=1))[0][0]) + line_offset
        raise ParseError(f"{path}: row {bad} contains a non-finite value")
    return Dataset(feats, labels, name or path.stem)


def save_csv(ds: Dataset, path) -> None:
    """Write features at 32-bit precision followed by a ``label`` column."""
    d = ds.feature_dim
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(d)] + ["label"])
        f32 = ds.features.astype(np.float32)
        for row, lab in zip(f32, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def save_binary(ds: Dataset, path, label_sentinel: int = DEFAULT_SENTINEL) -> None:
    """Write an LMLD file.

    Layout: ``b"LMLD"``, version byte, uint32 LE header length, UTF-8 JSON
    header ``{n, d, label_sentinel, name}``, n*d float32 LE features, n int8
    labels.
    """
    header = json.dumps(
        {"n": ds.n_samples, "d": ds.feature_dim,
         "label_sentinel": int(label_sentinel), "name": ds.name},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    if ds.labels.size and (ds.labels.min() < -128 or ds.labels.max() > 127):
        raise FormatError("labels do not fit in a signed byte")
    blob = b"".join([
        LMLD_MAGIC,
        bytes([LMLD_VERSION]),
        struct.pack("<I", len(header)),
        header,
        ds.features.astype("<f4").tobytes(),
        ds.labels.astype(np.int8).tobytes(),
    ])
    _atomic_write(Path(path), blob)


def read_binary_header(path) -> dict:
    with Path(path).open("rb") as fh:
        head = fh.read(9)
        if len(head) < 9 or head[:4] != LMLD_MAGIC:
            raise FormatError(f"{path}: not an LMLD file (bad magic)")
        if head[4] != LMLD_VERSION:
            raise FormatError(f"{path}: unsupported LMLD version {head[4]}")
        (hlen,) = struct.unpack("<I", head[5:9])
        raw = fh.read(hlen)
    if len(raw) != hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header JSON ({exc})") from None


def load_binary(path) -> Dataset:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 9 or blob[:4] != LMLD_MAGIC:
        raise FormatError(f"{path}: not an LMLD file (bad magic)")
    if blob[4] != LMLD_VERSION:
        raise FormatError(f"{path}: unsupported LMLD version {blob[4]}")
    (hlen,) = struct.unpack("<I", blob[5:9])
    off = 9 + hlen
    if len(blob) < off:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[9:off].decode("utf-8"))
        n, d = int(header["n"]), int(header["d"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from None
    need = off + 4 * n * d + n
    if len(blob) != need:
        raise FormatError(f"{path}: payload is {len(blob) - off} bytes, expected {need - off}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(blob, dtype=np.int8, count=n, offset=off + 4 * n * d)
    feats = feats.astype(np.float64)
    if not np.isfinite(feats).all():
        raise FormatError(f"{path}: non-finite feature values")
    return Dataset(feats, labels.astype(np.int64), str(header.get("name", path.stem)))


def load_dataset(path, fmt: str | None = None, label_column: int | str = -1) -> Dataset:
    """Dispatch on ``fmt`` (``"lmld"`` / ``"csv"``) or the file extension."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt in ("lmld", "bin"):
        return load_binary(path)
    if fmt == "csv":
        return load_csv(path, label_column)
    raise PreconditionError(f"unknown dataset format {fmt!r}")


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# -- cleaning and scaling ----------------------------------------------------

def drop_unlabeled(ds: Dataset, sentinel: int = DEFAULT_SENTINEL) -> Dataset:
    keep = np.nonzero(ds.labels != sentinel)[0]
    if keep.shape[0] == ds.n_samples:
        return ds
    return ds.take(keep)


def fit_scaler(train: Dataset) -> ScalerParams:
    if train.n_samples == 0:
        raise PreconditionError("cannot fit a scaler on an empty dataset")
    return ScalerParams(train.features.min(axis=0), train.features.max(axis=0))


def scale_matrix(params: ScalerParams, x: np.ndarray) -> np.ndarray:
    """Min-max scale rows of ``x``; constant columns map to 0, the rest are
    clamped to [0, 1]."""
    x = as_matrix(x, "features")
    if x.shape[1] != params.dim:
        raise ShapeError(f"scaler expects {params.dim} features, got {x.shape[1]}")
    span = params.maximum - params.minimum
    live = span > 0
    out = np.zeros_like(x)
    out[:, live] = (x[:, live] - params.minimum[live]) / span[live]
    np.clip(out, 0.0, 1.0, out=out)
    return out


def apply_scaler(params: ScalerParams, ds: Dataset) -> Dataset:
    return Dataset(scale_matrix(params, ds.features), ds.labels, ds.name)


# -- splitting ---------------------------------------------------------------

def _partition_sizes(n: int, spec: SplitSpec) -> tuple[int, int]:
    # the epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    n_train = int(math.floor(n * spec.train_fraction + 1e-9))
    n_test = int(math.floor(n * spec.test_fraction + 1e-9))
    return n_train, min(n_test, n - n_train)


def split_indices(n: int, spec: SplitSpec, labels=None, stratify: bool = False):
    """Index arrays ``(train, test, holdout)`` for a dataset of ``n`` rows."""
    if n < 3:
        raise PreconditionError(f"need at least 3 rows to split, got {n}")
    rng = RngState(spec.seed)
    perm = rng.permutation(n)
    if not stratify:
        n_train, n_test = _partition_sizes(n, spec)
        return perm[:n_train], perm[n_train:n_train + n_test], perm[n_train + n_test:]
    if labels is None:
        raise PreconditionError("stratified split needs labels")
    labels = np.asarray(labels)[perm]
    parts = ([], [], [])
    for cls in np.unique(labels):
        members = perm[labels == cls]
        n_train, n_test = _partition_sizes(members.shape[0], spec)
        parts[0].append(members[:n_train])
        parts[1].append(members[n_train:n_train + n_test])
        parts[2].append(members[n_train + n_test:])
    rank = np.empty(n, dtype=np.int64)
    rank[perm] = np.arange(n)
    out = []
    for p in parts:
        idx = np.concatenate(p) if p else np.empty(0, dtype=np.int64)
        out.append(idx[np.argsort(rank[idx], kind="stable")])
    return tuple(out)


def split(ds: Dataset, spec: SplitSpec, stratify: bool = False):
    """Shuffle rows with ``spec.seed`` and cut them into train/test/holdout.

    Train gets ``floor(N * train_fraction)`` rows, test
    ``floor(N * test_fraction)`` and holdout the rest. With ``stratify`` the
    same arithmetic is applied per class.
    """
    tr, te, ho = split_indices(ds.n_samples, spec, ds.labels, stratify)
    return (ds.take(tr, f"{ds.name}:train"), ds.take(te, f"{ds.name}:test"),
            ds.take(ho, f"{ds.name}:holdout"))


# -- synthesis ---------------------------------------------------------------

def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    rng = RngState(seed)
    n, d, k, q = spec.n_samples, spec.feature_dim, spec.n_informative, spec.n_factors
    n_clusters = spec.clusters_per_class

    signs = np.where(rng.uniform(2 * n_clusters * q) < 0.5, -1.0, 1.0)
    centres = 0.5 * spec.class_separation * signs.reshape(2, n_clusters, q)
    mixing = rng.standard_normal(q * k).reshape(q, k) * (spec.factor_gain / math.sqrt(q))

    labels = (rng.uniform(n) < spec.label_balance).astype(np.int64)
    cluster = rng.integers(n_clusters, n)
    factors = rng.standard_normal(n * q).reshape(n, q) + centres[labels, cluster]
    x = rng.standard_normal(n * d).reshape(n, d)
    present = rng.uniform(n * (d - k)).reshape(n, d - k) < spec.background_density
    x[:, :k] *= spec.noise_scale
    x[:, :k] += factors @ mixing
    # logistic squashing keeps every value inside [0, 1]
    x = 1.0 / (1.0 + np.exp(-x))
    x[:, k:] *= present
    return Dataset(x, labels, f"synthetic-{seed}")
