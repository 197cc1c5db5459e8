"""
Feature-vector datasets: binary/CSV I/O, synthetic generation with known
latent structure, and k-fold batching.

Binary feature file (little-endian)::

    magic "FDRLFEAT" | u32 version | u32 d_in | u32 C | u64 count
    count x ( f64 x d_in speech | f64 x d_in text | u32 label )

A manifest (``<stem>.manifest``, ``key = value`` lines) carries class names,
fold assignment and provenance. Synthetic datasets also write ground-truth
latent factors to ``<stem>.factors`` in the same record order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DimensionError, HeaderError, LabelRangeError, ValidationError

FEAT_MAGIC = b"FDRLFEAT"
FACT_MAGIC = b"FDRLFACT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIQ")


class FeatureRecord(NamedTuple):
    h_a: np.ndarray
    h_t: np.ndarray
    y_e: int


@dataclass
class DatasetManifest:
    d_in: int
    classes: int
    count: int
    class_names: list = field(default_factory=list)
    folds: int = 5
    provenance: str = ""

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class{c}" for c in range(self.classes)]


@dataclass
class LatentFactors:
    z_s: np.ndarray
    z_a: np.ndarray
    z_t: np.ndarray


@dataclass
class FeatureDataset:
    h_a: np.ndarray
    h_t: np.ndarray
    y: np.ndarray
    fold: np.ndarray  # 1-based fold index per record
    manifest: DatasetManifest
    factors: Optional[LatentFactors] = None

    def __len__(self):
        return len(self.y)

    def __iter__(self) -> Iterator[FeatureRecord]:
        for i in range(len(self)):
            yield FeatureRecord(self.h_a[i], self.h_t[i], int(self.y[i]))

    def subset(self, idx):
        idx = np.asarray(idx)
        factors = None
        if self.factors is not None:
            factors = LatentFactors(self.factors.z_s[idx], self.factors.z_a[idx], self.factors.z_t[idx])
        return FeatureDataset(self.h_a[idx], self.h_t[idx], self.y[idx], self.fold[idx], self.manifest, factors)


def assign_folds(n, k, seed=0):
    """Balanced 1-based fold labels in seeded random order."""
    rng = np.random.default_rng(seed)
    return (rng.permutation(n) % k + 1).astype(np.int64)


def _validate(h_a, h_t, y, d_in, classes):
    for name, h in (("speech", h_a), ("text", h_t)):
        if h.ndim != 2 or h.shape[1] != d_in:
            raise DimensionError(f"{name} features have shape {h.shape}, expected (*, {d_in})")
        bad = ~np.isfinite(h).all(axis=1)
        if bad.any():
            raise ValidationError(f"non-finite {name} feature in record {int(np.argmax(bad))}")
    if len(y) and (y.min() < 0 or y.max() >= classes):
        i = int(np.argmax((y < 0) | (y >= classes)))
        raise LabelRangeError(f"record {i}: label {int(y[i])} outside [0, {classes})")


# ---------------------------------------------------------------------------
# binary / csv / manifest I/O
# ---------------------------------------------------------------------------

def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".feat", ".csv") else path


def manifest_path(path):
    return _stem(path).with_suffix(".manifest")


def factors_path(path):
    return _stem(path).with_suffix(".factors")


def write_features(path, ds):
    path = Path(path)
    if path.suffix == ".csv":
        return write_features_csv(path, ds)
    n, d_in = ds.h_a.shape
    rec = np.dtype([("a", "<f8", (d_in,)), ("t", "<f8", (d_in,)), ("y", "<u4")])
    body = np.empty(n, dtype=rec)
    body["a"], body["t"], body["y"] = ds.h_a, ds.h_t, ds.y
    header = _HEADER.pack(FEAT_MAGIC, FORMAT_VERSION, d_in, ds.manifest.classes, n)
    path.write_bytes(header + body.tobytes())
    write_manifest(manifest_path(path), ds)
    if ds.factors is not None:
        write_factors(factors_path(path), ds.factors)


def write_features_csv(path, ds):
    n, d_in = ds.h_a.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "fold"] + [f"a{j}" for j in range(d_in)] + [f"t{j}" for j in range(d_in)])
        for i in range(n):
            w.writerow([int(ds.y[i]), int(ds.fold[i])] + [repr(float(v)) for v in ds.h_a[i]]
                       + [repr(float(v)) for v in ds.h_t[i]])
    write_manifest(manifest_path(path), ds)


def write_manifest(path, ds):
    m = ds.manifest
    lines = [
        "format = FDRLFEAT",
        f"version = {FORMAT_VERSION}",
        f"d_in = {m.d_in}",
        f"classes = {m.classes}",
        f"class_names = {','.join(m.class_names)}",
        f"count = {m.count}",
        f"folds = {m.folds}",
        f"fold_assignment = {','.join(str(int(f)) for f in ds.fold)}",
        f"provenance = {m.provenance}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}: malformed manifest line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_factors(path, factors):
    n = factors.z_s.shape[0]
    dims = (factors.z_s.shape[1], factors.z_a.shape[1], factors.z_t.shape[1])
    body = np.concatenate([factors.z_s, factors.z_a, factors.z_t], axis=1).astype("<f8")
    Path(path).write_bytes(FACT_MAGIC + struct.pack("<IIIIQ", FORMAT_VERSION, *dims, n) + body.tobytes())


def read_factors(path):
    buf = Path(path).read_bytes()
    if len(buf) < 32 or buf[:8] != FACT_MAGIC:
        raise HeaderError(f"{path}: not a factor file")
    version, ds_, da, dt, n = struct.unpack("<IIIIQ", buf[8:32])
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported version {version}")
    width = ds_ + da + dt
    if len(buf) != 32 + 8 * width * n:
        raise HeaderError(f"{path}: truncated factor file")
    body = np.frombuffer(buf[32:], dtype="<f8").reshape(n, width).astype(np.float64)
    return LatentFactors(body[:, :ds_], body[:, ds_:ds_ + da], body[:, ds_ + da:])


def _apply_manifest(path, manifest, count, d_in, classes):
    """Merge an optional sidecar manifest; returns (manifest, fold array or None)."""
    mpath = manifest_path(path)
    if not mpath.exists():
        return manifest, None
    kv = read_manifest(mpath)
    if "d_in" in kv and int(kv["d_in"]) != d_in:
        raise DimensionError(f"manifest d_in={kv['d_in']} but feature file has d_in={d_in}")
    if "classes" in kv and int(kv["classes"]) != classes:
        raise ValidationError(f"manifest classes={kv['classes']} but feature file has C={classes}")
    if "count" in kv and int(kv["count"]) != count:
        raise ValidationError(f"manifest count={kv['count']} but feature file has {count} records")
    if kv.get("class_names"):
        manifest.class_names = kv["class_names"].split(",")
    manifest.folds = int(kv.get("folds", manifest.folds))
    manifest.provenance = kv.get("provenance", "")
    folds = None
    if kv.get("fold_assignment"):
        folds = np.array([int(v) for v in kv["fold_assignment"].split(",")], dtype=np.int64)
        if len(folds) != count:
            raise ValidationError(f"manifest lists {len(folds)} folds for {count} records")
    return manifest, folds


def load_features(path, folds=5, seed=0):
    """Read a binary (or ``.csv``) feature file plus its optional sidecars."""
    path = Path(path)
    if path.suffix == ".csv":
        return load_features_csv(path, folds=folds, seed=seed)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise HeaderError(f"{path}: file too short for header ({len(buf)} bytes)")
    magic, version, d_in, classes, count = _HEADER.unpack_from(buf)
    if magic != FEAT_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported version {version}")
    rec = np.dtype([("a", "<f8", (d_in,)), ("t", "<f8", (d_in,)), ("y", "<u4")])
    need = _HEADER.size + rec.itemsize * count
    if len(buf) != need:
        raise HeaderError(f"{path}: expected {need} bytes for {count} records, found {len(buf)}")
    body = np.frombuffer(buf, dtype=rec, count=count, offset=_HEADER.size)
    h_a = body["a"].astype(np.float64).reshape(count, d_in)
    h_t = body["t"].astype(np.float64).reshape(count, d_in)
    y = body["y"].astype(np.int64)
    _validate(h_a, h_t, y, d_in, classes)
    manifest = DatasetManifest(d_in=d_in, classes=classes, count=count, folds=folds)
    manifest, fold = _apply_manifest(path, manifest, count, d_in, classes)
    if fold is None:
        fold = assign_folds(count, manifest.folds, seed)
    factors = read_factors(factors_path(path)) if factors_path(path).exists() else None
    return FeatureDataset(h_a, h_t, y, fold, manifest, factors)


def load_features_csv(path, folds=5, seed=0):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise HeaderError(f"{path}: empty CSV") from None
        if header[:2] != ["label", "fold"] or (len(header) - 2) % 2:
            raise HeaderError(f"{path}: header must be label,fold,a0..,t0..")
        d_in = (len(header) - 2) // 2
        rows = []
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise DimensionError(f"record {i}: {len(row) - 2} feature values, expected {2 * d_in}")
            rows.append(row)
    data = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(len(rows), 2 * d_in)
    y = np.array([int(r[0]) for r in rows], dtype=np.int64)
    fold = np.array([int(r[1]) for r in rows], dtype=np.int64)
    kv = read_manifest(manifest_path(path)) if manifest_path(path).exists() else {}
    classes = int(kv.get("classes", int(y.max()) + 1 if len(y) else 1))
    h_a, h_t = data[:, :d_in], data[:, d_in:]
    _validate(h_a, h_t, y, d_in, classes)
    manifest = DatasetManifest(d_in=d_in, classes=classes, count=len(y), folds=int(kv.get("folds", folds)))
    manifest, _ = _apply_manifest(path, manifest, len(y), d_in, classes)
    if len(fold) and fold.min() < 1:
        fold = assign_folds(len(y), manifest.folds, seed)
    return FeatureDataset(h_a, h_t, y, fold, manifest)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Two-modality generator: labels depend only on the shared factor."""

    samples: int = 2000
    classes: int = 4
    d_in: int = 64
    shared_dim: int = 8
    private_dim_a: int = 8
    private_dim_t: int = 8
    separation: float = 4.0
    noise: float = 0.1
    modality_shift: float = 2.0
    private_scale: float = 1.0
    map_seed: int = 0
    folds: int = 5

    def validate(self):
        for name in ("samples", "classes", "d_in", "shared_dim", "private_dim_a", "private_dim_t"):
            if getattr(self, name) < 1:
                raise ConfigError(f"SynthSpec.{name} must be >= 1")
        if self.noise < 0 or self.separation < 0 or self.private_scale < 0:
            raise ConfigError("noise, separation and private_scale must be >= 0")
        return self


def generate_synthetic(spec, seed=0):
    """h_a = A_s z_s + A_p z_a + noise, h_t = B_s z_s + B_p z_t + noise.

    z_s ~ N(class mean, I) where class means are random unit directions times
    ``separation``; z_a ~ N(+shift, s^2 I), z_t ~ N(-shift, s^2 I) along a
    fixed direction, with s = ``private_scale`` (raise it to inject
    modality-specific nuisance variance). The maps depend only on ``spec.map_seed``; samples on ``seed``.
    """
    spec.validate()
    maps = np.random.default_rng([spec.map_seed, 1])
    ds_, da, dt, d_in = spec.shared_dim, spec.private_dim_a, spec.private_dim_t, spec.d_in
    A_s = maps.normal(size=(d_in, ds_)) / np.sqrt(ds_)
    A_p = maps.normal(size=(d_in, da)) / np.sqrt(da)
    B_s = maps.normal(size=(d_in, ds_)) / np.sqrt(ds_)
    B_p = maps.normal(size=(d_in, dt)) / np.sqrt(dt)
    means = maps.normal(size=(spec.classes, ds_))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= spec.separation
    shift_a = np.ones(da) / np.sqrt(da) * spec.modality_shift
    shift_t = -np.ones(dt) / np.sqrt(dt) * spec.modality_shift

    rng = np.random.default_rng([seed, 2])
    n = spec.samples
    y = rng.permutation(np.arange(n) % spec.classes).astype(np.int64)
    z_s = means[y] + rng.normal(size=(n, ds_))
    z_a = shift_a + spec.private_scale * rng.normal(size=(n, da))
    z_t = shift_t + spec.private_scale * rng.normal(size=(n, dt))
    h_a = z_s @ A_s.T + z_a @ A_p.T + spec.noise * rng.normal(size=(n, d_in))
    h_t = z_s @ B_s.T + z_t @ B_p.T + spec.noise * rng.normal(size=(n, d_in))
    fold = assign_folds(n, spec.folds, seed)
    manifest = DatasetManifest(
        d_in=d_in, classes=spec.classes, count=n, folds=spec.folds,
        provenance=(f"synthetic seed={seed} map_seed={spec.map_seed} shared={ds_} private={da}/{dt} "
                    f"separation={spec.separation} noise={spec.noise} shift={spec.modality_shift} "
                    f"private_scale={spec.private_scale}"),
    )
    return FeatureDataset(h_a, h_t, y, fold, manifest, LatentFactors(z_s, z_a, z_t))


# ---------------------------------------------------------------------------
# folds and batches
# ---------------------------------------------------------------------------

class Batch(NamedTuple):
    h_a: np.ndarray
    h_t: np.ndarray
    y: np.ndarray
    index: np.ndarray


def kfold_split(ds, fold):
    k = ds.manifest.folds
    if not 1 <= fold <= k:
        raise ConfigError(f"fold must be in 1..{k}, got {fold}")
    test = np.flatnonzero(ds.fold == fold)
    train = np.flatnonzero(ds.fold != fold)
    if len(test) == 0 or len(train) == 0:
        raise ConfigError(f"fold {fold} leaves an empty train or test split")
    return train, test


def iter_batches(ds, idx, batch_size, rng=None):
    idx = np.asarray(idx)
    if rng is not None:
        idx = idx[rng.permutation(len(idx))]
    for start in range(0, len(idx), batch_size):
        sel = idx[start:start + batch_size]
        yield Batch(ds.h_a[sel], ds.h_t[sel], ds.y[sel], sel)


def kfold_batches(ds, fold, batch_size, seed=0):
    """(train batches in seeded shuffled order, test batches in file order)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    train, test = kfold_split(ds, fold)
    rng = np.random.default_rng(seed)
    return list(iter_batches(ds, train, batch_size, rng)), list(iter_batches(ds, test, batch_size))
