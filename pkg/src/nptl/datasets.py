"""Synthetic tasks with controllable shift, CSV ingestion and seeded splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "LabeledDataset",
    "ShiftSpec",
    "SplitSpec",
    "gen_gaussian_mixture",
    "apply_shift",
    "split",
    "write_csv",
    "read_csv",
    "write_manifest",
]


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    targets: np.ndarray
    provenance: str = ""
    n_classes: Optional[int] = None  # None for regression

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "features", X)
        y = np.asarray(self.targets)
        object.__setattr__(self, "targets", y)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return replace(self, features=self.features[idx], targets=self.targets[idx])

    def manifest(self) -> dict:
        out = {"count": len(self), "dim": self.dim, "provenance": self.provenance}
        if self.n_classes is not None:
            out["n_classes"] = int(self.n_classes)
            out["class_counts"] = np.bincount(self.targets, minlength=self.n_classes).tolist()
        return out


@dataclass(frozen=True)
class ShiftSpec:
    rotation_angle: float = 0.0
    mean_shift: Optional[Sequence[float]] = None
    label_permutation: Optional[Sequence[int]] = None
    class_subset: Optional[Sequence[int]] = None
    # the two feature axes spanning the rotation plane
    rotation_plane: tuple[int, int] = (0, 1)

    def to_dict(self) -> dict:
        return {
            "rotation_angle": self.rotation_angle,
            "mean_shift": None if self.mean_shift is None else list(self.mean_shift),
            "label_permutation": None if self.label_permutation is None else list(self.label_permutation),
            "class_subset": None if self.class_subset is None else list(self.class_subset),
            "rotation_plane": list(self.rotation_plane),
        }


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    val_fraction: float
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not 0 < f < 1 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must lie in (0, 1) and sum to 1, got {fr}")

    @classmethod
    def holdout(cls, test_fraction: float = 0.2, val_fraction: float = 0.1, seed: int = 0) -> "SplitSpec":
        """Validation set carved out as ``val_fraction`` of the non-test rows."""
        rest = 1.0 - test_fraction
        return cls(rest * (1.0 - val_fraction), rest * val_fraction, test_fraction, seed)


def _class_means(k: int, d: int, separation: float) -> np.ndarray:
    means = np.zeros((k, d))
    if d == 1:
        means[:, 0] = separation * (np.arange(k) - (k - 1) / 2.0)
    elif k <= d:
        # pairwise distance == separation
        means[np.arange(k), np.arange(k)] = separation / np.sqrt(2.0)
        means -= means.mean(axis=0)
    else:
        # adjacent means on a circle at distance == separation
        radius = separation / (2.0 * np.sin(np.pi / k))
        ang = 2.0 * np.pi * np.arange(k) / k
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
    return means


def gen_gaussian_mixture(k: int, d: int, n: int, separation: float, seed: int) -> LabeledDataset:
    """Balanced ``k``-class isotropic Gaussian mixture in ``d`` dimensions.

    With ``k <= d`` the class means sit on scaled coordinate axes; otherwise on
    a circle in the first two coordinates. Remaining coordinates are pure
    unit-variance noise.
    """
    if k < 2 or d < 1 or n < k:
        raise ValueError(f"need k >= 2, d >= 1, n >= k; got k={k}, d={d}, n={n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    X = _class_means(k, d, separation)[labels] + rng.standard_normal((n, d))
    prov = f"gaussian_mixture(k={k},d={d},n={n},separation={separation},seed={seed})"
    return LabeledDataset(X, labels.astype(np.int64), prov, k)


def apply_shift(data: LabeledDataset, shift: ShiftSpec, seed: int = 0) -> LabeledDataset:
    """Rotate, translate and relabel a dataset; row order of kept rows is preserved.

    A ``class_subset`` keeps only rows from those classes and relabels them to
    their position in the subset; ``label_permutation`` then maps label ``c``
    to ``label_permutation[c]``.
    """
    X, y = data.features, data.targets
    d = X.shape[1]
    if shift.rotation_angle:
        i, j = shift.rotation_plane
        if d < 2 or not (0 <= i < d and 0 <= j < d and i != j):
            raise ValueError(f"rotation plane {shift.rotation_plane} undefined for dimension {d}")
        c, s = np.cos(shift.rotation_angle), np.sin(shift.rotation_angle)
        X = X.copy()
        xi, xj = X[:, i].copy(), X[:, j].copy()
        X[:, i] = c * xi - s * xj
        X[:, j] = s * xi + c * xj
    if shift.mean_shift is not None:
        m = np.asarray(shift.mean_shift, dtype=np.float64)
        if m.shape != (d,):
            raise ValueError(f"mean_shift must have length {d}, got {m.shape}")
        if np.any(m != 0):
            X = X + m
    k = data.n_classes
    if shift.class_subset is not None:
        if k is None:
            raise ValueError("class_subset requires a classification dataset")
        subset = np.asarray(shift.class_subset, dtype=np.int64)
        if len(set(subset.tolist())) != subset.size or subset.min() < 0 or subset.max() >= k:
            raise ValueError(f"invalid class_subset {shift.class_subset} for {k} classes")
        keep = np.isin(y, subset)
        remap = np.full(k, -1, dtype=np.int64)
        remap[subset] = np.arange(subset.size)
        X, y, k = X[keep], remap[y[keep]], int(subset.size)
    if shift.label_permutation is not None:
        perm = np.asarray(shift.label_permutation, dtype=np.int64)
        if k is None or perm.shape != (k,) or not np.array_equal(np.sort(perm), np.arange(k)):
            raise ValueError(f"label_permutation must be a permutation of range({k})")
        y = perm[y]
    prov = f"{data.provenance}|shift({json.dumps(shift.to_dict(), sort_keys=True)},seed={seed})"
    return LabeledDataset(X, y, prov, k)


def split(data: LabeledDataset, spec: SplitSpec):
    """Seeded shuffle into disjoint ``(train, val, test)`` covering all rows."""
    n = len(data)
    n_train = int(round(n * spec.train_fraction))
    n_val = int(round(n * spec.val_fraction))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} rows leaves an empty part: {(n_train, n_val, n_test)}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    parts = np.split(perm, [n_train, n_train + n_val])
    return tuple(data.subset(p) for p in parts)


def write_csv(data: LabeledDataset, path) -> Path:
    """Header row, feature columns ``x0..x{d-1}``, target column ``y`` last."""
    path = Path(path)
    cols = [f"x{j}" for j in range(data.dim)] + ["y"]
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row, t in zip(data.features.tolist(), data.targets.tolist()):
            wr.writerow([repr(v) for v in row] + [repr(t)])
    return path


def read_csv(path, n_classes: Optional[int] = None, classification: bool = True) -> LabeledDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if not header or len(header) < 2:
            raise ValueError(f"{path}: expected a header with at least one feature and a target")
        rows = [r for r in rd if r]
    width = len(header)
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged rows")
    X = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64).reshape(len(rows), width - 1)
    if classification:
        y = np.array([int(float(r[-1])) for r in rows], dtype=np.int64)
        k = n_classes if n_classes is not None else (int(y.max()) + 1 if y.size else 0)
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"{path}: labels out of range for {k} classes")
    else:
        y = np.array([float(r[-1]) for r in rows], dtype=np.float64)
        k = None
    return LabeledDataset(X, y, str(path), k)


def write_manifest(path, seed: int, datasets: dict, shift: Optional[ShiftSpec] = None, **extra) -> Path:
    doc = {
        "format": "nptl-data-manifest/1",
        "seed": seed,
        "datasets": {name: ds.manifest() for name, ds in datasets.items()},
        "shift": None if shift is None else shift.to_dict(),
        **extra,
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path
