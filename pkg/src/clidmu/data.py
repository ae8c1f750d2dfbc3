"""Synthetic datasets, label-noise injection, meta-set selection, CSV I/O.

Datasets carry both the clean labels (evaluation only) and the noisy
labels that training sees. Injectors never touch the features or the
clean labels; they return a new dataset with only ``y_noisy`` rewritten.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import make_rng, softmax


@dataclass
class LabeledDataset:
    """Feature matrix with parallel clean and noisy label vectors."""

    X: np.ndarray
    y_clean: np.ndarray
    y_noisy: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y_clean = np.asarray(self.y_clean, dtype=np.int64)
        self.y_noisy = np.asarray(self.y_noisy, dtype=np.int64)
        n = self.X.shape[0]
        if self.y_clean.shape != (n,) or self.y_noisy.shape != (n,):
            raise ValueError("label vectors must match the number of rows")
        for y in (self.y_clean, self.y_noisy):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"label out of range for {self.n_classes} classes")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y_clean[idx], self.y_noisy[idx], self.n_classes)


@dataclass
class NoiseSpec:
    """Which injector to run and at what rate."""

    kind: str
    rate: float
    seed: int
    rate_std: float = 0.1

    VALID = ("none", "symmetric", "asymmetric", "instance_dependent")

    def __post_init__(self):
        if self.kind not in self.VALID:
            raise ValueError(f"noise kind must be one of {self.VALID}, got {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate must be in [0, 1], got {self.rate}")


@dataclass
class MetaSet:
    """Indices into a dataset chosen by one of the selection strategies."""

    indices: np.ndarray
    strategy: str

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("meta-set indices must be unique")

    @property
    def size(self) -> int:
        return len(self.indices)


META_SET_STRATEGIES = ("random_noisy", "class_balanced_noisy", "pseudo_clean_gmm", "oracle_clean")


def generate_blobs(seed: int, n_samples: int, dim: int, n_classes: int,
                   class_sep: float) -> LabeledDataset:
    """Isotropic unit-variance Gaussian clusters, one per class.

    Cluster means sit at ``class_sep`` along distinct coordinate axes when
    the dimension allows, otherwise on a circle of radius ``class_sep`` in
    the first two coordinates. Class counts are balanced within one sample
    and the returned noisy labels start out equal to the clean ones.
    """
    if dim < 2 or n_samples < n_classes or n_classes < 1:
        raise ValueError("need dim >= 2 and n_samples >= n_classes >= 1")
    rng = make_rng(seed)
    if n_classes <= dim:
        means = np.zeros((n_classes, dim))
        means[np.arange(n_classes), np.arange(n_classes)] = class_sep
    else:
        angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
        means = np.zeros((n_classes, dim))
        means[:, 0] = class_sep * np.cos(angles)
        means[:, 1] = class_sep * np.sin(angles)
    counts = np.full(n_classes, n_samples // n_classes)
    counts[: n_samples % n_classes] += 1
    y = np.repeat(np.arange(n_classes), counts)
    y = y[rng.permutation(n_samples)]
    X = means[y] + rng.standard_normal((n_samples, dim))
    return LabeledDataset(X, y, y.copy(), n_classes)


def inject_symmetric(ds: LabeledDataset, rate: float, rng: np.random.Generator) -> LabeledDataset:
    """Flip each label with probability ``rate`` to a uniform other class."""
    _check_rate(ds, rate)
    flip = rng.random(ds.n_samples) < rate
    y_noisy = ds.y_clean.copy()
    n_flip = int(flip.sum())
    if n_flip:
        offsets = rng.integers(1, ds.n_classes, size=n_flip)
        y_noisy[flip] = (ds.y_clean[flip] + offsets) % ds.n_classes
    return LabeledDataset(ds.X.copy(), ds.y_clean.copy(), y_noisy, ds.n_classes)


def inject_asymmetric(ds: LabeledDataset, rate: float, rng: np.random.Generator) -> LabeledDataset:
    """Flip each label with probability ``rate`` along the circular map j -> j+1."""
    _check_rate(ds, rate)
    flip = rng.random(ds.n_samples) < rate
    y_noisy = ds.y_clean.copy()
    y_noisy[flip] = (ds.y_clean[flip] + 1) % ds.n_classes
    return LabeledDataset(ds.X.copy(), ds.y_clean.copy(), y_noisy, ds.n_classes)


def inject_instance_dependent(ds: LabeledDataset, rate: float, rng: np.random.Generator,
                              rate_std: float = 0.1) -> LabeledDataset:
    """Feature-dependent flips with per-instance truncated-Gaussian rates.

    Each sample draws its own flip rate q_i from N(rate, rate_std^2) clipped
    into [0, 1] (draws at or below 0 become exactly 0). The flip target is
    sampled from a softmax over random feature projections of the instance,
    scaled by q_i, with the true class excluded.
    """
    _check_rate(ds, rate)
    n, d, c = ds.n_samples, ds.dim, ds.n_classes
    q = np.clip(rng.normal(rate, rate_std, size=n), 0.0, 1.0)
    W = rng.standard_normal((n, d, c))
    flip_u = rng.random(n)
    target_u = rng.random(n)
    scaled = q[:, None] * np.einsum("nd,ndc->nc", ds.X, W)
    scaled[np.arange(n), ds.y_clean] = -np.inf
    probs = softmax(scaled)
    y_noisy = ds.y_clean.copy()
    flip = flip_u < q
    if flip.any():
        cum = np.cumsum(probs[flip], axis=1)
        y_noisy[flip] = np.argmax(cum > target_u[flip][:, None], axis=1)
    return LabeledDataset(ds.X.copy(), ds.y_clean.copy(), y_noisy, ds.n_classes)


def _check_rate(ds: LabeledDataset, rate: float):
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must be in [0, 1], got {rate}")
    if rate > 0.0 and ds.n_classes < 2:
        raise ValueError("cannot inject noise with fewer than 2 classes")


def apply_noise(ds: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    rng = make_rng(spec.seed)
    if spec.kind == "none" or spec.rate == 0.0:
        return LabeledDataset(ds.X.copy(), ds.y_clean.copy(), ds.y_clean.copy(), ds.n_classes)
    if spec.kind == "symmetric":
        return inject_symmetric(ds, spec.rate, rng)
    if spec.kind == "asymmetric":
        return inject_asymmetric(ds, spec.rate, rng)
    return inject_instance_dependent(ds, spec.rate, rng, spec.rate_std)


def _balanced_pick(labels: np.ndarray, n_classes: int, size: int,
                   rng: np.random.Generator) -> np.ndarray:
    per = size // n_classes
    chosen = []
    for k in range(n_classes):
        members = np.flatnonzero(labels == k)
        if len(members) < per:
            raise ValueError(f"class {k} has {len(members)} samples, need {per} for a balanced set")
        chosen.append(rng.choice(members, size=per, replace=False))
    chosen = np.concatenate(chosen).astype(np.int64)
    short = size - len(chosen)
    if short > 0:
        rest = np.setdiff1d(np.arange(len(labels)), chosen)
        chosen = np.concatenate([chosen, rng.choice(rest, size=short, replace=False)])
    return np.sort(chosen)


def select_meta_set(ds: LabeledDataset, size: int, strategy: str, rng: np.random.Generator,
                    losses: np.ndarray | None = None) -> MetaSet:
    """Pick meta-set indices by strategy.

    ``oracle_clean`` balances over the clean labels and is the only path in
    the package where clean labels feed training: it exists as the ceiling
    baseline that assumes a trustworthy meta-dataset.
    """
    if strategy not in META_SET_STRATEGIES:
        raise ValueError(f"strategy must be one of {META_SET_STRATEGIES}, got {strategy!r}")
    if not 1 <= size <= ds.n_samples:
        raise ValueError(f"meta-set size {size} out of range for {ds.n_samples} samples")
    if strategy == "random_noisy":
        idx = np.sort(rng.choice(ds.n_samples, size=size, replace=False))
    elif strategy == "class_balanced_noisy":
        idx = _balanced_pick(ds.y_noisy, ds.n_classes, size, rng)
    elif strategy == "oracle_clean":
        idx = _balanced_pick(ds.y_clean, ds.n_classes, size, rng)
    else:
        if losses is None:
            raise ValueError("pseudo_clean_gmm selection needs per-sample losses")
        from .metaloop import select_pseudo_clean_gmm

        idx = select_pseudo_clean_gmm(losses, ds.y_noisy, size, n_classes=ds.n_classes)
    return MetaSet(idx, strategy)


# ---------------------------------------------------------------------------
# CSV round trip: header x_0,...,x_{d-1},label_noisy,label_clean; features
# printed at 17 significant digits so the trip is lossless for float64.
# ---------------------------------------------------------------------------


def write_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{j}" for j in range(ds.dim)] + ["label_noisy", "label_clean"])
        for i in range(ds.n_samples):
            row = [f"{v:.17g}" for v in ds.X[i]]
            row.append(str(int(ds.y_noisy[i])))
            row.append(str(int(ds.y_clean[i])))
            writer.writerow(row)


def read_csv(path, n_classes: int | None = None) -> LabeledDataset:
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        dim = len(header) - 2
        expected = [f"x_{j}" for j in range(dim)] + ["label_noisy", "label_clean"]
        if dim < 1 or header != expected:
            raise ValueError(f"{path}: malformed header {header!r}; "
                             f"expected x_0..x_{{d-1}},label_noisy,label_clean")
        X_rows, noisy, clean = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise ValueError(f"{path}: line {lineno} has {len(row)} cells, expected {dim + 2}")
            try:
                X_rows.append([float(v) for v in row[:dim]])
                noisy.append(int(row[dim]))
                clean.append(int(row[dim + 1]))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: non-numeric cell ({exc})") from None
    if not X_rows:
        raise ValueError(f"{path}: no data rows")
    y_noisy = np.array(noisy, dtype=np.int64)
    y_clean = np.array(clean, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(y_noisy.max(), y_clean.max())) + 1
    return LabeledDataset(np.array(X_rows), y_clean, y_noisy, n_classes)
