"""Synthetic dataset generators and CSV ingestion.

All generators are pure functions of their arguments: the same seed
yields the same dataset, bit for bit. Every dataset carries disjoint,
covering train/dev/test index splits. Split sizes follow a
floor-then-remainder rule: each ratio is floored to a sample count and
whatever remains goes to the training split.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SpecError

__all__ = [
    "Dataset",
    "gen_gaussian_mixture",
    "gen_spirals",
    "gen_linear_regression",
    "load_csv",
    "standardize",
    "save_dataset",
    "load_dataset",
]

DEFAULT_SPLIT = (0.7, 0.15, 0.15)

#: class means of the gaussian mixture sit on a circle of this radius
MIXTURE_RADIUS = 3.0

#: spiral radii span [SPIRAL_R0, 1] before scaling by SPIRAL_SCALE
SPIRAL_R0 = 0.25
SPIRAL_SCALE = 2.0


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    targets: np.ndarray   # (n,) int64 labels or float64 scalars
    train_idx: np.ndarray
    dev_idx: np.ndarray
    test_idx: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def task(self) -> str:
        return self.metadata.get("task", "classification")


def _check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SpecError(f"split ratios must be 3 nonnegative values summing to 1, got {ratios}")
    return ratios


def _split_indices(n: int, ratios, rng: np.random.Generator):
    """Shuffle then split; floored dev/test sizes, remainder to train."""
    ratios = _check_ratios(ratios)
    order = rng.permutation(n)
    n_dev = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_dev - n_test
    return (order[:n_train],
            order[n_train:n_train + n_dev],
            order[n_train + n_dev:])


def gen_gaussian_mixture(n: int, d: int, classes: int, spread: float,
                         seed: int, split_ratios=DEFAULT_SPLIT) -> Dataset:
    """Isotropic Gaussian blobs with means spaced on a circle.

    Classes are balanced to within one sample. ``spread`` is the
    per-class standard deviation; the means live on a radius-3 circle in
    the first two feature dimensions (on a line if d == 1).
    """
    if classes < 2:
        raise SpecError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise SpecError(f"need n >= classes, got n={n}, classes={classes}")
    if spread <= 0:
        raise SpecError(f"spread must be positive, got {spread}")
    if d < 1:
        raise SpecError(f"need d >= 1, got {d}")

    rng = np.random.default_rng(seed)
    means = np.zeros((classes, d))
    angles = 2.0 * np.pi * np.arange(classes) / classes
    if d == 1:
        means[:, 0] = MIXTURE_RADIUS * np.linspace(-1.0, 1.0, classes)
    else:
        means[:, 0] = MIXTURE_RADIUS * np.cos(angles)
        means[:, 1] = MIXTURE_RADIUS * np.sin(angles)

    counts = np.full(classes, n // classes)
    counts[:n % classes] += 1
    features = np.vstack([means[c] + spread * rng.standard_normal((counts[c], d))
                          for c in range(classes)])
    targets = np.repeat(np.arange(classes), counts)

    train, dev, test = _split_indices(n, split_ratios, rng)
    meta = {"name": "gaussian_mixture", "task": "classification", "seed": seed,
            "n": n, "d": d, "classes": classes, "spread": spread}
    return Dataset(features, targets.astype(np.int64), train, dev, test, meta)


def gen_spirals(n: int, turns: float, noise: float, seed: int,
                split_ratios=DEFAULT_SPLIT, label_noise: float = 0.0) -> Dataset:
    """Two interleaved planar spirals, one per class.

    A point of class c at parameter t in [0, 1] sits at radius
    r = SPIRAL_R0 + (1 - SPIRAL_R0) * t and angle
    2*pi*turns*r + pi*c, scaled by SPIRAL_SCALE, plus isotropic noise.
    Because the angle is a function of the radius, a noise-free point
    can be reconstructed exactly from its norm.

    ``label_noise`` flips that fraction of training-split labels (the
    standard noisy-label setup: dev and test labels stay clean).
    """
    if n % 2 != 0:
        raise SpecError(f"n must be even for two balanced spirals, got {n}")
    if turns <= 0:
        raise SpecError(f"turns must be positive, got {turns}")
    if noise < 0:
        raise SpecError(f"noise must be nonnegative, got {noise}")
    if not 0.0 <= label_noise < 1.0:
        raise SpecError(f"label_noise must be in [0, 1), got {label_noise}")

    rng = np.random.default_rng(seed)
    half = n // 2
    features = np.zeros((n, 2))
    targets = np.zeros(n, dtype=np.int64)
    for c in (0, 1):
        t = rng.random(half)
        r = SPIRAL_R0 + (1.0 - SPIRAL_R0) * t
        angle = 2.0 * np.pi * turns * r + np.pi * c
        block = slice(c * half, (c + 1) * half)
        features[block, 0] = SPIRAL_SCALE * r * np.cos(angle)
        features[block, 1] = SPIRAL_SCALE * r * np.sin(angle)
        features[block] += noise * rng.standard_normal((half, 2))
        targets[block] = c

    train, dev, test = _split_indices(n, split_ratios, rng)
    if label_noise > 0.0:
        flip = train[rng.random(len(train)) < label_noise]
        targets[flip] = 1 - targets[flip]
    meta = {"name": "spirals", "task": "classification", "seed": seed,
            "n": n, "turns": turns, "noise": noise, "label_noise": label_noise}
    return Dataset(features, targets, train, dev, test, meta)


def gen_linear_regression(n: int, d: int, noise_std: float, seed: int,
                          split_ratios=DEFAULT_SPLIT) -> Dataset:
    """y = x . beta + noise with a seeded coefficient vector.

    The true beta is recorded in the metadata for recoverability checks.
    """
    if n < 1 or d < 1:
        raise SpecError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if noise_std < 0:
        raise SpecError(f"noise_std must be nonnegative, got {noise_std}")

    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(d)
    features = rng.standard_normal((n, d))
    targets = features @ beta + noise_std * rng.standard_normal(n)

    train, dev, test = _split_indices(n, split_ratios, rng)
    meta = {"name": "linear_regression", "task": "regression", "seed": seed,
            "n": n, "d": d, "noise_std": noise_std, "beta": beta.tolist()}
    return Dataset(features, targets, train, dev, test, meta)


def load_csv(path, target_column, split_ratios=DEFAULT_SPLIT, seed: int = 0,
             task: str | None = None) -> Dataset:
    """Parse a rectangular numeric CSV into a shuffled, split Dataset.

    A non-numeric first row is treated as a header; ``target_column``
    may then be a column name, otherwise a 0-based index. When ``task``
    is omitted it is inferred: integer-valued targets mean
    classification, anything else regression.
    """
    _check_ratios(split_ratios)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [row for row in rows if row]  # ignore blank lines
    if not rows:
        raise DataError(f"{path}: file is empty")

    header = None
    if any(not _is_number(cell) for cell in rows[0]):
        header = [cell.strip() for cell in rows[0]]
        rows = rows[1:]
        if not rows:
            raise DataError(f"{path}: only a header row, no data")

    width = len(rows[0])
    if isinstance(target_column, str):
        if header is None:
            raise DataError(f"{path}: target column {target_column!r} needs a header row")
        if target_column not in header:
            raise DataError(f"{path}: no column named {target_column!r} in header")
        target_index = header.index(target_column)
    else:
        target_index = int(target_column)
        if not 0 <= target_index < width:
            raise DataError(f"{path}: target column {target_index} out of range 0..{width - 1}")

    data = np.zeros((len(rows), width))
    header_offset = 2 if header is not None else 1
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: line {i + header_offset}: expected {width} "
                            f"cells, got {len(row)}")
        for j, cell in enumerate(row):
            if not _is_number(cell):
                raise DataError(f"{path}: line {i + header_offset}, column {j + 1}: "
                                f"non-numeric cell {cell.strip()!r}")
            data[i, j] = float(cell)

    targets = data[:, target_index]
    features = np.delete(data, target_index, axis=1)
    if task is None:
        integral = np.all(targets == np.round(targets)) and targets.min() >= 0
        task = "classification" if integral else "regression"
    if task == "classification":
        targets = targets.astype(np.int64)

    rng = np.random.default_rng(seed)
    train, dev, test = _split_indices(len(rows), split_ratios, rng)
    meta = {"name": "csv", "task": task, "seed": seed, "path": str(path),
            "target_column": target_column, "n": len(rows)}
    return Dataset(features, targets, train, dev, test, meta)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def standardize(dataset: Dataset) -> Dataset:
    """Center and scale features using training-split statistics only.

    Dev and test are transformed with the train mean/std, so no
    information leaks across splits. Constant columns keep scale 1.
    """
    train = dataset.features[dataset.train_idx]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    # constant columns have std ~ eps*|mean| rather than exactly 0
    std = np.where(std <= 1e-12 * np.maximum(1.0, np.abs(mean)), 1.0, std)
    meta = dict(dataset.metadata)
    meta["standardized"] = True
    return Dataset(
        features=(dataset.features - mean) / std,
        targets=dataset.targets,
        train_idx=dataset.train_idx,
        dev_idx=dataset.dev_idx,
        test_idx=dataset.test_idx,
        metadata=meta,
    )


# -- dataset cache --------------------------------------------------------------
# An .npz archive with arrays features/targets/train_idx/dev_idx/test_idx
# and the metadata as a JSON string under the key "metadata".

def save_dataset(dataset: Dataset, path) -> None:
    np.savez(
        path,
        features=dataset.features,
        targets=dataset.targets,
        train_idx=dataset.train_idx,
        dev_idx=dataset.dev_idx,
        test_idx=dataset.test_idx,
        metadata=np.array(json.dumps(dataset.metadata, sort_keys=True)),
    )


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as archive:
        return Dataset(
            features=archive["features"],
            targets=archive["targets"],
            train_idx=archive["train_idx"],
            dev_idx=archive["dev_idx"],
            test_idx=archive["test_idx"],
            metadata=json.loads(str(archive["metadata"])),
        )
