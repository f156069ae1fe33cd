"""Datasets with hidden true labels, noise injection, generators, splits and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ifssl.errors import ConfigurationError, FormatError, InputError, ParseError

UNLABELED = -1


class Sample(NamedTuple):
    id: int
    features: np.ndarray
    given_label: int
    true_label: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-stored samples; arrays are read-only after construction.

    ``given`` holds the label seen by training (``UNLABELED`` for masked
    samples), ``true`` the hidden ground truth used for evaluation only.
    """

    ids: np.ndarray
    features: np.ndarray
    given: np.ndarray
    true: np.ndarray
    m: int

    def __post_init__(self):
        ids = _frozen(self.ids, np.int64)
        feats = _frozen(self.features, np.float64)
        given = _frozen(self.given, np.int64)
        true = _frozen(self.true, np.int64)
        if feats.ndim != 2:
            feats = _frozen(feats.reshape(len(ids), -1), np.float64)
        n = len(ids)
        if not (feats.shape[0] == len(given) == len(true) == n):
            raise InputError("ids, features and labels must have equal length")
        if len(np.unique(ids)) != n:
            raise InputError("sample ids must be unique")
        if self.m < 1:
            raise ConfigurationError("class count must be >= 1", "m")
        if np.any((given < UNLABELED) | (given >= self.m)):
            raise InputError("given labels out of range")
        if np.any((true < 0) | (true >= self.m)):
            raise InputError("true labels out of range")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "given", given)
        object.__setattr__(self, "true", true)

    def __len__(self):
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.m == other.m
            and self.features.shape == other.features.shape
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.given, other.given)
            and np.array_equal(self.true, other.true)
        )

    __hash__ = None

    def samples(self):
        for i in range(len(self)):
            yield Sample(int(self.ids[i]), self.features[i], int(self.given[i]), int(self.true[i]))

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        return Dataset(self.ids[index], self.features[index], self.given[index], self.true[index], self.m)

    def with_given(self, given) -> Dataset:
        return Dataset(self.ids, self.features, given, self.true, self.m)

    def with_features(self, features) -> Dataset:
        return Dataset(self.ids, features, self.given, self.true, self.m)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.given != UNLABELED

    def index_of(self, ids) -> np.ndarray:
        """Row positions of the given ids (``KeyError`` if one is absent)."""
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        return np.array([lookup[int(i)] for i in np.asarray(ids).ravel()], dtype=np.int64)


@dataclass(frozen=True)
class NoiseSpec:
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigurationError(f"noise ratio {self.ratio} outside [0, 1]", "noise_ratio")


@dataclass(frozen=True)
class BatchPlan:
    labeled_per_batch: int = 32
    unlabeled_per_batch: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.labeled_per_batch < 0 or self.unlabeled_per_batch < 0:
            raise ConfigurationError("batch sizes must be >= 0")
        if self.labeled_per_batch + self.unlabeled_per_batch <= 0:
            raise ConfigurationError("batch plan must draw at least one sample")


def inject_uniform_noise(dataset: Dataset, spec: NoiseSpec) -> Dataset:
    """Flip exactly ``round(ratio * N)`` labels, each to a different class chosen uniformly."""
    if np.any(dataset.given == UNLABELED):
        raise InputError("noise injection needs every sample labeled")
    n = len(dataset)
    n_flip = int(round(spec.ratio * n))
    if n_flip == 0:
        return dataset
    if dataset.m < 2:
        raise ConfigurationError("need at least 2 classes to flip labels", "m")
    rng = np.random.default_rng(spec.seed)
    rows = rng.choice(n, size=n_flip, replace=False)
    # offset in 1..m-1 never maps a class onto itself
    offsets = rng.integers(1, dataset.m, size=n_flip)
    given = dataset.given.copy()
    given[rows] = (given[rows] + offsets) % dataset.m
    return dataset.with_given(given)


def class_directions(m: int, d: int) -> np.ndarray:
    """Unit vectors ``[m x d]``: regular-simplex vertices when ``d >= m - 1``, else evenly spaced on a circle."""
    if d >= m - 1:
        centered = np.eye(m) - 1.0 / m
        # orthonormal basis of the (m-1)-dim span of the centered vertices
        _, _, vt = np.linalg.svd(centered)
        coords = centered @ vt[: m - 1].T
        coords /= np.linalg.norm(coords, axis=1, keepdims=True)
        out = np.zeros((m, d))
        out[:, : m - 1] = coords
        return out
    angles = 2.0 * math.pi * np.arange(m) / m
    out = np.zeros((m, d))
    out[:, 0] = np.cos(angles)
    out[:, 1] = np.sin(angles)
    return out


def _assemble(features, labels, m):
    ids = np.arange(len(labels))
    return Dataset(ids, features, labels, labels, m)


def make_gaussian_clusters(m, n_per_class, d, separation, noise_sigma, seed) -> Dataset:
    """Isotropic Gaussian blobs centered at ``separation * class_directions(m, d)``."""
    if m < 2 or d < 2:
        raise ConfigurationError("gaussian clusters need m >= 2 and d >= 2")
    if n_per_class <= 0:
        raise InputError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    centers = separation * class_directions(m, d)
    labels = np.repeat(np.arange(m), n_per_class)
    features = centers[labels] + noise_sigma * rng.standard_normal((len(labels), d))
    return _assemble(features, labels, m)


def ring_radii(m, radius_gap):
    return 1.0 + radius_gap * np.arange(m)


def make_rings(m=2, n_per_class=500, radius_gap=2.0, noise_sigma=0.2, seed=0) -> Dataset:
    """Concentric 2-d annuli; class ``k`` has mean radius ``1 + k * radius_gap``."""
    if m < 2:
        raise ConfigurationError("rings need m >= 2", "m")
    if n_per_class <= 0:
        raise InputError("n_per_class must be positive; empty dataset")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(m), n_per_class)
    radius = ring_radii(m, radius_gap)[labels] + noise_sigma * rng.standard_normal(len(labels))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=len(labels))
    features = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return _assemble(features, labels, m)


def split(dataset: Dataset, train_frac, valid_frac, seed, clean_valid_count=None):
    """Seeded disjoint partition into ``(train, valid, test)``.

    Sizes are ``round(frac * N)`` for train and valid; test takes the rest.
    With ``clean_valid_count`` the validation part is cut down to that many
    samples (meant to stay noise-free) and the remainder joins train.
    Noise is injected by the caller afterwards.
    """
    if train_frac <= 0 or valid_frac <= 0 or train_frac + valid_frac >= 1:
        raise ConfigurationError("fractions must be positive with sum < 1", "train_frac")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_frac * n))
    n_valid = int(round(valid_frac * n))
    if n_train + n_valid >= n:
        raise ConfigurationError("split leaves no test samples", "valid_frac")
    train_idx = perm[:n_train]
    valid_idx = perm[n_train : n_train + n_valid]
    test_idx = perm[n_train + n_valid :]
    if clean_valid_count is not None:
        if not 0 < clean_valid_count <= n_valid:
            raise ConfigurationError(f"clean_valid_count must be in 1..{n_valid}", "clean_valid_count")
        train_idx = np.concatenate([train_idx, valid_idx[clean_valid_count:]])
        valid_idx = valid_idx[:clean_valid_count]
    return dataset.subset(train_idx), dataset.subset(valid_idx), dataset.subset(test_idx)


def normalize(dataset: Dataset, stats=None):
    """Standardize features; returns ``(dataset, (mean, std))``.

    Pass the training set's ``stats`` to transform validation/test data.
    """
    if len(dataset) == 0:
        raise InputError("cannot normalize an empty dataset")
    if stats is None:
        mean = dataset.features.mean(axis=0)
        std = np.maximum(dataset.features.std(axis=0), 1e-8)
    else:
        mean, std = stats
    return dataset.with_features((dataset.features - mean) / std), (mean, std)


def save_csv(dataset: Dataset, path) -> None:
    header = ["id", "given_label", "true_label"] + [f"f{k}" for k in range(dataset.d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in dataset.samples():
            w.writerow([s.id, s.given_label, s.true_label] + [f"{v:.17g}" for v in s.features])


def load_csv(path, m=None) -> Dataset:
    """Read the ``id,given_label,true_label,f0..`` format.

    ``m`` defaults to one more than the largest label in the file.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("missing header", 1)
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["id", "given_label", "true_label"]:
        raise ParseError("header must start with id,given_label,true_label", 1)
    d = len(header) - 3
    if header[3:] != [f"f{k}" for k in range(d)]:
        raise ParseError("feature columns must be f0..f{d-1}", 1)
    ids, given, true, feats = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 3:
            raise FormatError(f"expected {d} features, found {len(row) - 3}", lineno)
        try:
            ids.append(int(row[0]))
            given.append(int(row[1]))
            true.append(int(row[2]))
            feats.append([float(v) for v in row[3:]])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if given[-1] < UNLABELED or true[-1] < 0:
            raise ParseError("negative label", lineno)
    if m is None:
        m = max([*given, *true, 0]) + 1
    features = np.array(feats, dtype=float).reshape(len(ids), d)
    return Dataset(np.array(ids), features, np.array(given), np.array(true), m)


class BatchScheduler:
    """Per-epoch batches over an unlabeled stream with a cycling labeled stream.

    Every call to :meth:`epoch` visits each id of ``all_ids`` once in a
    fresh shuffled order. Each batch also gets ``labeled_per_batch`` ids from
    a shuffled cycle over ``labeled_ids`` that reshuffles on wrap and keeps
    its position across epochs.
    """

    def __init__(self, labeled_ids, all_ids, plan: BatchPlan):
        self.labeled_ids = np.asarray(labeled_ids, dtype=np.int64)
        self.all_ids = np.asarray(all_ids, dtype=np.int64)
        if self.all_ids.size == 0:
            raise InputError("scheduler needs at least one sample")
        if not np.isin(self.labeled_ids, self.all_ids).all():
            raise InputError("labeled ids must be a subset of all ids")
        self.plan = plan
        root = np.random.SeedSequence(plan.seed)
        s_all, s_lab = root.spawn(2)
        self._rng_all = np.random.default_rng(s_all)
        self._rng_lab = np.random.default_rng(s_lab)
        self._lab_order = np.empty(0, dtype=np.int64)
        self._lab_pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.all_ids.size / max(self.plan.unlabeled_per_batch, 1))

    def _draw_labeled(self, k):
        if k == 0 or self.labeled_ids.size == 0:
            return np.empty(0, dtype=np.int64)
        out = []
        while len(out) < k:
            if self._lab_pos >= self._lab_order.size:
                self._lab_order = self._rng_lab.permutation(self.labeled_ids)
                self._lab_pos = 0
            take = min(k - len(out), self._lab_order.size - self._lab_pos)
            out.extend(self._lab_order[self._lab_pos : self._lab_pos + take])
            self._lab_pos += take
        return np.array(out, dtype=np.int64)

    def epoch(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """List of ``(labeled_ids, unlabeled_ids)`` pairs for one epoch."""
        order = self._rng_all.permutation(self.all_ids)
        size = max(self.plan.unlabeled_per_batch, 1)
        batches = []
        for start in range(0, order.size, size):
            batches.append((self._draw_labeled(self.plan.labeled_per_batch), order[start : start + size]))
        return batches


def batch_scheduler(labeled_ids, all_ids, plan: BatchPlan) -> BatchScheduler:
    return BatchScheduler(labeled_ids, all_ids, plan)
