"""Agreement filter over averaged predictions and the outer filtering loop."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ifssl.buffer import PredictionBuffer, mva_update
from ifssl.dataio import UNLABELED, Dataset
from ifssl.errors import ConfigurationError
from ifssl.meanteacher import TeacherStudentPair, TrainConfig, TrainResult, train_and_valid

__all__ = [
    "FilterLoopState",
    "IterationRecord",
    "NoiseMetrics",
    "PredictionBuffer",
    "complete_removal_variant",
    "filter_labels",
    "iterative_filter_loop",
    "mva_update",
    "noise_metrics",
    "write_history_csv",
]


def filter_labels(dataset: Dataset, buffer: PredictionBuffer, topk: int = 1) -> Dataset:
    """Mask every label that is not among the ``topk`` averaged scores of its sample.

    A label is kept when fewer than ``topk`` classes score strictly higher,
    so ties at the k-th rank keep it. Already unlabeled samples stay so.
    """
    if topk < 1:
        raise ConfigurationError("topk must be >= 1", "topk")
    scores = buffer.get_many(dataset.ids)
    given = dataset.given.copy()
    labeled = given != UNLABELED
    own = np.full(len(dataset), -np.inf)
    own[labeled] = scores[labeled, given[labeled]]
    n_above = np.sum(scores > own[:, None], axis=1)
    given[labeled & (n_above >= topk)] = UNLABELED
    return dataset.with_given(given)


@dataclass(frozen=True)
class NoiseMetrics:
    """Filter quality against the hidden truth; ``None`` marks an undefined ratio."""

    retained_count: int
    noise_ratio_retained: float | None
    clean_label_recall: float | None
    noisy_label_removal_recall: float | None

    def as_tuple(self):
        return (self.noise_ratio_retained, self.clean_label_recall, self.noisy_label_removal_recall)


def noise_metrics(current: Dataset, original: Dataset) -> NoiseMetrics:
    """Compare the labels kept in ``current`` with the original noisy labels.

    Samples missing from ``current`` (complete removal) count as removed.
    """
    labeled0 = original.given != UNLABELED
    noisy0 = labeled0 & (original.given != original.true)
    clean0 = labeled0 & ~noisy0
    kept = np.zeros(len(original), dtype=bool)
    present = np.isin(original.ids, current.ids)
    if present.any():
        pos = current.index_of(original.ids[present])
        kept[present] = current.given[pos] != UNLABELED
    kept &= labeled0
    n_kept = int(kept.sum())

    def ratio(num, den):
        return None if den == 0 else float(num) / float(den)

    return NoiseMetrics(
        retained_count=n_kept,
        noise_ratio_retained=ratio(np.sum(kept & noisy0), n_kept),
        clean_label_recall=ratio(np.sum(kept & clean0), clean0.sum()),
        noisy_label_removal_recall=ratio(np.sum(~kept & noisy0), noisy0.sum()),
    )


@dataclass
class IterationRecord:
    iteration: int
    valid_acc: float
    retained_count: int
    noise_ratio_retained: float | None
    clean_label_recall: float | None
    noisy_label_removal_recall: float | None
    accepted: bool
    epochs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FilterLoopState:
    """Bookkeeping of the outer loop.

    ``current`` is the label set the last training run used; ``filtered`` is
    the label set produced from the best model's averaged predictions (what
    the next iteration would train on). ``epoch_records`` keeps every run's
    epoch log, indexed by iteration.
    """

    original: Dataset
    current: Dataset
    n_max_iterations: int
    iteration: int = 0
    best: TeacherStudentPair | None = None
    best_valid_acc: float = float("-inf")
    best_iteration: int = -1
    filtered: Dataset | None = None
    history: list[IterationRecord] = field(default_factory=list)
    epoch_records: list[list] = field(default_factory=list)

    @property
    def accepted_iterations(self) -> list[int]:
        return [h.iteration for h in self.history if h.accepted]

    def filtered_metrics(self) -> NoiseMetrics | None:
        return None if self.filtered is None else noise_metrics(self.filtered, self.original)


Trainer = Callable[..., TrainResult]


def _run_loop(train, valid, config, n_max_iterations, trainer, buffer, complete_removal):
    if len(valid) == 0:
        raise ConfigurationError("validation set is empty", "valid_frac")
    if n_max_iterations < 0:
        raise ConfigurationError("must be >= 0", "n_max_iterations")
    if config.topk > train.m:
        raise ConfigurationError("topk exceeds class count", "topk")
    if buffer is None:
        buffer = PredictionBuffer(train.m, config.mva_alpha)
    state = FilterLoopState(original=train, current=train, n_max_iterations=n_max_iterations)

    def run(labels, init, i):
        res = trainer(labels, valid, config, init, buffer, original=train, seed=[config.seed, i])
        m = noise_metrics(labels, train)
        return res, m

    def refilter(buf):
        # filter-from-original unless removal decisions are final
        if complete_removal:
            masked = filter_labels(state.current, buf, config.topk)
            return masked.subset(np.flatnonzero(masked.given != UNLABELED))
        return filter_labels(train, buf, config.topk)

    res, met = run(train, None, 0)
    buffer = res.buffer
    state.best, state.best_valid_acc, state.best_iteration = res.snapshot, res.valid_acc, 0
    state.history.append(IterationRecord(0, res.valid_acc, met.retained_count, *met.as_tuple(), True, len(res.records)))
    state.epoch_records.append(res.records)
    state.filtered = refilter(buffer)

    for i in range(1, n_max_iterations + 1):
        state.iteration = i
        state.current = state.filtered
        res, met = run(state.current, state.best, i)
        buffer = res.buffer
        accepted = res.valid_acc > state.best_valid_acc
        state.history.append(
            IterationRecord(i, res.valid_acc, met.retained_count, *met.as_tuple(), accepted, len(res.records))
        )
        state.epoch_records.append(res.records)
        if not accepted:
            break
        state.best, state.best_valid_acc, state.best_iteration = res.snapshot, res.valid_acc, i
        state.filtered = refilter(buffer)
    return state.best, state


def iterative_filter_loop(
    train: Dataset,
    valid: Dataset,
    config: TrainConfig,
    n_max_iterations: int = 10,
    *,
    trainer: Trainer = train_and_valid,
    buffer: PredictionBuffer | None = None,
):
    """Alternate training and label filtering until validation accuracy stops improving.

    Iteration 0 trains on ``train`` as given. After each accepted iteration
    the labels of the *original* set are re-filtered with the carried-over
    prediction buffer, and the next run continues from the best snapshot.
    A run that does not strictly beat the best validation accuracy ends
    the loop; at most ``n_max_iterations + 1`` runs happen.

    ``trainer`` has the signature of :func:`ifssl.meanteacher.train_and_valid`
    and may be replaced by a scripted stub.

    Returns ``(best_pair, state)``.
    """
    return _run_loop(train, valid, config, n_max_iterations, trainer, buffer, complete_removal=False)


def complete_removal_variant(
    train: Dataset,
    valid: Dataset,
    config: TrainConfig,
    n_max_iterations: int = 10,
    *,
    trainer: Trainer = train_and_valid,
    buffer: PredictionBuffer | None = None,
):
    """Same loop, but filtered samples are deleted from both streams for good.

    Each pass filters the current (already reduced) set, so a removed
    sample never comes back.
    """
    return _run_loop(train, valid, config, n_max_iterations, trainer, buffer, complete_removal=True)


HISTORY_COLUMNS = (
    "iteration",
    "valid_acc",
    "retained_count",
    "noise_ratio_retained",
    "clean_label_recall",
    "noisy_label_removal_recall",
)


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for h in history:
            w.writerow([_fmt(getattr(h, c)) for c in HISTORY_COLUMNS])
