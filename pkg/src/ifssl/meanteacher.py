"""Student/teacher training with EMA weights and early stopping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from ifssl.buffer import PredictionBuffer
from ifssl.dataio import UNLABELED, BatchPlan, BatchScheduler, Dataset
from ifssl.errors import ConfigurationError, DivergenceError, UndefinedAccuracyError
from ifssl.losses import CONSISTENCY_KINDS, UNSUPERVISED_TERMS, LossWeights, total_batch_loss
from ifssl.netcore import (
    ACTIVATIONS,
    NetworkParams,
    OptimizerState,
    backward,
    cosine_lr,
    forward,
    init_params,
    sgd_nesterov_step,
    softmax,
)


@dataclass
class TeacherStudentPair:
    student: NetworkParams
    teacher: NetworkParams
    beta: float = 0.99

    def __post_init__(self):
        if self.student.shapes != self.teacher.shapes:
            raise ConfigurationError("student and teacher shapes differ")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError("beta must lie in [0, 1]", "beta")

    @classmethod
    def from_student(cls, student: NetworkParams, beta=0.99) -> TeacherStudentPair:
        return cls(student, student.copy(), beta)

    def copy(self) -> TeacherStudentPair:
        return TeacherStudentPair(self.student.copy(), self.teacher.copy(), self.beta)


def ema_update(pair: TeacherStudentPair, beta=None) -> TeacherStudentPair:
    """``teacher <- beta * teacher + (1 - beta) * student`` for every tensor."""
    beta = pair.beta if beta is None else beta
    if pair.student.shapes != pair.teacher.shapes:
        raise RuntimeError("student/teacher shape mismatch in EMA update")
    if beta == 1.0:
        teacher = pair.teacher
    elif beta == 0.0:
        teacher = pair.student.copy()
    else:
        teacher = NetworkParams.from_tensors(
            [beta * t + (1.0 - beta) * s for t, s in zip(pair.teacher.tensors(), pair.student.tensors())],
            pair.teacher.activation,
        )
    return TeacherStudentPair(pair.student, teacher, pair.beta)


def ema_decay(beta: float, step: int, warmup: bool = True) -> float:
    """Decay for optimizer step ``step`` (1-based).

    With ``warmup`` the decay is capped at ``1 - 1/(step + 1)`` so the early
    teacher is a plain average of the students seen so far. ``beta == 1``
    (frozen teacher) is never relaxed.
    """
    if not warmup or beta >= 1.0:
        return beta
    return min(1.0 - 1.0 / (step + 1), beta)


@dataclass(frozen=True)
class TrainConfig:
    """Settings of one ``train_and_valid`` run.

    ``unsupervised`` picks the extra loss term. Only ``meanteacher`` keeps a
    separate EMA teacher; for the other terms the teacher tracks the
    student exactly (``beta`` is treated as 0).
    """

    max_epochs: int = 100
    patience: int = 20
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4
    beta: float = 0.99
    weights: LossWeights = field(default_factory=LossWeights)
    unsupervised: str = "meanteacher"
    consistency: str = "mse"
    topk: int = 1
    mva_alpha: float = 0.6
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    labeled_per_batch: int = 32
    unlabeled_per_batch: int = 96
    jitter: float = 0.1
    ema_warmup: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs <= 0:
            raise ConfigurationError("must be > 0", "max_epochs")
        if not 0 < self.patience <= self.max_epochs:
            raise ConfigurationError("must satisfy 0 < patience <= max_epochs", "patience")
        if self.unsupervised not in UNSUPERVISED_TERMS:
            raise ConfigurationError(f"unknown term {self.unsupervised!r}", "unsupervised")
        if self.consistency not in CONSISTENCY_KINDS:
            raise ConfigurationError(f"unknown kind {self.consistency!r}", "consistency")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}", "activation")
        if self.topk < 1:
            raise ConfigurationError("must be >= 1", "topk")
        if not 0.0 <= self.mva_alpha < 1.0:
            raise ConfigurationError("must lie in [0, 1)", "mva_alpha")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError("must lie in [0, 1]", "beta")
        if self.jitter < 0:
            raise ConfigurationError("must be >= 0", "jitter")
        BatchPlan(self.labeled_per_batch, self.unlabeled_per_batch)

    @property
    def effective_beta(self) -> float:
        return self.beta if self.unsupervised == "meanteacher" else 0.0

    def plan(self, seed) -> BatchPlan:
        if self.unsupervised == "none":
            # the whole batch is supervised and the stream is the labeled set
            return BatchPlan(0, self.labeled_per_batch + self.unlabeled_per_batch, seed)
        return BatchPlan(self.labeled_per_batch, self.unlabeled_per_batch, seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    student_valid_acc: float
    teacher_valid_acc: float
    lr: float
    consistency_weight: float

    def to_dict(self) -> dict:
        return asdict(self)


class TrainResult(NamedTuple):
    snapshot: TeacherStudentPair
    valid_acc: float
    records: list
    buffer: PredictionBuffer


def predict_proba(params: NetworkParams, features) -> np.ndarray:
    return softmax(forward(params, features))


def evaluate(params: NetworkParams, dataset: Dataset, label_source="given") -> float:
    """Fraction of labeled samples whose argmax prediction matches the reference label.

    ``label_source`` is ``given`` (validation sets) or ``true`` (test sets).
    """
    if len(dataset) == 0:
        raise UndefinedAccuracyError("empty dataset")
    if label_source == "given":
        ref = dataset.given
    elif label_source == "true":
        ref = dataset.true
    else:
        raise ConfigurationError(f"unknown label source {label_source!r}")
    mask = ref != UNLABELED
    if not mask.any():
        raise UndefinedAccuracyError("no labeled samples to score")
    pred = np.argmax(forward(params, dataset.features[mask]), axis=1)
    return float(np.mean(pred == ref[mask]))


def _positions(dataset: Dataset):
    order = np.argsort(dataset.ids, kind="stable")
    sorted_ids = dataset.ids[order]

    def lookup(ids):
        return order[np.searchsorted(sorted_ids, ids)]

    return lookup


def new_pair(config: TrainConfig, d: int, m: int) -> TeacherStudentPair:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11CE]))
    student = init_params([d, *config.hidden, m], rng, config.activation)
    return TeacherStudentPair.from_student(student, config.effective_beta)


def train_and_valid(
    train: Dataset,
    valid: Dataset,
    config: TrainConfig,
    init: TeacherStudentPair | None = None,
    buffer: PredictionBuffer | None = None,
    *,
    original: Dataset | None = None,
    seed=None,
) -> TrainResult:
    """Train a student/teacher pair on ``train`` and keep the best teacher on ``valid``.

    Samples of ``train`` with a label feed the supervised stream; every
    sample feeds the unsupervised stream. After each epoch the teacher's
    predictions on all of ``train`` go into ``buffer``. Stops after
    ``config.patience`` epochs without a strict gain in teacher validation
    accuracy, or at ``config.max_epochs``.

    ``original`` supplies the pre-filtering labels that the push-away term
    pushes masked samples away from. ``seed`` overrides ``config.seed`` for
    batching and input jitter.

    Raises:
      DivergenceError: a loss or gradient became non-finite. The completed
        epoch records are attached.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ConfigurationError("training and validation sets must be non-empty")
    m, d = train.m, train.d
    term = config.unsupervised
    beta = config.effective_beta
    if init is None:
        pair = new_pair(config, d, m)
    else:
        pair = TeacherStudentPair(init.student.copy(), init.teacher.copy(), beta)
    if pair.student.n_inputs != d or pair.student.n_classes != m:
        raise ConfigurationError("network shape does not match the data")
    if buffer is None:
        buffer = PredictionBuffer(m, config.mva_alpha)

    labeled_ids = train.ids[train.labeled_mask]
    stream_ids = labeled_ids if term == "none" else train.ids
    if stream_ids.size == 0:
        raise ConfigurationError("no labeled samples for supervised-only training")

    push = None
    if term == "pushaway":
        if original is None:
            original = train
        pos = _positions(original)(train.ids)
        push = np.where(train.labeled_mask, UNLABELED, original.given[pos])

    seq = np.random.SeedSequence(config.seed if seed is None else seed)
    s_sched, s_jitter = seq.spawn(2)
    sched = BatchScheduler(labeled_ids, stream_ids, config.plan(int(s_sched.generate_state(1)[0])))
    jitter_rng = np.random.default_rng(s_jitter)
    opt = OptimizerState.for_params(pair.student, config.base_lr, config.momentum, config.weight_decay, config.max_epochs)
    lookup = _positions(train)
    X, given = train.features, train.given

    records: list[EpochRecord] = []
    best, best_acc, best_epoch = pair.copy(), -math.inf, -1
    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config.base_lr, config.max_epochs)
        losses = []
        weight = 0.0
        for lab_ids, unl_ids in sched.epoch():
            if term == "none":
                rows = lookup(unl_ids)
                n_lab = rows.size
            else:
                rows = np.concatenate([lookup(lab_ids), lookup(unl_ids)])
                n_lab = lab_ids.size
            x = X[rows]
            xs = x + config.jitter * jitter_rng.standard_normal(x.shape) if config.jitter > 0 else x
            logits = forward(pair.student, xs)
            teacher_probs = softmax(forward(pair.teacher, x)) if term == "meanteacher" else None
            bl = total_batch_loss(
                logits,
                n_lab,
                given[rows[:n_lab]],
                config.weights,
                epoch,
                mode=term,
                consistency=config.consistency,
                teacher_probs=teacher_probs,
                push_labels=None if push is None else push[rows],
            )
            if not math.isfinite(bl.loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", records)
            grads = backward(pair.student, xs, bl.grad_logits)
            try:
                student, opt = sgd_nesterov_step(pair.student, grads, opt, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}", records) from None
            pair = ema_update(TeacherStudentPair(student, pair.teacher, beta), ema_decay(beta, opt.step, config.ema_warmup))
            losses.append(bl.loss)
            weight = bl.unsupervised_weight
        if not (pair.student.is_finite() and pair.teacher.is_finite()):
            raise DivergenceError(f"non-finite parameters after epoch {epoch}", records)

        buffer.update_many(train.ids, predict_proba(pair.teacher, X))
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else 0.0,
            student_valid_acc=evaluate(pair.student, valid),
            teacher_valid_acc=evaluate(pair.teacher, valid),
            lr=lr,
            consistency_weight=weight,
        )
        records.append(rec)
        if rec.teacher_valid_acc > best_acc:
            best, best_acc, best_epoch = pair.copy(), rec.teacher_valid_acc, epoch
        elif epoch - best_epoch >= config.patience:
            break
    return TrainResult(best, best_acc, records, buffer)
