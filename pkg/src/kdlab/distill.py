"""Distillation objective, SGD optimizer, schedulers, and training loops.

The student minimizes ``(1 - alpha) * t^2 * L_kd + alpha * L_task`` where
``L_kd`` is the cross-entropy of the student's temperature-softened
probabilities under the teacher's, and ``L_task`` is ordinary cross-entropy
against the hard labels (unsoftened logits). ``L_task`` is averaged over
the batch so that ``alpha`` balances the two terms independently of batch
size. Both distributions are softened with the same temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .errors import ConfigError, ContractError, ParameterError, ShapeError
from .models import _BaseModel, ParamStore
from .tensor import Tape, Tensor, backward, log, log_softmax, no_grad, softmax_t


@dataclass
class DistillConfig:
    """Hyperparameters for one training run (regular or distilled)."""

    alpha: float = 0.45
    temperature: float = 11.0
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 15
    sched_step: int = 5
    sched_gamma: float = 0.3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.sched_gamma <= 1.0:
            raise ParameterError(f"sched_gamma must lie in (0, 1], got {self.sched_gamma}")
        if self.sched_step < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ParameterError(f"invalid schedule/batch settings: {self}")


@dataclass(frozen=True)
class SoftTargets:
    """Row-stochastic teacher/student probability pair."""

    teacher_probs: Tensor
    student_probs: Tensor

    def __post_init__(self):
        for name, t in (("teacher", self.teacher_probs), ("student", self.student_probs)):
            _check_stochastic(t, name, tol=1e-9)


def _check_stochastic(t: Tensor, name: str, tol: float) -> None:
    rows = t.data.sum(axis=-1)
    if np.max(np.abs(rows - 1.0)) > tol:
        raise ContractError(f"{name} probabilities have rows off 1 by more than {tol}")
    if t.data.min() < -tol or t.data.max() > 1.0 + tol:
        raise ContractError(f"{name} probabilities fall outside [0, 1]")


@dataclass(frozen=True)
class MetricsReport:
    """Per-epoch training record: losses, top-1 accuracy, mAP."""

    epoch: int
    split: str
    loss_total: float
    loss_kd: float
    loss_task: float
    acc: float
    mean_ap: float


# ---------------------------------------------------------------------------
# losses


def kd_loss(teacher_probs: Tensor, student_probs: Tensor) -> Tensor:
    """Mean over the batch of the cross-entropy of S under T.

    Log arguments are clamped below at 1e-12; a zero teacher probability
    contributes exactly zero.
    """
    if teacher_probs.shape != student_probs.shape or teacher_probs.ndim != 2:
        raise ShapeError(
            f"kd_loss: shapes {teacher_probs.shape} vs {student_probs.shape}")
    _check_stochastic(teacher_probs, "teacher", tol=1e-6)
    _check_stochastic(student_probs, "student", tol=1e-6)
    n = teacher_probs.shape[0]
    ll = teacher_probs.detach() * log(student_probs)
    return -(ll.sum() / float(n))


def task_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Cross-entropy of logits against one-hot labels, mean over the batch."""
    if y.shape != y_hat.shape or y.ndim != 2:
        raise ShapeError(f"task_loss: shapes {y.shape} vs {y_hat.shape}")
    rows = y.data.sum(axis=-1)
    if (not np.all(rows == 1.0)) or not np.all((y.data == 0.0) | (y.data == 1.0)):
        raise ContractError("task_loss: labels must be one-hot rows")
    n = y.shape[0]
    ll = y.detach() * log_softmax(y_hat)
    return -(ll.sum() / float(n))


def total_loss(l_kd, l_task, alpha: float, t: float):
    """Affine combination (1 - alpha) * t^2 * l_kd + alpha * l_task."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if t <= 0:
        raise ParameterError(f"temperature must be positive, got {t}")
    return l_kd * ((1.0 - alpha) * t * t) + l_task * alpha


def one_hot(labels, num_classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(
            f"label index out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return Tensor(out)


# ---------------------------------------------------------------------------
# optimizer and schedule


class OptimizerState:
    """SGD velocity buffers (zero-initialized), one per parameter."""

    def __init__(self, params: ParamStore, lr: float):
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.lr = lr


def sgd_step(params: ParamStore, state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*theta); theta <- theta - lr*v; clear grads."""
    state.lr = lr
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {name!r} has no gradient")
        v = state.velocity[name]
        v *= momentum
        v += p.grad + weight_decay * p.data
        p.data -= lr * v
        p.grad = None


def lr_at(epoch: int, base_lr: float, step: int, gamma: float) -> float:
    """Step decay: base_lr * gamma ** floor(epoch / step)."""
    if epoch < 0 or step < 1:
        raise ParameterError(f"lr_at: epoch {epoch} / step {step} invalid")
    return base_lr * gamma ** (epoch // step)


# ---------------------------------------------------------------------------
# training loops


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _weighted(total: float, n: int) -> float:
    return total / n if n else 0.0


def model_logits(model: _BaseModel, images: np.ndarray, batch_size: int) -> np.ndarray:
    """Eval-mode logits over a preprocessed image array, batched, no grads."""
    rows = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            rows.append(model.forward(Tensor(images[start:start + batch_size]),
                                      mode="eval").data)
    return np.vstack(rows)


def evaluate_split(model: _BaseModel, ds, aug, batch_size: int,
                   teacher: _BaseModel | None = None,
                   alpha: float = 0.45, temperature: float = 11.0,
                   teacher_logits: np.ndarray | None = None):
    """Full-split eval-mode pass: losses, accuracy, mAP (no gradients)."""
    images = data_mod.preprocess(ds.images.data, aug)
    labels = ds.labels
    n = len(labels)
    num_classes = model.spec.num_classes
    if teacher is not None and teacher_logits is None:
        teacher_logits = model_logits(teacher, images, batch_size)
    logits_rows = []
    sum_task = 0.0
    sum_kd = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            xb = Tensor(images[start:start + batch_size])
            yb = labels[start:start + batch_size]
            logits = model.forward(xb, mode="eval")
            sum_task += task_loss(one_hot(yb, num_classes), logits).item() * len(yb)
            if teacher_logits is not None:
                t_probs = softmax_t(Tensor(teacher_logits[start:start + batch_size]),
                                    temperature)
                s_probs = softmax_t(logits, temperature)
                sum_kd += kd_loss(t_probs, s_probs).item() * len(yb)
            logits_rows.append(logits.data)
    l_task = _weighted(sum_task, n)
    l_kd = _weighted(sum_kd, n)
    l_total = (total_loss(l_kd, l_task, alpha, temperature)
               if teacher_logits is not None else l_task)
    pred = metrics_mod.ScoredPredictions(np.vstack(logits_rows), labels)
    return l_total, l_kd, l_task, metrics_mod.top1_accuracy(pred), metrics_mod.mean_ap(pred)


def _fit(model: _BaseModel, teacher: _BaseModel | None, train_ds, val_ds,
         cfg: DistillConfig, aug) -> list[MetricsReport]:
    if len(train_ds.labels) == 0 or len(val_ds.labels) == 0:
        raise ConfigError("training requires non-empty train and validation splits")
    num_classes = model.spec.num_classes
    if len(train_ds.class_names) != num_classes:
        raise ConfigError(
            f"dataset has {len(train_ds.class_names)} classes, model expects {num_classes}")
    if teacher is not None and teacher.spec.num_classes != num_classes:
        raise ConfigError(
            f"teacher emits {teacher.spec.num_classes} classes, student expects {num_classes}")
    if aug is None:
        aug = data_mod.AugmentConfig(
            enabled=False,
            target_size=(model.spec.image_size, model.spec.image_size))
    state = OptimizerState(model.params, cfg.lr)
    # the teacher is frozen, so its logits on any fixed input set can be
    # computed once: always for the (never-augmented) validation split, and
    # for the train split whenever train-time augmentation is off
    train_teacher_logits = None
    val_teacher_logits = None
    if teacher is not None:
        val_teacher_logits = model_logits(
            teacher, data_mod.preprocess(val_ds.images.data, aug), cfg.batch_size)
        if not aug.enabled:
            train_teacher_logits = model_logits(
                teacher, data_mod.preprocess(train_ds.images.data, aug), cfg.batch_size)
    reports: list[MetricsReport] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr, cfg.sched_step, cfg.sched_gamma)
        shuffle_seed = _derived_seed(cfg.seed, epoch, 0)
        sum_task = 0.0
        sum_kd = 0.0
        seen = 0
        logits_rows = []
        label_rows = []
        for bi, batch in enumerate(
                data_mod.batches(train_ds, cfg.batch_size, shuffle=True,
                                 seed=shuffle_seed)):
            rng = np.random.default_rng(_derived_seed(cfg.seed, epoch, bi + 1))
            x = Tensor(data_mod.augment_batch(batch.images.data, aug, rng))
            yb = one_hot(batch.labels, num_classes)
            nb = len(batch.labels)
            with Tape() as tape:
                logits = model.forward(x, mode="train")
                l_task = task_loss(yb, logits)
                if teacher is None:
                    kd_value = 0.0
                    loss = l_task
                else:
                    with no_grad():
                        if train_teacher_logits is not None:
                            zt = Tensor(train_teacher_logits[batch.indices])
                        else:
                            zt = teacher.forward(x, mode="eval")
                        t_probs = softmax_t(zt, cfg.temperature)
                    s_probs = softmax_t(logits, cfg.temperature)
                    l_kd = kd_loss(t_probs, s_probs)
                    kd_value = l_kd.item()
                    loss = total_loss(l_kd, l_task, cfg.alpha, cfg.temperature)
                backward(tape, loss)
            sgd_step(model.params, state, lr, cfg.momentum, cfg.weight_decay)
            sum_task += l_task.item() * nb
            sum_kd += kd_value * nb
            seen += nb
            logits_rows.append(logits.data)
            label_rows.append(batch.labels)
        train_task = _weighted(sum_task, seen)
        train_kd = _weighted(sum_kd, seen)
        train_total = (total_loss(train_kd, train_task, cfg.alpha, cfg.temperature)
                       if teacher is not None else train_task)
        pred = metrics_mod.ScoredPredictions(np.vstack(logits_rows),
                                             np.concatenate(label_rows))
        reports.append(MetricsReport(epoch, "train", train_total, train_kd,
                                     train_task, metrics_mod.top1_accuracy(pred),
                                     metrics_mod.mean_ap(pred)))
        v_total, v_kd, v_task, v_acc, v_map = evaluate_split(
            model, val_ds, aug, cfg.batch_size, teacher, cfg.alpha,
            cfg.temperature, teacher_logits=val_teacher_logits)
        reports.append(MetricsReport(epoch, "test", v_total, v_kd, v_task,
                                     v_acc, v_map))
    return reports


def train_regular(model: _BaseModel, train_ds, val_ds, config: DistillConfig,
                  augment_cfg=None) -> list[MetricsReport]:
    """Hard-label training: cross-entropy, SGD with the step schedule."""
    return _fit(model, None, train_ds, val_ds, config, augment_cfg)


def distill_train(teacher: _BaseModel, student: _BaseModel, train_ds, val_ds,
                  config: DistillConfig, augment_cfg=None) -> list[MetricsReport]:
    """Teacher-guided training; the teacher stays frozen in eval mode."""
    return _fit(student, teacher, train_ds, val_ds, config, augment_cfg)
