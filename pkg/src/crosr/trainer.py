"""SGD training on the joint classification + reconstruction objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bench import UNKNOWN, LabeledDataset
from .dhrnet import DHRNetModel, extract_features, forward
from .errors import ConfigurationError, InputError, NumericalError
from .tensor import Tape, Tensor, add, l2_reconstruction_loss, scale, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.02
    # fractions of the epoch budget at which the rate is multiplied by lr_decay
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    momentum: float = 0.9
    cls_weight: float = 1.0
    rec_weight: float = 1.0
    seed: int = 0
    # overrides the network's own dropout rate when set
    dropout: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.dropout is not None and not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.dropout}")

    def rate_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for frac in self.lr_milestones:
            milestone = int(frac * self.epochs)
            if milestone > 0 and epoch >= milestone:
                lr *= self.lr_decay
        return lr


@dataclass
class EpochRecord:
    epoch: int
    cls_loss: float
    rec_loss: float
    val_acc: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,cls_loss,rec_loss,val_acc"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.cls_loss:.10g},{r.rec_loss:.10g},{r.val_acc:.6f}")
        return "\n".join(lines) + "\n"

    @property
    def total_losses(self) -> list[float]:
        return [r.cls_loss + r.rec_loss for r in self.records]


def joint_loss(model: DHRNetModel, params: dict[str, Tensor], x, labels, cls_weight: float = 1.0,
               rec_weight: float = 1.0, mode: str = "train", rng: np.random.Generator | None = None,
               dropout_rate: float | None = None):
    """Weighted cross-entropy plus reconstruction MSE.

    Returns ``(total, cross_entropy, reconstruction)``; ``reconstruction`` is
    ``None`` for decoder-free networks. A zero reconstruction weight leaves the
    term out of ``total`` entirely.
    """
    out = forward(model, x, mode, rng=rng, params=params, dropout_rate=dropout_rate)
    ce = softmax_cross_entropy(out.y, labels)
    total = scale(ce, cls_weight)
    rec = None
    if out.recon is not None:
        rec = l2_reconstruction_loss(x if isinstance(x, Tensor) else Tensor(x), out.recon)
        if rec_weight != 0.0:
            total = add(total, scale(rec, rec_weight))
    return total, ce, rec


def _check_known(data: LabeledDataset, num_classes: int) -> None:
    labels = data.labels
    if np.any(labels == UNKNOWN):
        raise InputError("training data contains unknown-class samples; only known classes may be used")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"training labels must lie in [0, {num_classes})")


def train(model: DHRNetModel, data: LabeledDataset, config: TrainConfig = TrainConfig(),
          val: LabeledDataset | None = None) -> tuple[DHRNetModel, TrainLog]:
    """Train ``model`` in place with momentum SGD and a step schedule.

    Batches come from a seeded shuffle each epoch; the last partial batch is
    kept. Accuracy is logged on ``val`` (the training data if omitted).
    """
    n_cls = model.config.num_classes
    _check_known(data, n_cls)
    if tuple(data.shape) != model.config.input_shape:
        raise InputError(f"data shape {data.shape} does not match network input {model.config.input_shape}")
    val = data if val is None else val
    shuffle_rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    names = list(model.params)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = TrainLog()
    n = len(data)

    for epoch in range(config.epochs):
        lr = config.rate_at(epoch)
        order = shuffle_rng.permutation(n)
        cls_sum = rec_sum = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            leaves = {k: Tensor(model.params[k], requires_grad=True) for k in names}
            try:
                with Tape() as tape:
                    total, ce, rec = joint_loss(model, leaves, data.images[idx], data.labels[idx],
                                                config.cls_weight, config.rec_weight, "train", drop_rng,
                                                config.dropout)
                grads = tape.gradient(total, [leaves[k] for k in names])
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch}, batch {bi} (lr={lr:g}): {exc}") from None
            if not np.isfinite(total.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
            for k, g in zip(names, grads):
                v = velocity[k]
                v *= config.momentum
                v += g
                model.params[k] -= lr * v
            cls_sum += ce.item() * idx.size
            rec_sum += (rec.item() if rec is not None else 0.0) * idx.size
        record = EpochRecord(epoch, cls_sum / n, rec_sum / n, closed_set_accuracy(model, val))
        history.records.append(record)
        log.info("epoch %d: cls=%.4f rec=%.4f acc=%.4f", epoch, record.cls_loss, record.rec_loss, record.val_acc)
    return model, history


def closed_set_accuracy(model: DHRNetModel, data: LabeledDataset) -> float:
    """Fraction of samples whose top activation is the true label."""
    if len(data) == 0:
        return 0.0
    y = extract_features(model, data.images, "av")
    return float(np.mean(y.argmax(axis=1) == data.labels))
