"""Standard, adversarial and underfitting training with momentum SGD."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, attack
from .data import AugmentationSpec, LabeledDataset, augment_batch
from .errors import ConfigurationError, TrainingDivergence
from .model import Network, forward, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    adversary: AttackConfig | None = None
    underfit_target_accuracy: float | None = None
    seed: int = 0
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    val_fraction: float = 0.1
    grad_clip: float | None = None
    clean_warmup_epochs: int = 0
    epsilon_warmup_epochs: int = 0

    def __post_init__(self):
        if self.adversary is not None and self.underfit_target_accuracy is not None:
            raise ConfigurationError("adversarial and underfit modes are mutually exclusive")
        if self.underfit_target_accuracy is not None and not 0 <= self.underfit_target_accuracy <= 1:
            raise ConfigurationError(f"underfit target must be in [0, 1], got {self.underfit_target_accuracy}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError(f"need epochs >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate, momentum and weight_decay must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigurationError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.clean_warmup_epochs < 0 or self.epsilon_warmup_epochs < 0:
            raise ConfigurationError("clean_warmup_epochs and epsilon_warmup_epochs must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.adversary is not None and self.augmentation.per_image_standardize:
            # the attack budget is defined on raw pixels
            raise ConfigurationError("per-image standardization cannot be combined with an adversary")

    @property
    def mode(self) -> str:
        if self.adversary is not None:
            return "adversarial"
        if self.underfit_target_accuracy is not None:
            return "underfit"
        return "standard"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode
        return d


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    FIELDS = ("epoch", "loss", "train_acc", "val_acc", "seconds")

    def append(self, epoch: int, loss: float, train_acc: float, val_acc: float | None, seconds: float) -> None:
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise ValueError(f"epoch {epoch} does not follow {self.records[-1]['epoch']}")
        self.records.append(dict(epoch=epoch, loss=loss, train_acc=train_acc, val_acc=val_acc, seconds=seconds))

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS)
            writer.writeheader()
            for rec in self.records:
                writer.writerow({k: ("NA" if rec[k] is None else rec[k]) for k in self.FIELDS})


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, state: dict[str, np.ndarray]) -> tuple[dict, dict]:
    """Heavy-ball SGD: ``v = momentum*v + g + wd*p``, ``p = p - lr*v``."""
    new_params, new_state = {}, {}
    for name, p in params.items():
        v = grads[name] + weight_decay * p
        if name in state:
            v = momentum * state[name] + v
        new_state[name] = v
        new_params[name] = p - lr * v
    return new_params, new_state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their joint l2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}


def evaluate_accuracy(net, data: LabeledDataset, batch_size: int = 64) -> float:
    """Fraction of images whose argmax prediction equals the label."""
    return float(np.mean(predict_dataset(net, data, batch_size) == data.labels))


def predict_dataset(net, data: LabeledDataset, batch_size: int = 64) -> np.ndarray:
    preds = [predict(net, data.batch(np.arange(i, min(i + batch_size, len(data)))))
             for i in range(0, len(data), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def split_validation(data: LabeledDataset, fraction: float) -> tuple[LabeledDataset, LabeledDataset | None]:
    """Hold out the last ``fraction`` of the set (order preserved)."""
    n_val = int(round(len(data) * fraction))
    if n_val == 0:
        return data, None
    idx = np.arange(len(data))
    return data.subset(idx[:-n_val]), data.subset(idx[-n_val:])


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 0:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * step / total))


def adversary_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> AttackConfig | None:
    """The attack used at optimizer step ``step`` (0-based).

    The first ``clean_warmup_epochs`` epochs train on clean inputs. Over the next
    ``epsilon_warmup_epochs`` epochs budget and step size grow linearly, reaching
    the configured values at the first step after the ramp.
    """
    adv = cfg.adversary
    if adv is None:
        return None
    step -= cfg.clean_warmup_epochs * steps_per_epoch
    if step < 0:
        return None
    ramp = cfg.epsilon_warmup_epochs * steps_per_epoch
    if step >= ramp:
        return adv
    frac = (step + 1) / (ramp + 1)
    return replace(adv, epsilon=adv.epsilon * frac, step_size=adv.step_size * frac)


def _check_adversarial_batch(x0, xa, adv: AttackConfig, where: str) -> None:
    if xa.min() < 0.0 or xa.max() > 1.0:
        raise AssertionError(f"{where}: adversarial batch left [0, 1]")
    d = (xa - x0).reshape(len(x0), -1)
    size = np.abs(d).max(axis=1) if adv.norm == "linf" else np.sqrt((d**2).sum(axis=1))
    if size.size and size.max() > adv.epsilon + 1e-9:
        raise AssertionError(f"{where}: perturbation {size.max()} exceeds epsilon {adv.epsilon}")


def train(net: Network, data: LabeledDataset, cfg: TrainConfig, progress=None) -> tuple[Network, TrainLog]:
    """Train a copy of ``net``; returns the trained copy and its per-epoch log.

    ``progress(record)`` is called after every epoch when given.
    """
    if len(data) == 0:
        raise ConfigurationError("training set is empty")
    train_set, val_set = split_validation(data, cfg.val_fraction)
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    names = list(net.parameters)
    state: dict[str, np.ndarray] = {}
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    log = TrainLog()

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_set))
        loss_sum, correct, seen = 0.0, 0, 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb = augment_batch(train_set.images[idx], cfg.augmentation, rng, train=True)
            yb = train_set.labels[idx]
            adv = adversary_at(cfg, step, steps_per_epoch)
            if adv is not None:
                x_clean = xb
                xb = attack(net, xb, yb, adv, stream=step)
                _check_adversarial_batch(x_clean, xb, adv, f"epoch {epoch} batch {b}")

            inputs = ad.Tensor(xb)
            with ad.Tape() as tape:
                logits = forward(net, inputs, param_grad=True)
                loss = ad.cross_entropy(ad.log_softmax(logits), yb)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise TrainingDivergence(f"loss became {loss_value} at epoch {epoch}, batch {b}")
            grads = ad.backward(tape, loss)

            params = {k: net.parameters[k].data for k in names}
            step_grads = {k: grads[net.parameters[k]] for k in names}
            if cfg.grad_clip is not None:
                step_grads = clip_gradients(step_grads, cfg.grad_clip)
            new_params, state = sgd_step(params, step_grads,
                                         _lr_at(cfg, step, total_steps), cfg.momentum, cfg.weight_decay, state)
            for k in names:
                net.parameters[k].data = new_params[k]

            loss_sum += loss_value * len(idx)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
            seen += len(idx)
            step += 1

        val_acc = evaluate_accuracy(net, val_set) if val_set is not None else None
        log.append(epoch, loss_sum / seen, correct / seen, val_acc, time.perf_counter() - start)
        logger.info("epoch %d loss %.4f train_acc %.4f val_acc %s", epoch, loss_sum / seen, correct / seen, val_acc)
        if progress:
            progress(log.records[-1])
        if cfg.underfit_target_accuracy is not None and val_acc is not None and val_acc >= cfg.underfit_target_accuracy:
            break
    return net, log
