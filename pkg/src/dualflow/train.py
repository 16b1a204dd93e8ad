"""Flow-matching pretraining of the base velocity and classifier training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .data import Dataset
from .flow import marginal_sample
from .nn import NULL, Classifier, ClassifierConfig, VelocityModel
from .optim import Optimizer

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; parameters were rolled back."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    eval_split: float = 0.2

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs, batch size and learning rate must be non-negative/positive")
        if not 0.0 < self.eval_split <= 0.5:
            raise ValueError("eval_split must lie in (0, 0.5]")


@dataclass
class TrainResult:
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    test_accuracy: float | None = None


def _batches(rng: np.random.Generator, n: int, batch: int):
    perm = rng.permutation(n)
    for i in range(0, n, batch):
        yield perm[i:i + batch]


def flow_matching_loss(model: VelocityModel, x0: np.ndarray, t: np.ndarray, z: np.ndarray) -> Tensor:
    """Mean squared error between v(x_t, t, null) and the path velocity z - x0."""
    xt = marginal_sample(x0, t, z)
    pred = model(Tensor(xt), t, NULL, use_lora=False)
    return ad.mean(ad.square(pred - (z - x0)))


def pretrain_flow_matching(model: VelocityModel, data: Dataset, cfg: TrainConfig) -> TrainResult:
    """Fit the unconditional field by flow matching, then freeze it.

    Only the base weights (including the null embedding) are trained.  On a
    non-finite loss the weights are restored to the start of the failing
    epoch and :class:`DivergenceError` is raised.
    """
    store = model.store
    base = set(model.base_names())
    store.set_trainable(False)
    store.set_trainable(True, names=base)
    opt = Optimizer(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    x_all = data.x.astype(np.float32)
    for epoch in range(cfg.epochs):
        good = store.snapshot()
        losses = []
        try:
            for idx in _batches(rng, len(x_all), cfg.batch_size):
                x0 = x_all[idx]
                t = rng.uniform(0.0, 1.0, size=len(idx))
                z = rng.standard_normal(x0.shape).astype(np.float32)
                with Tape() as tape:
                    loss = flow_matching_loss(model, x0, t, z)
                grads = store.gradients(tape, tape.backward(loss))
                opt.step(store, grads)
                losses.append(loss.item())
        except NonFiniteError as exc:
            store.load_state(good)
            store.set_trainable(False)
            raise DivergenceError(f"flow matching diverged in epoch {epoch}") from exc
        result.step_loss.extend(losses)
        result.epoch_loss.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.5f", epoch, result.epoch_loss[-1])
    store.set_trainable(False)
    return result


def accuracy(model: Classifier, data: Dataset) -> float:
    return float(np.mean(model.predict(data.x) == data.y))


def train_classifier(arch: str, data: Dataset, cfg: TrainConfig, activation: str = "relu",
                     model_seed: int | None = None, hidden: int = 128) -> tuple[Classifier, TrainResult]:
    """Train a classifier on a disjoint split and report held-out accuracy.

    The returned model has all parameters frozen.
    """
    train, test = data.split(cfg.eval_split, cfg.seed)
    ccfg = ClassifierConfig(arch, data.sample_shape, data.n_classes, hidden=hidden, activation=activation,
                            seed=cfg.seed if model_seed is None else model_seed)
    model = Classifier(ccfg)
    store = model.store
    opt = Optimizer(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    for epoch in range(cfg.epochs):
        good = store.snapshot()
        losses = []
        try:
            for idx in _batches(rng, len(train), cfg.batch_size):
                with Tape() as tape:
                    loss = ad.softmax_cross_entropy(model(train.x[idx]), train.y[idx])
                opt.step(store, store.gradients(tape, tape.backward(loss)))
                losses.append(loss.item())
        except NonFiniteError as exc:
            store.load_state(good)
            raise DivergenceError(f"classifier training diverged in epoch {epoch}") from exc
        result.step_loss.extend(losses)
        result.epoch_loss.append(float(np.mean(losses)))
    result.test_accuracy = accuracy(model, test)
    log.info("%s classifier test accuracy %.4f", arch, result.test_accuracy)
    store.set_trainable(False)
    return model, result
