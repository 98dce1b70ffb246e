"""Mini-batch training with Adam (or plain SGD), L2 weight decay and best-epoch selection."""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, NumericalError, softmax_cross_entropy


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 60
    learning_rate: float = 6e-4
    l2_coeff: float = 1e-4
    seed: int = 0
    optimizer: str = "adam"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    record_time: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two rows)")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param, grad, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place bias-corrected Adam update of ``param``."""
    b1, b2 = betas
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class Optimizer:
    """Steps every parameter of a model; L2 applies to weights and position matrices only."""

    def __init__(self, model, config):
        self.model = model
        self.config = config
        self.state = {
            name: AdamState(np.zeros_like(value), np.zeros_like(value))
            for name, (value, _) in model.params().items()
        }

    @staticmethod
    def decays(name):
        return name.endswith(".weight") or name in ("p_query", "p_key")

    def step(self):
        cfg = self.config
        for name, (value, grad) in self.model.params().items():
            g = grad
            if cfg.l2_coeff and self.decays(name):
                g = grad + 2.0 * cfg.l2_coeff * value
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
            if cfg.optimizer == "adam":
                adam_step(value, g, self.state[name], cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
            else:
                value -= cfg.learning_rate * g


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    selected_epoch: int = -1

    def add(self, epoch, train_loss, val_loss, val_acc, seconds):
        self.rows.append((epoch, train_loss, val_loss, val_acc, seconds))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "seconds"])
            for epoch, tl, vl, va, sec in self.rows:
                w.writerow([epoch, repr(tl), repr(vl), repr(va), f"{sec:.3f}"])


def batch_order(n, batch_size, seed, epoch):
    """Shuffled index batches for one epoch; a trailing batch of one row is folded into the previous one."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def predict_logits(model, x, chunk=512):
    """Eval-mode logits in chunks; restores the previous mode."""
    was_training = model.training
    model.eval()
    try:
        out = [model.forward(x[i : i + chunk])[0] for i in range(0, len(x), chunk)]
    finally:
        if was_training:
            model.train()
    return np.concatenate(out, axis=0)


def evaluate_loss_acc(model, x, y):
    logits = predict_logits(model, x)
    loss, _ = softmax_cross_entropy(logits, y)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return loss, acc


def train(model, train_data, valid_data, config):
    """Fit ``model`` and leave it holding the parameters of the best validation epoch.

    ``train_data`` and ``valid_data`` are ``(X, y)`` pairs. Returns
    ``(best_state, log)`` where ``best_state`` maps array names to copies.
    """
    x_tr, y_tr = train_data
    x_va, y_va = valid_data
    if len(x_tr) < 2:
        raise ConfigError("need at least two training samples")
    opt = Optimizer(model, config)
    log = TrainLog()
    best_acc = -np.inf
    best_state = {k: v.copy() for k, v in model.state_arrays().items()}
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for b, idx in enumerate(batch_order(len(x_tr), config.batch_size, config.seed, epoch)):
            model.zero_grad()
            try:
                loss = model.loss_and_backward(x_tr[idx], y_tr[idx])
                opt.step()
            except NumericalError as exc:
                raise DivergenceError(f"diverged at epoch {epoch}, batch {b}: {exc}") from exc
            total += loss * len(idx)
            count += len(idx)
        val_loss, val_acc = evaluate_loss_acc(model, x_va, y_va)
        seconds = time.perf_counter() - t0 if config.record_time else 0.0
        log.add(epoch, total / count, val_loss, val_acc, seconds)
        if val_acc > best_acc:
            best_acc = val_acc
            log.selected_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
    model.load_state_arrays(best_state)
    model.eval()
    return best_state, log
