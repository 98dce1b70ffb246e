"""Glue between the data pipeline, the model and the trainer."""

from dataclasses import dataclass

import numpy as np

from .data import (
    apply_standardizer,
    fit_standardizer,
    generate_synthetic,
    stack,
    window_non_crossover,
)
from .metrics import evaluate
from .model import DPTRN, ModelConfig
from .training import predict_logits, train


@dataclass
class Splits:
    train: tuple
    valid: tuple
    test: tuple
    standardizer: object = None
    evidence: dict = None


def prepare_windows(train_s, valid_s, test_s, standardize=True):
    """Standardize with training statistics and stack each split into ``(X, y)``."""
    st = None
    if standardize:
        st = fit_standardizer(train_s)
        train_s, valid_s, test_s = (apply_standardizer(st, s) for s in (train_s, valid_s, test_s))
    evidence = {name: [s.evidence for s in part] for name, part in
                (("train", train_s), ("valid", valid_s), ("test", test_s))}
    return Splits(stack(train_s), stack(valid_s), stack(test_s), st, evidence)


def synthetic_splits(spec, standardize=True):
    series = generate_synthetic(spec)
    windows = [window_non_crossover(s, spec.T) for s in series]
    return prepare_windows(*windows, standardize=standardize)


def current_node_only(splits):
    """Same splits with every window cut down to its last row."""
    cut = lambda xy: (xy[0][:, -1:, :], xy[1])  # noqa: E731
    return Splits(cut(splits.train), cut(splits.valid), cut(splits.test), splits.standardizer, splits.evidence)


def run(splits, model_config, train_config):
    """Train one model and score it on the test split. Returns ``(model, log, metrics)``."""
    model = DPTRN(model_config, seed=train_config.seed)
    _, log = train(model, splits.train, splits.valid, train_config)
    logits = predict_logits(model, splits.test[0])
    return model, log, evaluate(logits, splits.test[1], model_config.C)


def model_config_for(splits, C, variant="full", **kwargs):
    _, T, M = splits.train[0].shape
    return ModelConfig(T=T, M=M, C=C, variant=variant, **kwargs)


def mean_accuracy(runs):
    return float(np.mean([m["accuracy"] for m in runs]))
