"""Deep parallel time-series relation network (DPTRN) for time-series fault diagnosis."""

from .core import ConfigError, DimensionError, NumericalError
from .data import (
    DataError,
    RawSeries,
    SequenceSample,
    SyntheticSpec,
    fit_standardizer,
    apply_standardizer,
    generate_synthetic,
    load_csv,
    window_non_crossover,
    write_csv,
)
from .metrics import aggregate_seeds, evaluate
from .model import (
    DPTRN,
    ModelConfig,
    RelationReport,
    absolute_position_embedding,
    build_relation_input,
    combine_and_pool,
    decoupling_position_embedding,
    load_checkpoint,
    save_checkpoint,
)
from .profiler import ProfileReport, count_flops, count_params, profile
from .training import TrainConfig, TrainLog, adam_step, train

__version__ = "0.1.0"
