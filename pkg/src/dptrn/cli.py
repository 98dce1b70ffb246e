"""Command line entry point: ``dptrn <subcommand> [--config FILE] [flags]``.

Subcommands: gen-data, train, eval, profile, explain, ablate.
Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical divergence.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields

from .core import ConfigError, NumericalError
from .data import (
    DataError,
    Standardizer,
    SyntheticSpec,
    apply_standardizer,
    generate_synthetic,
    load_csv,
    read_evidence_csv,
    stack,
    window_non_crossover,
    write_csv,
    write_evidence_csv,
)
from .experiment import prepare_windows, run
from .interpret import evidence_contrast, explain
from .metrics import aggregate_seeds, evaluate, metrics_json
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .profiler import profile
from .training import DivergenceError, TrainConfig, predict_logits

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


@dataclass
class RunConfig:
    """Every configurable key; the flat config file and the flags both map onto these."""

    T: int = 30
    M: int = 8
    C: int = 5
    relation_hidden: str = "512,128"
    classifier_hidden: str = "256,128,64"
    variant: str = "full"
    dropout: float = 0.1
    batch_size: int = 32
    epochs: int = 60
    lr: float = 6e-4
    l2: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    record_time: bool = False
    evidence_nodes: int = 2
    amplitude: float = 1.5
    noise_std: float = 1.0
    n_train: int = 5000
    n_valid: int = 500
    n_test: int = 1000
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint: str = ""
    label_col: str = "label"
    standardize: bool = True
    n_explain: int = 8
    seeds: str = "0,1,2,3,4"
    variants: str = "full,ablation_a,ablation_b,flatten_mlp"

    def model_config(self, variant=None):
        return ModelConfig(
            T=self.T,
            M=self.M,
            C=self.C,
            relation_hidden=_int_list(self.relation_hidden),
            classifier_hidden=_int_list(self.classifier_hidden),
            variant=variant or self.variant,
            dropout=self.dropout,
        )

    def train_config(self, seed=None):
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.lr,
            l2_coeff=self.l2,
            seed=self.seed if seed is None else seed,
            optimizer=self.optimizer,
            record_time=self.record_time,
        )

    def synthetic_spec(self):
        return SyntheticSpec(
            T=self.T,
            M=self.M,
            C=self.C,
            evidence_nodes_per_sample=self.evidence_nodes,
            signal_amplitude=self.amplitude,
            noise_std=self.noise_std,
            seed=self.seed,
            n_train=self.n_train,
            n_valid=self.n_valid,
            n_test=self.n_test,
        )

    @property
    def checkpoint_path(self):
        return self.checkpoint or os.path.join(self.out_dir, "model.ckpt")

    def dump(self, path):
        with open(path, "w") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {_format(getattr(self, f.name))}\n")


def _int_list(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name, text):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    text = str(text).strip()
    try:
        if kind in (bool, "bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for config key {name!r}") from None
    return text


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            try:
                values[key] = _coerce(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return values


# flag name -> RunConfig key
FLAG_KEYS = {
    "seed": "seed",
    "T": "T",
    "M": "M",
    "C": "C",
    "variant": "variant",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "l2": "l2",
    "out_dir": "out_dir",
    "label_col": "label_col",
    "data_dir": "data_dir",
    "checkpoint": "checkpoint",
    "amplitude": "amplitude",
    "noise_std": "noise_std",
    "seeds": "seeds",
    "variants": "variants",
    "record_time": "record_time",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    d = RunConfig()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file; flags override it")
    common.add_argument("--seed", type=int, help=f"master seed (default {d.seed})")
    common.add_argument("--T", type=int, help=f"window length (default {d.T})")
    common.add_argument("--M", type=int, help=f"feature count (default {d.M})")
    common.add_argument("--C", type=int, help=f"class count (default {d.C})")
    common.add_argument("--variant", choices=["full", "ablation_a", "ablation_b", "flatten_mlp"],
                        help=f"model variant (default {d.variant})")
    common.add_argument("--epochs", type=int, help=f"training epochs (default {d.epochs})")
    common.add_argument("--batch-size", type=int, help=f"mini-batch size (default {d.batch_size})")
    common.add_argument("--lr", type=float, help=f"learning rate (default {d.lr})")
    common.add_argument("--l2", type=float, help=f"L2 coefficient (default {d.l2})")
    common.add_argument("--out-dir", help=f"output directory (default {d.out_dir!r})")
    common.add_argument("--label-col", help=f"label column name (default {d.label_col!r})")
    common.add_argument("--data-dir", help=f"directory with train/valid/test CSVs (default {d.data_dir!r})")
    common.add_argument("--checkpoint", help="checkpoint path (default <out-dir>/model.ckpt)")
    common.add_argument("--amplitude", type=float, help=f"synthetic signal amplitude (default {d.amplitude})")
    common.add_argument("--noise-std", type=float, help=f"synthetic noise std (default {d.noise_std})")
    common.add_argument("--seeds", help=f"comma-separated seeds for ablate (default {d.seeds})")
    common.add_argument("--variants", help=f"comma-separated variants for ablate (default {d.variants})")
    common.add_argument("--record-time", action="store_const", const=True,
                        help="write wall-clock seconds into train_log.csv (breaks byte-for-byte reruns)")

    parser = _Parser(prog="dptrn", description="Deep parallel time-series relation network.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (
        ("gen-data", "write synthetic train/valid/test CSVs plus evidence sidecars"),
        ("train", "train a model and write checkpoint + train_log.csv"),
        ("eval", "score a checkpoint on the test split"),
        ("profile", "print parameter and FLOP counts for a configuration"),
        ("explain", "export relation weights as CSV and PPM heatmaps"),
        ("ablate", "train every variant over several seeds and compare"),
    ):
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def resolve_config(args):
    cfg = RunConfig()
    if args.config:
        for key, value in read_config_file(args.config).items():
            setattr(cfg, key, value)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


# -- data loading ------------------------------------------------------------


def _load_split(cfg, split):
    path = os.path.join(cfg.data_dir, f"{split}.csv")
    if not os.path.exists(path):
        raise DataError(f"missing data file {path}")
    series = load_csv(path, label_col=cfg.label_col)
    if series.n_features != cfg.M:
        raise DataError(f"{path} has {series.n_features} features but M = {cfg.M}")
    samples = window_non_crossover(series, cfg.T)
    evidence_path = os.path.join(cfg.data_dir, f"{split}_evidence.csv")
    if os.path.exists(evidence_path):
        evidence = read_evidence_csv(evidence_path, len(samples))
        for s, e in zip(samples, evidence):
            s.evidence = e
    return samples


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(cfg):
    os.makedirs(cfg.data_dir, exist_ok=True)
    for name, series in zip(("train", "valid", "test"), generate_synthetic(cfg.synthetic_spec())):
        write_csv(series, os.path.join(cfg.data_dir, f"{name}.csv"))
        write_evidence_csv(series.evidence, os.path.join(cfg.data_dir, f"{name}_evidence.csv"))
    cfg.dump(os.path.join(cfg.data_dir, "config.txt"))
    print(f"wrote synthetic splits to {cfg.data_dir}")


def cmd_train(cfg):
    splits = prepare_windows(*(_load_split(cfg, s) for s in ("train", "valid", "test")),
                             standardize=cfg.standardize)
    os.makedirs(cfg.out_dir, exist_ok=True)
    model, log, metrics = run(splits, cfg.model_config(), cfg.train_config())
    extra = {"standardizer": splits.standardizer.to_dict() if splits.standardizer else None,
             "selected_epoch": log.selected_epoch}
    save_checkpoint(model, cfg.checkpoint_path, extra)
    log.to_csv(os.path.join(cfg.out_dir, "train_log.csv"))
    cfg.dump(os.path.join(cfg.out_dir, "config.txt"))
    print(f"selected epoch {log.selected_epoch}; test accuracy {metrics['accuracy']:.4f}")
    print(f"checkpoint: {cfg.checkpoint_path}")


def _load_model(cfg):
    if not os.path.exists(cfg.checkpoint_path):
        raise DataError(f"missing checkpoint {cfg.checkpoint_path}")
    model, extra = load_checkpoint(cfg.checkpoint_path, cfg.model_config())
    st = extra.get("standardizer")
    return model, Standardizer.from_dict(st) if st else None


def cmd_eval(cfg):
    model, st = _load_model(cfg)
    samples = _load_split(cfg, "test")
    if st is not None:
        samples = apply_standardizer(st, samples)
    x, y = stack(samples)
    metrics = evaluate(predict_logits(model, x), y, cfg.C)
    os.makedirs(cfg.out_dir, exist_ok=True)
    flat = metrics_json(metrics)
    _write_json(os.path.join(cfg.out_dir, "metrics.json"), flat)
    with open(os.path.join(cfg.out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "accuracy", "macro_recall", "macro_f1"])
        w.writerow([cfg.variant, cfg.seed, repr(flat["accuracy"]), repr(flat["macro_recall"]),
                    repr(flat["macro_f1"])])
    cfg.dump(os.path.join(cfg.out_dir, "config.txt"))
    print(json.dumps({k: flat[k] for k in ("accuracy", "macro_recall", "macro_f1")}, sort_keys=True))


def cmd_profile(cfg, out_dir_given):
    report = profile(cfg.model_config())
    print(report.table())
    print()
    print(report.to_csv(), end="")
    if out_dir_given:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "profile.csv"), "w") as fh:
            fh.write(report.to_csv())
        cfg.dump(os.path.join(cfg.out_dir, "config.txt"))


def cmd_explain(cfg):
    model, st = _load_model(cfg)
    samples = _load_split(cfg, "test")
    if st is not None:
        samples = apply_standardizer(st, samples)
    x, _ = stack(samples)
    out = os.path.join(cfg.out_dir, "explain")
    n = min(cfg.n_explain, len(x))
    explain(model, x[:n], out)
    if any(s.evidence for s in samples):
        _, report = model.forward(x)
        hit, miss = evidence_contrast(report.rw_pre, [s.evidence for s in samples])
        _write_json(os.path.join(out, "evidence_contrast.json"),
                    {"mean_rw_pre_evidence": hit, "mean_rw_pre_other": miss,
                     "n_samples": len(samples)})
    cfg.dump(os.path.join(out, "config.txt"))
    print(f"wrote explanations for {n} samples to {out}")


def write_ablation_tables(out_dir, results, variants, seeds):
    """Per-run and best/mean summary CSVs from ``{(variant, seed): metrics}``."""
    with open(os.path.join(out_dir, "ablation_runs.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "accuracy", "macro_recall", "macro_f1"])
        for variant in variants:
            for seed in seeds:
                m = results[(variant, seed)]
                w.writerow([variant, seed, repr(m["accuracy"]), repr(m["macro_recall"]), repr(m["macro_f1"])])
    with open(os.path.join(out_dir, "ablation_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "recall_best", "recall_mean", "accuracy_best", "accuracy_mean",
                    "f1_best", "f1_mean"])
        for variant in variants:
            agg = aggregate_seeds([results[(variant, s)] for s in seeds])
            w.writerow([variant,
                        f"{agg['macro_recall']['best']:.4f}", f"{agg['macro_recall']['mean']:.4f}",
                        f"{agg['accuracy']['best']:.4f}", f"{agg['accuracy']['mean']:.4f}",
                        f"{agg['macro_f1']['best']:.4f}", f"{agg['macro_f1']['mean']:.4f}"])


def cmd_ablate(cfg):
    splits = prepare_windows(*(_load_split(cfg, s) for s in ("train", "valid", "test")),
                             standardize=cfg.standardize)
    seeds = list(_int_list(cfg.seeds))
    variants = [v.strip() for v in cfg.variants.split(",") if v.strip()]
    os.makedirs(cfg.out_dir, exist_ok=True)
    results = {}
    for variant in variants:
        for seed in seeds:
            _, _, metrics = run(splits, cfg.model_config(variant), cfg.train_config(seed))
            results[(variant, seed)] = metrics
            print(f"{variant:<12} seed {seed}: accuracy {metrics['accuracy']:.4f}")
    write_ablation_tables(cfg.out_dir, results, variants, seeds)
    cfg.dump(os.path.join(cfg.out_dir, "config.txt"))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "profile":
            cmd_profile(cfg, args.out_dir is not None)
        elif args.command == "explain":
            cmd_explain(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg)
    except (DivergenceError, NumericalError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
