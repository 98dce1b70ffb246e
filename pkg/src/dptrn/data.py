"""Dataset construction: CSV ingestion, standardization, windowing and a synthetic task."""

import csv
from dataclasses import dataclass

import numpy as np

from .core import DTYPE


class DataError(ValueError):
    """Bad input data: malformed files, empty sets, impossible specs."""


@dataclass
class RawSeries:
    """Node-level measurements ``[N, M]`` with one class label per node.

    ``offset`` is the global index of the first node, so windows cut from
    different series can still be checked for overlap. ``evidence`` is only
    set by the synthetic generator: per window, the historical rows that
    carry the class signature.
    """

    values: np.ndarray
    labels: np.ndarray
    feature_names: list = None
    offset: int = 0
    evidence: list = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2:
            raise DataError(f"values must be [N, M], got shape {self.values.shape}")
        if self.labels.shape != (self.values.shape[0],):
            raise DataError(
                f"{self.labels.shape[0]} labels for {self.values.shape[0]} nodes"
            )

    @property
    def n_nodes(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]


@dataclass
class SequenceSample:
    """One ``[T, M]`` window; the last row is the current node and defines the label."""

    nodes: np.ndarray
    label: int
    start: int = 0
    evidence: tuple = ()

    @property
    def node_indices(self):
        return range(self.start, self.start + self.nodes.shape[0])


def stack(samples):
    """``(X [N, T, M], y [N])`` from a list of samples."""
    if not samples:
        raise DataError("no samples to stack")
    x = np.stack([s.nodes for s in samples]).astype(DTYPE)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def window_non_crossover(series, T):
    """Cut disjoint consecutive windows of length ``T``; a short tail is dropped."""
    if T < 1:
        raise DataError(f"window length must be >= 1, got {T}")
    n = series.n_nodes // T
    if n == 0:
        raise DataError(f"series has {series.n_nodes} nodes, fewer than window length {T}")
    out = []
    for i in range(n):
        lo = i * T
        evidence = tuple(series.evidence[i]) if series.evidence is not None else ()
        out.append(
            SequenceSample(
                nodes=series.values[lo : lo + T].copy(),
                label=int(series.labels[lo + T - 1]),
                start=series.offset + lo,
                evidence=evidence,
            )
        )
    return out


def split_samples(samples, ratios=(0.7, 0.1, 0.2)):
    """Split windows into train/valid/test, contiguously within each class."""
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    splits = ([], [], [])
    for label in sorted(by_class):
        group = by_class[label]
        n = len(group)
        a = int(round(ratios[0] * n))
        b = a + int(round(ratios[1] * n))
        splits[0].extend(group[:a])
        splits[1].extend(group[a:b])
        splits[2].extend(group[b:])
    return tuple(sorted(part, key=lambda s: s.start) for part in splits)


# -- standardization -----------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        return (np.asarray(x, dtype=DTYPE) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=DTYPE) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=DTYPE), np.asarray(d["std"], dtype=DTYPE))


def fit_standardizer(samples):
    """Per-feature mean and std over every node of the training windows."""
    if not samples:
        raise DataError("cannot fit a standardizer on an empty training set")
    nodes = np.concatenate([s.nodes for s in samples], axis=0)
    mean = nodes.mean(axis=0)
    std = nodes.std(axis=0)
    # degenerate (constant) features keep their scale
    std = np.where(std > 0.0, std, 1.0)
    return Standardizer(mean, std)


def apply_standardizer(standardizer, samples):
    return [
        SequenceSample(standardizer.transform(s.nodes), s.label, s.start, s.evidence)
        for s in samples
    ]


# -- synthetic task ------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Fault task whose class evidence lives only in a few historical rows.

    Class 0 is pure noise. For class ``c > 0`` a fixed +-1 signature scaled
    by ``signal_amplitude`` is added to ``evidence_nodes_per_sample``
    randomly chosen historical rows. The current row is always pure noise.
    """

    T: int = 30
    M: int = 8
    C: int = 5
    evidence_nodes_per_sample: int = 2
    signal_amplitude: float = 1.5
    noise_std: float = 1.0
    seed: int = 0
    n_train: int = 5000
    n_valid: int = 500
    n_test: int = 1000

    def validate(self):
        if self.T < 2 or self.M < 1 or self.C < 1:
            raise DataError(f"bad dimensions T={self.T}, M={self.M}, C={self.C}")
        if not 0 <= self.evidence_nodes_per_sample < self.T:
            raise DataError(
                f"evidence_nodes_per_sample={self.evidence_nodes_per_sample} must be in [0, T)"
            )
        if self.noise_std < 0:
            raise DataError("noise_std must be non-negative")
        for name in ("n_train", "n_valid", "n_test"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")


def class_signatures(spec):
    """``[C, M]`` array; row 0 is zero, rows ``c > 0`` are distinct +-1 vectors."""
    sigs = np.zeros((spec.C, spec.M), dtype=DTYPE)
    seen = set()
    for c in range(1, spec.C):
        rng = np.random.default_rng([spec.seed, c])
        s = rng.choice([-1.0, 1.0], size=spec.M)
        while tuple(s) in seen and len(seen) < 2 ** spec.M:
            s = rng.choice([-1.0, 1.0], size=spec.M)
        seen.add(tuple(s))
        sigs[c] = s
    return sigs


def generate_synthetic(spec):
    """Return ``(train, valid, test)`` RawSeries, each a run of back-to-back windows."""
    spec.validate()
    sigs = class_signatures(spec) * spec.signal_amplitude
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7919]))
    out = []
    offset = 0
    for n in (spec.n_train, spec.n_valid, spec.n_test):
        labels = rng.permutation(np.arange(n) % spec.C)
        values = rng.normal(0.0, spec.noise_std, size=(n, spec.T, spec.M))
        evidence = []
        for i, c in enumerate(labels):
            # drawn for every sample so the stream does not depend on the label mix
            idx = np.sort(rng.choice(spec.T - 1, size=spec.evidence_nodes_per_sample, replace=False))
            if c == 0:
                evidence.append(())
                continue
            values[i, idx] += sigs[c]
            evidence.append(tuple(int(k) for k in idx))
        node_labels = np.repeat(labels, spec.T)
        out.append(
            RawSeries(
                values=values.reshape(n * spec.T, spec.M),
                labels=node_labels,
                offset=offset,
                evidence=evidence,
            )
        )
        offset += n * spec.T
    return tuple(out)


# -- CSV ----------------------------------------------------------------------


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def _parse_label(text, lineno, path):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: label {text!r} is not an integer") from None
    if not value.is_integer():
        raise DataError(f"{path}:{lineno}: label {text!r} is not an integer")
    return int(value)


def load_csv(path, label_col="label", split_col=None):
    """Read a node-per-row CSV.

    With a header, ``label_col`` names the label column; without one it is
    a column index (default: last column). If ``split_col`` is given and
    present, a ``{split_name: RawSeries}`` dict is returned instead.
    """
    with open(path, newline="") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh)) if row]
    if not rows:
        raise DataError(f"{path}: file is empty")
    first = rows[0][1]
    has_header = not all(_is_number(cell) for cell in first)
    if has_header:
        header = [h.strip() for h in first]
        rows = rows[1:]
        if label_col not in header:
            raise DataError(f"{path}: no label column {label_col!r} in header {header}")
        label_idx = header.index(label_col)
    else:
        header = None
        label_idx = len(first) - 1 if label_col in (None, "label") else int(label_col)
    split_idx = header.index(split_col) if header and split_col and split_col in header else None
    if not rows:
        raise DataError(f"{path}: no data rows")

    width = len(first)
    feature_idx = [i for i in range(width) if i not in (label_idx, split_idx)]
    values, labels, splits = [], [], []
    for lineno, row in rows:
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            values.append([float(row[i]) for i in feature_idx])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
        labels.append(_parse_label(row[label_idx].strip(), lineno, path))
        if split_idx is not None:
            splits.append(row[split_idx].strip())
    names = [header[i] for i in feature_idx] if header else None
    values = np.array(values, dtype=DTYPE).reshape(len(values), len(feature_idx))
    labels = np.array(labels, dtype=np.int64)
    if split_idx is None:
        return RawSeries(values, labels, names)
    out = {}
    splits = np.array(splits)
    for name in dict.fromkeys(splits):
        mask = splits == name
        first_row = int(np.argmax(mask))
        out[name] = RawSeries(values[mask], labels[mask], names, offset=first_row)
    return out


def write_csv(series, path):
    names = series.feature_names or [f"x{i}" for i in range(series.n_features)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*names, "label"])
        for row, label in zip(series.values, series.labels):
            writer.writerow([*(repr(float(v)) for v in row), int(label)])


def write_evidence_csv(evidence, path):
    """Sidecar ``sample_id,node_index`` rows for the synthetic ground truth."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "node_index"])
        for sample_id, nodes in enumerate(evidence):
            for k in nodes:
                writer.writerow([sample_id, int(k)])


def read_evidence_csv(path, n_samples):
    evidence = [[] for _ in range(n_samples)]
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            evidence[int(row["sample_id"])].append(int(row["node_index"]))
    return [tuple(e) for e in evidence]
