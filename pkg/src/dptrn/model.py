"""Deep parallel time-series relation network.

A window ``X[b]`` of shape ``[T, M]`` is split into ``T - 1`` historical rows
and the current row (the last one). A single shared MLP scores every
historical row against the current row; a learned positional term is added
to each score, and the scores weight a sum over the historical rows. The
pooled vector and the current row go through a classifier MLP.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .core import (
    DTYPE,
    MLP,
    BatchNorm,
    ConfigError,
    DimensionError,
    check_finite,
    softmax,
    softmax_cross_entropy,
)

VARIANTS = ("full", "ablation_a", "ablation_b", "flatten_mlp")


@dataclass
class ModelConfig:
    T: int
    M: int
    C: int
    relation_hidden: tuple = (512, 128)
    classifier_hidden: tuple = (256, 128, 64)
    variant: str = "full"
    dropout: float = 0.1

    def __post_init__(self):
        self.relation_hidden = tuple(int(w) for w in self.relation_hidden)
        self.classifier_hidden = tuple(int(w) for w in self.classifier_hidden)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        min_t = 1 if self.variant == "flatten_mlp" else 2
        if self.T < min_t:
            raise ConfigError(f"T must be >= {min_t} for variant {self.variant}, got {self.T}")
        if self.M < 1 or self.C < 1:
            raise ConfigError(f"M and C must be positive, got M={self.M}, C={self.C}")

    @property
    def relation_in(self):
        return 4 * self.M

    @property
    def classifier_in(self):
        return self.T * self.M if self.variant == "flatten_mlp" else 2 * self.M

    def to_dict(self):
        d = asdict(self)
        d["relation_hidden"] = list(self.relation_hidden)
        d["classifier_hidden"] = list(self.classifier_hidden)
        return d


@dataclass
class RelationReport:
    """Interpretability payload for one sample (or a batch, with a leading axis)."""

    rw_pre: np.ndarray
    dpe: np.ndarray
    rw: np.ndarray
    hi: np.ndarray

    def __len__(self):
        return 1 if self.rw_pre.ndim == 1 else self.rw_pre.shape[0]

    def sample(self, i):
        return RelationReport(self.rw_pre[i], self.dpe[i], self.rw[i], self.hi[i])


def absolute_position_embedding(pos, d):
    """Sinusoidal embedding of one position: sin on even entries, cos on odd."""
    if d < 1:
        raise ConfigError(f"embedding dimension must be >= 1, got {d}")
    if np.any(np.asarray(pos) < 0):
        raise ValueError("position must be non-negative")
    out = np.empty(d, dtype=DTYPE)
    i = np.arange(0, d, 2)
    angle = pos / np.power(10000.0, i / d)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle[: d // 2])
    return out


def position_table(n, d):
    """Rows ``absolute_position_embedding(p, d)`` for ``p = 0 .. n-1``."""
    return np.stack([absolute_position_embedding(p, d) for p in range(n)]) if n else np.zeros((0, d))


def build_relation_input(d_cur, d_hist):
    """``[d_cur, d_hist, d_cur - d_hist, d_cur + d_hist]`` along the last axis.

    Works on single vectors or on broadcastable stacks of them.
    """
    d_cur = np.asarray(d_cur, dtype=DTYPE)
    d_hist = np.asarray(d_hist, dtype=DTYPE)
    if d_cur.shape[-1] != d_hist.shape[-1]:
        raise DimensionError(
            f"current node length {d_cur.shape[-1]} != historical node length {d_hist.shape[-1]}"
        )
    d_cur, d_hist = np.broadcast_arrays(d_cur, d_hist)
    return np.concatenate([d_cur, d_hist, d_cur - d_hist, d_cur + d_hist], axis=-1)


def decoupling_position_embedding(p_query, p_key, k, t):
    """Scalar positional score of historical position ``k`` against current position ``t``."""
    if not 0 <= k < t:
        raise ValueError(f"need 0 <= k < t, got k={k}, t={t}")
    m = p_query.shape[0]
    query = absolute_position_embedding(k, m) @ p_query
    key = absolute_position_embedding(t, m) @ p_key
    return float(query @ key)


def combine_and_pool(rw_pre, dpe, history):
    """Add the positional term, scale by ``1/sqrt(M)`` and sum-pool the history rows."""
    rw_pre = np.asarray(rw_pre, dtype=DTYPE)
    dpe = np.asarray(dpe, dtype=DTYPE)
    history = np.asarray(history, dtype=DTYPE)
    if history.shape[-2] != rw_pre.shape[-1] or dpe.shape[-1] != rw_pre.shape[-1]:
        raise DimensionError(
            f"rw_pre {rw_pre.shape}, dpe {dpe.shape} and history {history.shape} disagree"
        )
    m = history.shape[-1]
    rw = (rw_pre + dpe) / np.sqrt(m)
    hi = np.einsum("...k,...km->...m", rw, history)
    return RelationReport(rw_pre=rw_pre, dpe=np.broadcast_to(dpe, rw.shape).copy(), rw=rw, hi=hi)


class DPTRN:
    """The relation network and its ablation variants.

    Parameters live in numpy arrays owned by the layers; ``params()`` lists
    them with their gradient buffers in declaration order.
    """

    def __init__(self, config, seed=0):
        self.config = config
        init_ss, drop_ss, pos_ss = np.random.SeedSequence(seed).spawn(3)
        init_rng = np.random.default_rng(init_ss)
        drop_rng = np.random.default_rng(drop_ss)
        pos_rng = np.random.default_rng(pos_ss)
        c = config
        self.relation = None
        self.p_query = self.p_key = None
        if c.variant != "flatten_mlp":
            self.relation = MLP(c.relation_in, c.relation_hidden, 1, c.dropout, init_rng, drop_rng)
            self.relation.layers[0].needs_input_grad = False
        if c.variant == "full":
            self.p_query = pos_rng.normal(0.0, 0.02, size=(c.M, c.M))
            self.p_key = pos_rng.normal(0.0, 0.02, size=(c.M, c.M))
            self.grad_p_query = np.zeros_like(self.p_query)
            self.grad_p_key = np.zeros_like(self.p_key)
        self.classifier = MLP(c.classifier_in, c.classifier_hidden, c.C, c.dropout, init_rng, drop_rng)
        self.training = True
        self._cache = None
        # the current node sits at row index T - 1
        self._pe = position_table(c.T, c.M)

    # -- parameter bookkeeping -------------------------------------------

    def params(self):
        out = {}
        if self.relation is not None:
            for name, pair in self.relation.params().items():
                out[f"relation.{name}"] = pair
        if self.p_query is not None:
            out["p_query"] = (self.p_query, self.grad_p_query)
            out["p_key"] = (self.p_key, self.grad_p_key)
        for name, pair in self.classifier.params().items():
            out[f"classifier.{name}"] = pair
        return out

    def buffers(self):
        """Non-learnable state: batch-norm running statistics."""
        out = {}
        for prefix, mlp in (("relation", self.relation), ("classifier", self.classifier)):
            if mlp is None:
                continue
            for i, bn in enumerate(mlp.batchnorms):
                out[f"{prefix}.bn{i}.running_mean"] = bn.running_mean
                out[f"{prefix}.bn{i}.running_var"] = bn.running_var
        return out

    def state_arrays(self):
        arrays = {name: value for name, (value, _) in self.params().items()}
        arrays.update(self.buffers())
        return arrays

    def load_state_arrays(self, arrays):
        params = self.params()
        for name, (value, _) in params.items():
            value[...] = arrays[name]
        for prefix, mlp in (("relation", self.relation), ("classifier", self.classifier)):
            if mlp is None:
                continue
            for i, bn in enumerate(mlp.batchnorms):
                bn.running_mean = np.array(arrays[f"{prefix}.bn{i}.running_mean"], dtype=DTYPE)
                bn.running_var = np.array(arrays[f"{prefix}.bn{i}.running_var"], dtype=DTYPE)

    def num_params(self):
        return sum(value.size for value, _ in self.params().values())

    def zero_grad(self):
        for _, grad in self.params().values():
            grad.fill(0.0)

    def train(self):
        self.training = True
        for mlp in (self.relation, self.classifier):
            if mlp is not None:
                mlp.train()

    def eval(self):
        self.training = False
        for mlp in (self.relation, self.classifier):
            if mlp is not None:
                mlp.eval()

    # -- forward pieces ----------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=DTYPE)
        c = self.config
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (c.T, c.M) or x.shape[0] == 0:
            raise DimensionError(f"expected a non-empty batch of shape [B, {c.T}, {c.M}], got {x.shape}")
        return x

    def dpe_vector(self):
        """Positional term for every historical position (zeros unless variant is full)."""
        c = self.config
        if self.p_query is None:
            return np.zeros(c.T - 1, dtype=DTYPE)
        query = self._pe[:-1] @ self.p_query
        key = self._pe[-1] @ self.p_key
        return query @ key

    def _prepare(self, x):
        if self.config.variant == "ablation_b":
            x = x + self._pe
        return x[:, :-1, :], x[:, -1, :]

    def relation_weights_pre(self, x):
        """Raw relation-unit scores ``[B, T-1]``; all historical nodes go through as one batch."""
        x = self._check_input(x)
        if self.relation is None:
            raise ConfigError("flatten_mlp has no relation unit")
        hist, cur = self._prepare(x)
        b, k, m = hist.shape
        v = build_relation_input(cur[:, None, :], hist).reshape(b * k, 4 * m)
        return self.relation.forward(v).reshape(b, k)

    def forward(self, x):
        """Logits ``[B, C]`` and a batched RelationReport (``None`` for flatten_mlp)."""
        x = self._check_input(x)
        c = self.config
        if c.variant == "flatten_mlp":
            logits = self.classifier.forward(x.reshape(x.shape[0], -1))
            self._cache = None
            return logits, None
        hist, cur = self._prepare(x)
        rw_pre = self.relation_weights_pre(x)
        report = combine_and_pool(rw_pre, self.dpe_vector(), hist)
        features = np.concatenate([report.hi, cur], axis=1)
        logits = self.classifier.forward(features)
        self._cache = (hist, report.rw)
        return check_finite(logits, "model forward"), report

    def predict_proba(self, x):
        return softmax(self.forward(x)[0])

    # -- backward ----------------------------------------------------------

    def backward(self, grad_logits):
        """Accumulate gradients for every parameter given ``dLoss/dlogits``."""
        if not self.training:
            raise RuntimeError("backward requires train mode")
        c = self.config
        grad_features = self.classifier.backward(grad_logits)
        if c.variant == "flatten_mlp":
            return
        hist, rw = self._cache
        scale = 1.0 / np.sqrt(c.M)
        grad_hi = grad_features[:, : c.M]
        grad_rw = np.einsum("bm,bkm->bk", grad_hi, hist) * scale
        b, k = grad_rw.shape
        self.relation.backward(grad_rw.reshape(b * k, 1))
        if self.p_query is not None:
            grad_dpe = grad_rw.sum(axis=0)
            pe_hist, pe_cur = self._pe[:-1], self._pe[-1]
            query = pe_hist @ self.p_query
            key = pe_cur @ self.p_key
            self.grad_p_query += pe_hist.T @ (grad_dpe[:, None] * key[None, :])
            self.grad_p_key += np.outer(pe_cur, grad_dpe @ query)
            check_finite(self.grad_p_query, "p_query gradient")
            check_finite(self.grad_p_key, "p_key gradient")

    def loss_and_backward(self, x, labels):
        """Train-mode forward, mean cross-entropy, and gradient accumulation."""
        if not self.training:
            raise RuntimeError("loss_and_backward requires train mode")
        logits, _ = self.forward(x)
        loss, grad = softmax_cross_entropy(logits, labels)
        self.backward(grad)
        return loss


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"DPTRNCKP"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, extra=None):
    """Write config header plus every state array (float64, little-endian) in declaration order."""
    arrays = model.state_arrays()
    header = {
        "config": model.config.to_dict(),
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, config=None):
    """Return ``(model, extra)``. If ``config`` is given it must match the stored header."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path} is not a DPTRN checkpoint")
        version, n = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(n).decode("utf-8"))
        stored = ModelConfig(**header["config"])
        if config is not None and config.to_dict() != stored.to_dict():
            raise CheckpointError(
                f"checkpoint config {stored.to_dict()} does not match requested {config.to_dict()}"
            )
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"truncated checkpoint while reading {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(DTYPE)
    model = DPTRN(stored)
    model.load_state_arrays(arrays)
    model.eval()
    return model, header["extra"]
