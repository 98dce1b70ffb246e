"""Dense layer primitives with explicit forward and backward passes.

All arrays are float64 numpy arrays. Every layer caches what its backward
pass needs during ``forward``; ``backward`` accumulates parameter gradients
(``+=``) and returns the gradient with respect to the layer input.
"""

import numpy as np
from numba import njit

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class ConfigError(ValueError):
    """Raised for invalid layer or model configuration."""


class NumericalError(ArithmeticError):
    """Raised when a NaN or Inf shows up in a forward or backward pass."""


def check_finite(arr, where):
    # a NaN or Inf anywhere makes the sum non-finite; only then pay for the full scan
    if not np.isfinite(np.sum(arr)) and not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {where}")
    return arr


def _as_matrix(x, name="x"):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    return x


class Layer:
    """Base class. Subclasses with learnable state override ``params``."""

    training = True

    def params(self):
        """Return ``{name: (value, grad)}`` for every learnable array."""
        return {}

    def zero_grad(self):
        for _, grad in self.params().values():
            grad.fill(0.0)

    def train(self):
        self.training = True

    def eval(self):
        self.training = False


class Linear(Layer):
    """Affine map ``y = x @ W.T + b`` with ``W`` stored as ``[out, in]``."""

    def __init__(self, in_dim, out_dim, rng=None):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"Linear dims must be positive, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            self.weight = np.zeros((out_dim, in_dim), dtype=DTYPE)
        else:
            bound = np.sqrt(6.0 / in_dim)
            self.weight = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(DTYPE)
        self.bias = np.zeros(out_dim, dtype=DTYPE)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        # off for layers that read raw data; backward then returns None
        self.needs_input_grad = True
        self._x = None

    def params(self):
        return {
            "weight": (self.weight, self.grad_weight),
            "bias": (self.bias, self.grad_bias),
        }

    def forward(self, x):
        x = _as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise DimensionError(
                f"input shape {x.shape} does not match weight shape {self.weight.shape}"
            )
        self._x = x
        out = x @ self.weight.T
        out += self.bias
        return check_finite(out, "linear forward")

    def backward(self, grad_out):
        grad_out = _as_matrix(grad_out, "grad_out")
        x = self._x
        if x is None:
            raise RuntimeError("backward called before forward")
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise DimensionError(
                f"grad_out shape {grad_out.shape} does not match output shape "
                f"{(x.shape[0], self.out_dim)}"
            )
        self.grad_weight += grad_out.T @ x
        self.grad_bias += grad_out.sum(axis=0)
        check_finite(self.grad_weight, "linear weight gradient")
        if not self.needs_input_grad:
            return None
        return check_finite(grad_out @ self.weight, "linear backward")


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0.0)


class ReLU(Layer):
    def __init__(self):
        self._active = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        self._active = x > 0.0
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        return grad_out * self._active


class BatchNorm(Layer):
    """Per-feature batch normalization over the rows of a ``[batch, d]`` input.

    Train mode normalizes with the batch mean and biased variance and updates
    the running statistics by an exponential moving average; eval mode uses
    the running statistics only.
    """

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        if eps <= 0:
            raise ConfigError(f"batch norm eps must be positive, got {eps}")
        if not 0.0 < momentum <= 1.0:
            raise ConfigError(f"batch norm momentum must be in (0, 1], got {momentum}")
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(dim, dtype=DTYPE)
        self.beta = np.zeros(dim, dtype=DTYPE)
        self.grad_gamma = np.zeros(dim, dtype=DTYPE)
        self.grad_beta = np.zeros(dim, dtype=DTYPE)
        self.running_mean = np.zeros(dim, dtype=DTYPE)
        self.running_var = np.ones(dim, dtype=DTYPE)
        self._cache = None

    def params(self):
        return {
            "gamma": (self.gamma, self.grad_gamma),
            "beta": (self.beta, self.grad_beta),
        }

    def forward(self, x):
        x = _as_matrix(x)
        if x.shape[1] != self.dim:
            raise DimensionError(f"input shape {x.shape} does not match batch norm dim {self.dim}")
        if self.training:
            if x.shape[0] < 2:
                raise ConfigError("batch norm in train mode needs a batch of at least 2")
            mean = x.mean(axis=0)
            x_hat = x - mean
            var = np.einsum("ij,ij->j", x_hat, x_hat) / x.shape[0]
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            self.running_var = (1.0 - m) * self.running_var + m * var
        else:
            var = self.running_var
            x_hat = x - self.running_mean
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat *= inv_std
        self._cache = (x_hat, inv_std, self.training)
        out = x_hat * self.gamma
        out += self.beta
        return out

    def backward(self, grad_out):
        x_hat, inv_std, training = self._cache
        sum_gx = np.einsum("ij,ij->j", grad_out, x_hat)
        sum_g = grad_out.sum(axis=0)
        self.grad_gamma += sum_gx
        self.grad_beta += sum_g
        scale = self.gamma * inv_std
        if not training:
            return grad_out * scale
        n = grad_out.shape[0]
        grad_in = x_hat * (-sum_gx / n)
        grad_in += grad_out
        grad_in -= sum_g / n
        grad_in *= scale
        return grad_in


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""

    def __init__(self, rate, rng=None):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        bits = self.draw_bits(x.shape)
        self._mask = np.multiply(bits < self.threshold, 1.0 / (1.0 - self.rate))
        return x * self._mask

    @property
    def threshold(self):
        # 16-bit uniform draws: keep probability is exact to within 2**-16
        return int(round((1.0 - self.rate) * 65536))

    def draw_bits(self, shape):
        size = int(np.prod(shape))
        raw = self.rng.bit_generator.random_raw(-(-size // 4))
        return raw.view(np.uint16)[:size].reshape(shape)

    def backward(self, grad_out):
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


@njit(cache=True)
def _block_forward(x, gamma, beta, bits, threshold, scale, eps):
    n, d = x.shape
    mean = np.zeros(d)
    var = np.zeros(d)
    for i in range(n):
        for j in range(d):
            mean[j] += x[i, j]
    for j in range(d):
        mean[j] /= n
    for i in range(n):
        for j in range(d):
            c = x[i, j] - mean[j]
            var[j] += c * c
    inv_std = np.empty(d)
    for j in range(d):
        var[j] /= n
        inv_std[j] = 1.0 / np.sqrt(var[j] + eps)
    x_hat = np.empty((n, d))
    out = np.empty((n, d))
    keep = np.empty((n, d), dtype=np.bool_)
    # per-column sums stay vectorizable; a NaN or Inf anywhere shows up here
    total = np.zeros(d)
    for i in range(n):
        for j in range(d):
            h = (x[i, j] - mean[j]) * inv_std[j]
            x_hat[i, j] = h
            y = h * gamma[j] + beta[j]
            k = y > 0.0 and bits[i, j] < threshold
            keep[i, j] = k
            v = y * scale if k else 0.0
            out[i, j] = v
            total[j] += v
    return out, x_hat, keep, mean, var, inv_std, total.sum()


@njit(cache=True)
def _block_backward(g, x_hat, keep, gamma, inv_std, scale):
    n, d = g.shape
    sum_g = np.zeros(d)
    sum_gx = np.zeros(d)
    for i in range(n):
        for j in range(d):
            if keep[i, j]:
                gy = g[i, j] * scale
                sum_g[j] += gy
                sum_gx[j] += gy * x_hat[i, j]
    a = np.empty(d)
    b = np.empty(d)
    c = np.empty(d)
    for j in range(d):
        s = gamma[j] * inv_std[j]
        a[j] = s * scale
        b[j] = s * sum_gx[j] / n
        c[j] = s * sum_g[j] / n
    out = np.empty((n, d))
    total = np.zeros(d)
    for i in range(n):
        for j in range(d):
            v = -x_hat[i, j] * b[j] - c[j]
            if keep[i, j]:
                v += g[i, j] * a[j]
            out[i, j] = v
            total[j] += v
    return out, sum_g, sum_gx, total.sum()


class HiddenBlock(Layer):
    """``BatchNorm -> ReLU -> Dropout`` as one layer.

    Train mode runs a fused single-pass kernel; it draws dropout bits exactly
    as :class:`Dropout` does, so results match the three layers applied in
    sequence. Eval mode simply chains the component layers.
    """

    def __init__(self, dim, dropout=0.1, dropout_rng=None):
        self.bn = BatchNorm(dim)
        self.relu = ReLU()
        self.dropout = Dropout(dropout, dropout_rng)
        self._cache = None

    def params(self):
        return self.bn.params()

    def train(self):
        self.training = True
        for layer in (self.bn, self.relu, self.dropout):
            layer.train()

    def eval(self):
        self.training = False
        for layer in (self.bn, self.relu, self.dropout):
            layer.eval()

    def forward(self, x):
        if not self.training:
            self._cache = None
            return self.dropout.forward(self.relu.forward(self.bn.forward(x)))
        x = _as_matrix(x)
        bn = self.bn
        if x.shape[1] != bn.dim:
            raise DimensionError(f"input shape {x.shape} does not match batch norm dim {bn.dim}")
        if x.shape[0] < 2:
            raise ConfigError("batch norm in train mode needs a batch of at least 2")
        drop = self.dropout
        if drop.rate > 0.0:
            bits, threshold = drop.draw_bits(x.shape), drop.threshold
        else:
            bits, threshold = np.zeros(x.shape, dtype=np.uint16), 1
        scale = 1.0 / (1.0 - drop.rate)
        out, z, keep, mean, var, inv_std, total = _block_forward(
            np.ascontiguousarray(x), bn.gamma, bn.beta, bits, threshold, scale, bn.eps
        )
        m = bn.momentum
        bn.running_mean = (1.0 - m) * bn.running_mean + m * mean
        bn.running_var = (1.0 - m) * bn.running_var + m * var
        self._cache = (z, keep, inv_std, scale)
        if not np.isfinite(total):
            check_finite(out, "hidden block forward")
        return out

    def backward(self, grad_out):
        if self._cache is None:
            return self.bn.backward(self.relu.backward(self.dropout.backward(grad_out)))
        x_hat, keep, inv_std, scale = self._cache
        grad_out = _as_matrix(grad_out, "grad_out")
        if grad_out.shape != x_hat.shape:
            raise DimensionError(f"grad_out shape {grad_out.shape} does not match output shape {x_hat.shape}")
        grad_in, sum_g, sum_gx, total = _block_backward(
            grad_out, x_hat, keep, self.bn.gamma, inv_std, scale
        )
        self.bn.grad_gamma += sum_gx
        self.bn.grad_beta += sum_g
        if not np.isfinite(total):
            check_finite(grad_in, "hidden block backward")
        return grad_in


class MLP(Layer):
    """Stack of ``Linear -> BatchNorm -> ReLU -> Dropout`` blocks and a raw final Linear."""

    def __init__(self, in_dim, hidden, out_dim, dropout=0.1, rng=None, dropout_rng=None):
        self.layers = []
        dims = [in_dim, *hidden]
        for a, b in zip(dims[:-1], dims[1:]):
            self.layers += [Linear(a, b, rng), HiddenBlock(b, dropout, dropout_rng)]
        self.layers.append(Linear(dims[-1], out_dim, rng))

    @property
    def linears(self):
        return [layer for layer in self.layers if isinstance(layer, Linear)]

    @property
    def batchnorms(self):
        return [layer.bn for layer in self.layers if isinstance(layer, HiddenBlock)]

    def params(self):
        out = {}
        i_lin = i_bn = 0
        for layer in self.layers:
            if isinstance(layer, Linear):
                prefix = f"linear{i_lin}"
                i_lin += 1
            elif isinstance(layer, HiddenBlock):
                prefix = f"bn{i_bn}"
                i_bn += 1
            else:
                continue
            for name, pair in layer.params().items():
                out[f"{prefix}.{name}"] = pair
        return out

    def train(self):
        self.training = True
        for layer in self.layers:
            layer.train()

    def eval(self):
        self.training = False
        for layer in self.layers:
            layer.eval()

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


def softmax(logits):
    logits = _as_matrix(logits, "logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = _as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z - log_norm[:, None]
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(check_finite(loss, "cross-entropy")), grad
