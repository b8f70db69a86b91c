"""Small dense numeric core: layers with closed-form backward passes, losses
and an RMSprop optimizer.

Matrices are plain ``float64`` numpy arrays (row-major, ``B x features``).
Layers cache what their backward pass needs during ``forward`` and
*accumulate* parameter gradients on ``backward``; call ``zero_grad`` before
each optimisation step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-12
BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Layer:
    """Base class. Parameterless layers inherit the empty hooks."""

    training = True

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []

    def zero_grad(self) -> None:
        for g in self.grads():
            g.fill(0.0)

    def train(self, mode: bool = True) -> None:
        self.training = mode

    def eval(self) -> None:
        self.train(False)


def dense_forward(layer: "Dense", x: np.ndarray) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != layer.weight.shape[0]:
        raise ShapeError(
            f"dense layer expects {layer.weight.shape[0]} inputs, got {x.shape[1]}"
        )
    return x @ layer.weight + layer.bias


def dense_backward(layer: "Dense", x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate ``x^T grad_out`` and the column sums of ``grad_out``; return
    the gradient with respect to ``x``."""
    grad_out = as_matrix(grad_out)
    if grad_out.shape != (x.shape[0], layer.weight.shape[1]):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(x.shape[0], layer.weight.shape[1])}"
        )
    layer.grad_weight += x.T @ grad_out
    layer.grad_bias += grad_out.sum(axis=0)
    return grad_out @ layer.weight.T


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        if n_in < 1 or n_out < 1:
            raise ShapeError(f"invalid dense layer dims {n_in}->{n_out}")
        self.weight = np.zeros((n_in, n_out))
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None
        if rng is not None:
            self.reset_parameters(rng)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        # Kaiming-uniform on fan-in, ReLU gain
        bound = np.sqrt(6.0 / self.weight.shape[0])
        self.weight[...] = rng.uniform(-bound, bound, size=self.weight.shape)
        self.bias.fill(0.0)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def forward(self, x):
        self._x = as_matrix(x)
        return dense_forward(self, self._x)

    def backward(self, grad_out):
        return dense_backward(self, self._x, grad_out)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad_out, 0.0)


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(self._x, grad_out)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """``y`` is the forward *output*."""
    return grad_out * y * (1.0 - y)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = sigmoid_forward(x)
        return self._y

    def backward(self, grad_out):
        return sigmoid_backward(self._y, grad_out)


def dropout_forward(x: np.ndarray, p: float, rng: np.random.Generator, training: bool):
    """Inverted dropout. Returns ``(out, mask)``; mask is ``None`` in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


class Dropout(Layer):
    def __init__(self, p: float = 0.5, rng: np.random.Generator | None = None):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng()
        self.mask = None

    def forward(self, x):
        out, self.mask = dropout_forward(x, self.p, self.rng, self.training)
        return out

    def backward(self, grad_out):
        return dropout_backward(self.mask, grad_out)


def batchnorm_forward(bn: "BatchNorm1d", x: np.ndarray, training: bool):
    """Returns ``(out, cache)``; cache is ``None`` in eval mode. Updates the
    running statistics in train mode."""
    x = as_matrix(x)
    if x.shape[1] != bn.gamma.shape[0]:
        raise ShapeError(f"batchnorm expects {bn.gamma.shape[0]} features, got {x.shape[1]}")
    if not training:
        xhat = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        return bn.gamma * xhat + bn.beta, None
    n = x.shape[0]
    if n < 2:
        raise DegenerateBatchError("batchnorm needs at least 2 rows in train mode")
    mean = x.mean(axis=0)
    centered = x - mean
    var = (centered**2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = centered * inv_std
    m = bn.momentum
    bn.running_mean *= 1.0 - m
    bn.running_mean += m * mean
    bn.running_var *= 1.0 - m
    bn.running_var += m * var * (n / (n - 1))
    return bn.gamma * xhat + bn.beta, (xhat, inv_std)


def batchnorm_backward(bn: "BatchNorm1d", cache, grad_out: np.ndarray) -> np.ndarray:
    xhat, inv_std = cache
    n = xhat.shape[0]
    bn.grad_gamma += (grad_out * xhat).sum(axis=0)
    bn.grad_beta += grad_out.sum(axis=0)
    gx = grad_out * bn.gamma
    return inv_std / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))


class BatchNorm1d(Layer):
    def __init__(self, n_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = np.ones(n_features)
        self.beta = np.zeros(n_features)
        self.grad_gamma = np.zeros(n_features)
        self.grad_beta = np.zeros(n_features)
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.grad_gamma, self.grad_beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x):
        out, self._cache = batchnorm_forward(self, x, self.training)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("batchnorm backward requires a train-mode forward")
        return batchnorm_backward(self, self._cache, grad_out)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def train(self, mode: bool = True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def __call__(self, x):
        return self.forward(x)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got {labels.min()}..{labels.max()}")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits: np.ndarray, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    logits = as_matrix(logits)
    onehot = as_matrix(onehot)
    if logits.shape != onehot.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {onehot.shape}")
    if not (np.all((onehot == 0.0) | (onehot == 1.0)) and np.all(onehot.sum(axis=1) == 1.0)):
        raise LabelError("every target row must contain exactly one 1")
    b = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float((onehot * logp).sum()) / b
    grad = (np.exp(logp) - onehot) / b
    return loss, grad


def binary_cross_entropy(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean BCE. Predictions are clamped to ``[1e-7, 1 - 1e-7]``; the gradient
    is zero where clamping is active."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -float(np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))
    grad = (p - target) / (p * (1.0 - p)) / n
    grad = np.where((pred > BCE_CLAMP) & (pred < 1.0 - BCE_CLAMP), grad, 0.0)
    return loss, grad


def l2_normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_FLOOR)
    return z / norms, norms


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = max(float(np.linalg.norm(a)), NORM_FLOOR)
    nb = max(float(np.linalg.norm(b)), NORM_FLOOR)
    return float(a @ b) / (na * nb)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``."""
    an, _ = l2_normalize(np.atleast_2d(a))
    bn, _ = l2_normalize(np.atleast_2d(b))
    return an @ bn.T


def supcon_loss(embeddings: np.ndarray, group_ids, tau: float) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over cosine similarities.

    For each anchor ``i`` with at least one positive (another row with the
    same group id) the term is the mean over positives ``p`` of
    ``-log(exp(s_ip/tau) / sum_{j != i} exp(s_ij/tau))``. Terms are averaged
    over anchors that have positives. If no anchor has a positive the loss is
    0 with a zero gradient.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = as_matrix(embeddings)
    groups = np.asarray(group_ids)
    b = z.shape[0]
    if groups.shape != (b,):
        raise ShapeError(f"need one group id per row, got {groups.shape} for {b} rows")
    if b < 2:
        return 0.0, np.zeros_like(z)

    zn, norms = l2_normalize(z)
    logits = zn @ zn.T / tau
    eye = np.eye(b, dtype=bool)
    pos = (groups[:, None] == groups[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(z)

    masked = np.where(eye, -np.inf, logits)
    row_max = masked.max(axis=1, keepdims=True)
    expd = np.exp(masked - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    log_denom = np.log(denom) + row_max
    log_prob = logits - log_denom
    safe_pos = np.maximum(n_pos, 1)
    per_anchor = -(np.where(pos, log_prob, 0.0).sum(axis=1)) / safe_pos
    loss = float(per_anchor[valid].sum()) / n_valid

    # d loss / d logits
    d_logits = expd / denom - pos / safe_pos[:, None]
    d_logits[~valid] = 0.0
    d_logits /= n_valid
    d_zn = (d_logits + d_logits.T) @ zn / tau
    # back through the row normalisation
    d_z = (d_zn - zn * (zn * d_zn).sum(axis=1, keepdims=True)) / norms
    return loss, d_z


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


@dataclass
class RmspropState:
    sq_avg: np.ndarray
    alpha: float = 0.99
    eps: float = 1e-8


def rmsprop_step(param: np.ndarray, grad: np.ndarray, state: RmspropState,
                 lr: float, weight_decay: float = 0.0) -> None:
    """In-place plain (non-centred) RMSprop update with L2 weight decay."""
    if param.shape != grad.shape or param.shape != state.sq_avg.shape:
        raise ShapeError(
            f"param {param.shape}, grad {grad.shape}, state {state.sq_avg.shape} differ"
        )
    g = grad + weight_decay * param if weight_decay else grad
    state.sq_avg *= state.alpha
    state.sq_avg += (1.0 - state.alpha) * g * g
    param -= lr * g / (np.sqrt(state.sq_avg) + state.eps)


@dataclass
class RMSprop:
    params: list[np.ndarray]
    grads: list[np.ndarray]
    lr: float = 1e-3
    alpha: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    states: list[RmspropState] = field(init=False)

    def __post_init__(self):
        if len(self.params) != len(self.grads):
            raise ShapeError("params and grads lists differ in length")
        self.states = [RmspropState(np.zeros_like(p), self.alpha, self.eps) for p in self.params]

    def zero_grad(self) -> None:
        for g in self.grads:
            g.fill(0.0)

    def step(self) -> None:
        for p, g, s in zip(self.params, self.grads, self.states):
            rmsprop_step(p, g, s, self.lr, self.weight_decay)
