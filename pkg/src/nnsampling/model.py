"""Small feed-forward networks with hand-written backpropagation.

Parameters live in a single flat vector ("theta"): for each layer, the
weight matrix in row-major order (output index major), followed by the
biases.  The total loss is the SUM of per-item losses over the batch;
minibatch rescaling (M/m) is the caller's job.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("linear", "sigmoid")
OUTPUT_ACTIVATIONS = ("linear",)
LOSS_KINDS = ("mean_squared_error", "softmax_cross_entropy")


@dataclass(frozen=True)
class Architecture:
    """Feed-forward architecture descriptor.

    layer_sizes is (input dim, hidden dims..., output dim); every affine
    layer carries a weight matrix and a bias vector.
    """

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "linear"
    output_activation: str = "linear"
    loss: str = "mean_squared_error"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_parameters(self) -> int:
        return sum(n_in * n_out + n_out
                   for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


@dataclass
class LossGrad:
    """Total loss over a batch and its exact gradient."""

    loss: float
    grad: np.ndarray


def unflatten(arch: Architecture, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer (W, b) views."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.n_parameters,):
        raise ValueError(
            f"parameter vector has shape {params.shape}, "
            f"expected ({arch.n_parameters},) for layer sizes {arch.layer_sizes}")
    layers = []
    pos = 0
    for n_in, n_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        w = params[pos:pos + n_in * n_out].reshape(n_out, n_in)
        pos += n_in * n_out
        b = params[pos:pos + n_out]
        pos += n_out
        layers.append((w, b))
    return layers


def flatten(arch: Architecture, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of unflatten."""
    parts = []
    for (n_in, n_out), (w, b) in zip(
            zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]), layers):
        if w.shape != (n_out, n_in) or b.shape != (n_out,):
            raise ValueError(f"layer shapes {w.shape}/{b.shape} do not match "
                             f"({n_out}, {n_in})/({n_out},)")
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64))
    return np.concatenate(parts)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(arch: Architecture, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input or a batch (rows = items)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != arch.n_inputs:
        raise ValueError(
            f"input has {a.shape[1]} features, architecture expects {arch.n_inputs}")
    layers = unflatten(arch, params)
    for i, (w, b) in enumerate(layers):
        a = a @ w.T + b
        if i < len(layers) - 1 and arch.hidden_activation == "sigmoid":
            a = _sigmoid(a)
    return a[0] if single else a


def softmax_cross_entropy(logits: np.ndarray, one_hot_label: np.ndarray) -> float:
    """-sum_i y_i log p_i with p = softmax(logits), computed stably."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(one_hot_label, dtype=np.float64)
    _check_one_hot(y[None, :] if y.ndim == 1 else y)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    return float(log_z - shifted @ y)


def _check_one_hot(labels: np.ndarray) -> None:
    ok = np.all((labels == 0.0) | (labels == 1.0)) and np.all(labels.sum(axis=1) == 1.0)
    if not ok:
        raise ValueError("softmax cross-entropy requires one-hot labels")


def _softmax_rows(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True), shifted


def loss_and_gradient(arch: Architecture, params: np.ndarray,
                      inputs: np.ndarray, labels: np.ndarray) -> LossGrad:
    """Total loss over the batch and its gradient via reverse accumulation.

    MSE: per item sum_c (f_c - y_c)^2.  Cross entropy: -sum_c y_c log p_c
    with p = softmax(f).  Both summed (not averaged) over items.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if inputs.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if inputs.shape[0] != labels.shape[0]:
        raise ValueError(f"{inputs.shape[0]} inputs vs {labels.shape[0]} labels")
    if inputs.shape[1] != arch.n_inputs:
        raise ValueError(
            f"input has {inputs.shape[1]} features, architecture expects {arch.n_inputs}")
    if labels.shape[1] != arch.n_outputs:
        raise ValueError(
            f"label has {labels.shape[1]} components, architecture expects {arch.n_outputs}")

    layers = unflatten(arch, params)
    activations = [inputs]
    a = inputs
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if i < len(layers) - 1 and arch.hidden_activation == "sigmoid":
            a = _sigmoid(z)
        else:
            a = z
        activations.append(a)
    f = activations[-1]

    if arch.loss == "mean_squared_error":
        r = f - labels
        loss = float(np.sum(r * r))
        delta = 2.0 * r
    else:
        _check_one_hot(labels)
        p, shifted = _softmax_rows(f)
        log_z = np.log(np.sum(np.exp(shifted), axis=1))
        loss = float(np.sum(log_z - np.sum(shifted * labels, axis=1)))
        delta = p - labels

    grad_layers = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        a_prev = activations[i]
        grad_w = delta.T @ a_prev
        grad_b = delta.sum(axis=0)
        grad_layers[i] = (grad_w, grad_b)
        if i > 0:
            delta = delta @ layers[i][0]
            if arch.hidden_activation == "sigmoid":
                a_i = activations[i]
                delta = delta * a_i * (1.0 - a_i)

    grad = flatten(arch, grad_layers)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite loss or gradient")
    return LossGrad(loss=loss, grad=grad)


def total_loss(arch: Architecture, params: np.ndarray,
               inputs: np.ndarray, labels: np.ndarray) -> float:
    """Batch loss without the gradient (cheaper for grid scans)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    f = forward(arch, params, inputs)
    if arch.loss == "mean_squared_error":
        r = f - labels
        return float(np.sum(r * r))
    _check_one_hot(labels)
    p, shifted = _softmax_rows(f)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    return float(np.sum(log_z - np.sum(shifted * labels, axis=1)))


def random_params(arch: Architecture, seed: int, scale: float = 0.1) -> np.ndarray:
    """Gaussian-initialized flat parameter vector (biases zero)."""
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        layers.append((scale * rng.standard_normal((n_out, n_in)), np.zeros(n_out)))
    return flatten(arch, layers)


class QuadraticLossGradient:
    """Exact loss/gradient evaluator for single-layer linear nets with MSE.

    For f(x) = w.x (+ b) and L = sum_i (f(x_i) - y_i)^2 the loss is the
    quadratic  theta^T H theta - 2 q^T theta + c  with H = X~^T X~,
    q = X~^T y, c = y^T y (X~ optionally extended by a ones column for the
    bias).  Evaluations vectorize over a leading axis of stacked parameter
    vectors, which is what makes multi-seed sweeps cheap.

    Agrees with loss_and_gradient on the same data to rounding error
    (asserted in the test suite).
    """

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, include_bias: bool = True):
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        y = np.asarray(labels, dtype=np.float64).reshape(x.shape[0])
        if include_bias:
            x = np.hstack([x, np.ones((x.shape[0], 1))])
        self.n_parameters = x.shape[1]
        self.hessian_half = x.T @ x          # H: Hessian is 2H
        self.linear = x.T @ y                # q
        self.constant = float(y @ y)

    def __call__(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        ht = theta @ self.hessian_half
        loss = np.sum(theta * ht, axis=-1) - 2.0 * (theta @ self.linear) + self.constant
        grad = 2.0 * (ht - self.linear)
        return loss, grad
