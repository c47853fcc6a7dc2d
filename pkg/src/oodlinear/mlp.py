"""A small fully connected ReLU classifier with manual backprop.

Serves two jobs: generating realistic logits for synthetic experiments
and supplying the input gradients the perturbation scorer needs.  All
math is explicit numpy; no autograd framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oodlinear.errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size}")


class Mlp:
    """Affine+ReLU stack ending in raw logits (no softmax on the output).

    dims = [d_in, h1, ..., C].  Weights are (fan_in, fan_out); forward
    is x @ W + b per layer.  Training mutates the instance; inference
    methods are pure.
    """

    def __init__(self, dims: list[int], weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigurationError(f"dims must list at least [d_in, n_classes] with positive entries, got {dims}")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i} parameter shapes {w.shape}/{b.shape} do not match dims {dims}")
        self.dims = list(dims)
        self.weights = weights
        self.biases = biases

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        was_1d = x.ndim == 1
        if was_1d:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"input shape {x.shape} does not match model input dim {self.input_dim}")
        return x, was_1d

    def _forward_trace(self, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Hidden activations (post-ReLU) per layer and the final logits."""
        hidden = []
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            hidden.append(h)
        logits = h @ self.weights[-1] + self.biases[-1]
        return hidden, logits

    def forward(self, x) -> np.ndarray:
        x, was_1d = self._check_input(x)
        _, logits = self._forward_trace(x)
        return logits[0] if was_1d else logits

    def penultimate(self, x) -> np.ndarray:
        """Activations feeding the final affine layer.

        For a single-layer model this is the input itself.  The
        synthetic pipeline can use these as the feature representation.
        """
        x, was_1d = self._check_input(x)
        hidden, _ = self._forward_trace(x)
        out = hidden[-1] if hidden else x
        return out[0] if was_1d else out

    def input_gradient(self, x, temperature: float = 1.0) -> np.ndarray:
        """Exact gradient of -log(max softmax(f/T)) with respect to x.

        The argmax class is held fixed (no gradient through the class
        selection).  ReLU subgradient at exactly 0 is 0.
        """
        x, was_1d = self._check_input(x)
        if not was_1d:
            raise ShapeError("input_gradient takes a single sample (1-d input)")
        hidden, logits = self._forward_trace(x)
        f = logits[0]
        top = int(np.argmax(f))
        z = f / temperature
        z = z - np.max(z)
        p = np.exp(z) / np.sum(np.exp(z))
        dlogits = (p - np.eye(f.size)[top]) / temperature  # d(-log p_top)/df
        grad = dlogits[None, :]
        layers_in = [x] + hidden
        for i in range(len(self.weights) - 1, -1, -1):
            grad = grad @ self.weights[i].T
            if i > 0:
                grad = grad * (layers_in[i] > 0)
        return grad[0]


def init_mlp(dims: list[int], seed: int = 0) -> Mlp:
    """Seeded uniform(-a, a) weights with a = sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(dims, weights, biases)


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient at the logit layer.

    The gradient is (softmax - onehot)/batch, the standard softmax+CE
    identity.
    """
    z = logits - np.max(logits, axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train(model: Mlp, features: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> tuple[Mlp, np.ndarray]:
    """Minibatch SGD on cross-entropy; deterministic given cfg.seed.

    Mutates the model in place and returns it with the per-epoch mean
    loss trace.  Zero epochs leaves the parameters untouched.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"need a nonempty 2-d feature matrix, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
    if np.any(y < 0) or np.any(y >= model.n_classes):
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    rng = np.random.default_rng(cfg.seed)
    trace = []
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            hidden, logits = model._forward_trace(xb)
            loss, grad = cross_entropy_grad(logits, yb)
            epoch_loss += loss * idx.size
            layers_in = [xb] + hidden
            for i in range(len(model.weights) - 1, -1, -1):
                # propagate before updating: gradients are taken at the current parameters
                grad_in = (grad @ model.weights[i].T) * (layers_in[i] > 0) if i > 0 else None
                model.weights[i] -= cfg.learning_rate * (layers_in[i].T @ grad)
                model.biases[i] -= cfg.learning_rate * np.sum(grad, axis=0)
                grad = grad_in
        trace.append(epoch_loss / n)
    return model, np.asarray(trace)
