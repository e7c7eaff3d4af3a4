"""Dense feed-forward networks with hand-written backprop and plain SGD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, NumericError, ShapeError, ValidationError

FORMAT_VERSION = "1.0"
ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")
LOG_FLOOR = 1e-12


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(name, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return sigmoid(z)


def _activation_grad(name, out):
    # derivative expressed through the activation's output
    if name == "identity":
        return None
    if name == "relu":
        return (out > 0).astype(out.dtype)
    if name == "tanh":
        return 1.0 - out * out
    return out * (1.0 - out)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValidationError("learning_rate must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be >= 0")
        if self.patience < 0:
            raise ValidationError("patience must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValidationError("validation_fraction must lie in [0, 1)")


class DenseNet:
    """Stack of affine layers, each followed by an elementwise activation.

    Weights are stored ``(fan_in, fan_out)`` so a batch propagates as
    ``act(x @ W + b)``.
    """

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations)) or not weights:
            raise ShapeError("need one weight, bias and activation per layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = tuple(activations)
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            if a not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {a!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i} expects width {w.shape[0]}, previous layer gives {self.weights[i - 1].shape[1]}")

    @classmethod
    def initialize(cls, widths, activations, rng):
        """Glorot-uniform weights, zero biases."""
        if len(widths) != len(activations) + 1:
            raise ShapeError("need len(widths) == len(activations) + 1")
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activations)

    @property
    def input_width(self):
        return self.weights[0].shape[0]

    @property
    def output_width(self):
        return self.weights[-1].shape[1]

    @property
    def widths(self):
        return [self.input_width] + [w.shape[1] for w in self.weights]

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params):
        return DenseNet(params[0::2], params[1::2], self.activations)

    def copy(self):
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activations)

    @property
    def n_params(self):
        return sum(p.size for p in self.params())

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"expected a batch with {self.input_width} columns, got shape {x.shape}")
        return x

    def forward(self, x):
        h = self._check_input(x)
        for w, b, a in zip(self.weights, self.biases, self.activations):
            h = _activate(a, h @ w + b)
        return h

    def forward_train(self, x):
        """Forward pass that also returns the per-layer inputs/outputs for backprop."""
        h = self._check_input(x)
        cache = [h]
        for w, b, a in zip(self.weights, self.biases, self.activations):
            h = _activate(a, h @ w + b)
            cache.append(h)
        return h, cache

    def backward(self, cache, grad_out, input_grad=True):
        """Gradients of a scalar loss given dL/d(output).

        Returns ``(grads, grad_input)`` with ``grads`` ordered like :meth:`params`.
        """
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            d = _activation_grad(self.activations[i], cache[i + 1])
            if d is not None:
                g = g * d
            grads[2 * i] = cache[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i or input_grad:
                g = g @ self.weights[i].T
        return grads, (g if input_grad else None)

    def to_json(self):
        return {
            "format_version": FORMAT_VERSION,
            "widths": self.widths,
            "activations": list(self.activations),
            "params": [p.ravel().tolist() for p in self.params()],
        }

    @classmethod
    def from_json(cls, doc):
        widths = doc["widths"]
        flat = doc["params"]
        if len(flat) != 2 * (len(widths) - 1):
            raise ShapeError("parameter list does not match layer widths")
        weights, biases = [], []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            weights.append(np.array(flat[2 * i], dtype=np.float64).reshape(fi, fo))
            biases.append(np.array(flat[2 * i + 1], dtype=np.float64).reshape(fo))
        return cls(weights, biases, doc["activations"])


def forward(net, batch):
    return net.forward(batch)


def check_finite_grads(grads):
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient", layer=k // 2)


def sgd_step(net, grads, cfg):
    """Return a new net with ``params - learning_rate * grads``; ``net`` is untouched."""
    lr = cfg.learning_rate if isinstance(cfg, SgdConfig) else float(cfg)
    params = net.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeError("gradients do not match the network's parameters")
    check_finite_grads(grads)
    return net.with_params([p - lr * g for p, g in zip(params, grads)])


def sgd_update_(nets_and_grads, lr):
    """In-place SGD over several nets at once; all gradients are validated first."""
    for _, grads in nets_and_grads:
        check_finite_grads(grads)
    for net, grads in nets_and_grads:
        for p, g in zip(net.params(), grads):
            p -= lr * g


def grad_check(fun, point, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``fun(params) -> (value, grads)``; relative error per entry is
    ``|g_fd - g_an| / max(1, |g_fd| + |g_an|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValidationError("eps must lie in [1e-7, 1e-3]")
    point = [np.array(p, dtype=np.float64) for p in point]
    value, analytic = fun(point)
    if not np.isfinite(value):
        raise NumericError("loss is not finite at the check point")
    worst = 0.0
    for k, p in enumerate(point):
        flat = p.ravel()
        g_an = np.asarray(analytic[k], dtype=np.float64).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fun(point)[0]
            flat[i] = orig - eps
            down = fun(point)[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss not finite at perturbed point (param {k}, entry {i})")
            g_fd = (up - down) / (2 * eps)
            err = abs(g_fd - g_an[i]) / max(1.0, abs(g_fd) + abs(g_an[i]))
            worst = max(worst, err)
    return worst
