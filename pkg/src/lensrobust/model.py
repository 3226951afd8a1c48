"""A small fully connected classifier with hand-written backpropagation.

Networks map a flattened image to class logits. Besides training (natural or
PGD adversarial), the module provides the attribution methods used in the
experiments: simple gradients, input x gradient and integrated gradients,
plus a finite-difference Hessian-vector product for the attacks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .core import AttributionMap, DatasetManifest, ImageTensor, format_real
from .errors import DataError, DivergenceError, DomainError, ParseError

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "softplus")


@dataclass(frozen=True, eq=False)
class ToyNetwork:
    weights: tuple[np.ndarray, ...]  # each (out, in)
    biases: tuple[np.ndarray, ...]
    activation: str = "softplus"
    beta: float = 10.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.activation == "softplus" and not self.beta > 0:
            raise DomainError("softplus beta must be positive")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DomainError("need one bias vector per weight matrix")
        weights, biases = [], []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise DomainError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[1] != weights[-1].shape[0]:
                raise DomainError(f"layer {i} expects {W.shape[1]} inputs, previous layer gives {weights[-1].shape[0]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise DomainError(f"layer {i} has non-finite parameters")
            W.setflags(write=False)
            b.setflags(write=False)
            weights.append(W)
            biases.append(b)
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def with_activation(self, activation: str, beta: float = 10.0) -> "ToyNetwork":
        return replace(self, activation=activation, beta=beta)

    def smooth_surrogate(self, beta: float = 10.0) -> "ToyNetwork":
        """Same weights with softplus units; ReLU has no useful second derivative."""
        if self.activation == "softplus":
            return self
        return self.with_activation("softplus", beta)

    def same_parameters(self, other: "ToyNetwork") -> bool:
        return (
            self.activation == other.activation
            and self.beta == other.beta
            and len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


def init_network(layer_dims: Sequence[int], activation: str = "softplus", seed: int = 0, beta: float = 10.0) -> ToyNetwork:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise DomainError(f"degenerate layer dims {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ToyNetwork(tuple(weights), tuple(biases), activation, beta)


# --- forward / backward -------------------------------------------------------


def _act(net: ToyNetwork, z: np.ndarray) -> np.ndarray:
    if net.activation == "relu":
        return np.maximum(z, 0.0)
    return np.logaddexp(0.0, net.beta * z) / net.beta


def _act_grad(net: ToyNetwork, z: np.ndarray) -> np.ndarray:
    if net.activation == "relu":
        return (z > 0).astype(np.float64)
    return expit(net.beta * z)


def _as_batch(net: ToyNetwork, x) -> tuple[np.ndarray, bool]:
    if isinstance(x, ImageTensor):
        x = x.flat
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = X.reshape(1, -1) if single else X.reshape(X.shape[0], -1)
    if X.shape[1] != net.n_inputs:
        raise DomainError(f"input has {X.shape[1]} features, network expects {net.n_inputs}")
    return X, single


def _forward_cache(net: ToyNetwork, X: np.ndarray):
    """Returns (inputs to each layer, pre-activations of each layer)."""
    inputs, pre = [], []
    h = X
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        h = z if i == last else _act(net, z)
    return inputs, pre, h


def forward(net: ToyNetwork, x) -> np.ndarray:
    """Logits for one input (vector) or a batch (rows)."""
    X, single = _as_batch(net, x)
    logits = _forward_cache(net, X)[2]
    return logits[0] if single else logits


def predict(net: ToyNetwork, x) -> np.ndarray:
    return np.argmax(forward(net, x), axis=-1)


def _backward(net: ToyNetwork, inputs, pre, upstream: np.ndarray, want_params: bool = False):
    """Propagate d(objective)/d(logits) back to the input (and parameters)."""
    delta = upstream
    grads_W, grads_b = [], []
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            delta = delta * _act_grad(net, pre[i])
        if want_params:
            grads_W.append(delta.T @ inputs[i])
            grads_b.append(delta.sum(axis=0))
        delta = delta @ net.weights[i]
    if want_params:
        return delta, grads_W[::-1], grads_b[::-1]
    return delta


def input_gradients(net: ToyNetwork, X: np.ndarray, classes) -> np.ndarray:
    """Row-wise d logit[class] / d input for a batch."""
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    inputs, pre, logits = _forward_cache(net, X)
    upstream = np.zeros_like(logits)
    upstream[np.arange(len(X)), np.broadcast_to(classes, (len(X),))] = 1.0
    return _backward(net, inputs, pre, upstream)


def _check_class(net: ToyNetwork, class_index: int) -> None:
    if not 0 <= class_index < net.n_classes:
        raise DomainError(f"class index {class_index} outside [0, {net.n_classes})")


def _grid_shape(net: ToyNetwork, x, shape) -> tuple[int, int]:
    if shape is not None:
        return tuple(shape)
    if isinstance(x, ImageTensor):
        if x.channels != 1:
            raise DomainError("pass shape explicitly for multi-channel inputs")
        return (x.height, x.width)
    side = int(round(np.sqrt(net.n_inputs)))
    if side * side != net.n_inputs:
        raise DomainError("cannot infer a square grid; pass shape")
    return (side, side)


def gradient_vector(net: ToyNetwork, x, class_index: int) -> np.ndarray:
    _check_class(net, class_index)
    X, _ = _as_batch(net, x)
    return input_gradients(net, X, class_index)[0]


def grad_input(net: ToyNetwork, x, class_index: int, shape=None) -> AttributionMap:
    """Simple-gradient attribution: d logit[class] / d x on the image grid."""
    return AttributionMap(gradient_vector(net, x, class_index).reshape(_grid_shape(net, x, shape)))


def input_x_gradient(net: ToyNetwork, x, class_index: int, shape=None) -> AttributionMap:
    X, _ = _as_batch(net, x)
    g = gradient_vector(net, X[0], class_index)
    return AttributionMap((X[0] * g).reshape(_grid_shape(net, x, shape)))


def ig_vector(net: ToyNetwork, x, class_index: int, steps: int = 32, baseline=None) -> np.ndarray:
    if steps < 1:
        raise DomainError("integrated gradients needs at least one step")
    _check_class(net, class_index)
    X, _ = _as_batch(net, x)
    x0 = X[0]
    base = np.zeros_like(x0) if baseline is None else _as_batch(net, baseline)[0][0]
    alphas = (np.arange(steps) + 0.5) / steps
    path = base[None, :] + alphas[:, None] * (x0 - base)[None, :]
    grads = input_gradients(net, path, class_index)
    return (x0 - base) * grads.mean(axis=0)


def integrated_gradients(net: ToyNetwork, x, baseline=None, steps: int = 32, class_index: int = 0, shape=None) -> AttributionMap:
    """Midpoint-rule integrated gradients from ``baseline`` (default all zeros)."""
    return AttributionMap(ig_vector(net, x, class_index, steps, baseline).reshape(_grid_shape(net, x, shape)))


def hvp_fd(net: ToyNetwork, x, direction, class_index: int, r: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian-vector product of logit[class] w.r.t. the input."""
    if not r > 0:
        raise DomainError("finite-difference radius must be positive")
    X, _ = _as_batch(net, x)
    d = np.asarray(direction, dtype=np.float64).reshape(-1)
    if d.shape != (net.n_inputs,) or not np.all(np.isfinite(d)):
        raise DomainError("direction must be a finite vector matching the input")
    pair = np.stack([X[0] + r * d, X[0] - r * d])
    g = input_gradients(net, pair, class_index)
    return (g[0] - g[1]) / (2.0 * r)


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class AdversarialConfig:
    epsilon: float = 0.3
    pgd_steps: int = 40
    pgd_step_size: float = 0.01

    def __post_init__(self):
        if self.epsilon < 0 or self.pgd_steps < 1 or not self.pgd_step_size > 0:
            raise DomainError("invalid PGD settings")
        if self.pgd_step_size > self.epsilon:
            raise DomainError("PGD step size must not exceed epsilon")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    seed: int = 0
    adversarial: Optional[AdversarialConfig] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise DomainError("invalid training settings")


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(len(y)), y]))
    probs = np.exp(logits - lse[:, None])
    probs[np.arange(len(y)), y] -= 1.0
    return loss, probs / len(y)


def loss_input_gradient(net: ToyNetwork, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    inputs, pre, logits = _forward_cache(net, X)
    _, dlogits = _softmax_xent(logits, y)
    return _backward(net, inputs, pre, dlogits)


def pgd_examples(net: ToyNetwork, X: np.ndarray, y: np.ndarray, adv: AdversarialConfig) -> np.ndarray:
    """l-inf PGD on the training loss, started at the clean input."""
    lo = np.maximum(X - adv.epsilon, 0.0)
    hi = np.minimum(X + adv.epsilon, 1.0)
    Xa = X.copy()
    for _ in range(adv.pgd_steps):
        g = loss_input_gradient(net, Xa, y)
        Xa = np.clip(Xa + adv.pgd_step_size * np.sign(g), lo, hi)
    return Xa


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, DatasetManifest):
        return dataset.load_images(), dataset.labels()
    X, y = dataset
    return np.asarray(X, dtype=np.float64).reshape(len(X), -1), np.asarray(y, dtype=np.int64)


def accuracy(net: ToyNetwork, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(net, X) == y))


def train(dataset, cfg: TrainConfig, dims: Sequence[int], activation: str = "softplus",
          beta: float = 10.0, history: Optional[list] = None) -> ToyNetwork:
    """Minibatch SGD on softmax cross-entropy.

    ``dataset`` is a :class:`DatasetManifest` or an ``(X, y)`` pair. With
    ``cfg.adversarial`` set, every batch is replaced by its PGD examples before
    the update. ``history`` (if given) receives one ``(epoch, loss, accuracy)``
    tuple per epoch, with clean training accuracy.
    """
    X, y = _dataset_arrays(dataset)
    if len(X) == 0:
        raise DataError("empty training set")
    if X.shape[1] != dims[0]:
        raise DomainError(f"inputs have {X.shape[1]} features, dims start with {dims[0]}")
    if y.min() < 0 or y.max() >= dims[-1]:
        raise DataError("labels outside the output layer")
    net = init_network(dims, activation, cfg.seed, beta)
    if cfg.epochs == 0:
        return net
    Ws = [W.copy() for W in net.weights]
    bs = [b.copy() for b in net.biases]
    rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        total, seen = 0.0, 0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            current = ToyNetwork(tuple(Ws), tuple(bs), activation, beta)
            xb, yb = X[idx], y[idx]
            if cfg.adversarial is not None:
                xb = pgd_examples(current, xb, yb, cfg.adversarial)
            inputs, pre, logits = _forward_cache(current, xb)
            loss, dlogits = _softmax_xent(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}")
            _, gW, gb = _backward(current, inputs, pre, dlogits, want_params=True)
            for i in range(len(Ws)):
                Ws[i] -= cfg.learning_rate * gW[i]
                bs[i] -= cfg.learning_rate * gb[i]
            total += loss * len(idx)
            seen += len(idx)
        net = ToyNetwork(tuple(Ws), tuple(bs), activation, beta)
        acc = accuracy(net, X, y)
        log.debug("epoch %d loss %.4f acc %.4f", epoch, total / seen, acc)
        if history is not None:
            history.append((epoch, total / seen, acc))
    return net


# --- checkpoints -------------------------------------------------------------


def render_network(net: ToyNetwork) -> str:
    lines = [f"TOYNET1 {len(net.weights)} {net.activation} {format_real(net.beta)}"]
    for W, b in zip(net.weights, net.biases):
        lines.append(f"DIMS {W.shape[0]} {W.shape[1]}")
        lines += [" ".join(format_real(v) for v in row) for row in W]
        lines.append(" ".join(format_real(v) for v in b))
    return "\n".join(lines) + "\n"


def save_network(net: ToyNetwork, path) -> None:
    path = Path(path)
    try:
        path.write_text(render_network(net), encoding="ascii")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _row(lines, pos, width, path):
    if pos >= len(lines):
        raise ParseError("unexpected end of checkpoint", path, pos + 1)
    tokens = lines[pos].split()
    if len(tokens) != width:
        raise ParseError(f"expected {width} values, found {len(tokens)}", path, pos + 1)
    try:
        vals = np.array([float(t) for t in tokens])
    except ValueError:
        raise ParseError("malformed number", path, pos + 1) from None
    if not np.all(np.isfinite(vals)):
        raise ParseError("non-finite parameter", path, pos + 1)
    return vals


def parse_network(text: str, path=None) -> ToyNetwork:
    lines = text.rstrip("\n").split("\n")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "TOYNET1":
        raise ParseError("header must be 'TOYNET1 <n_layers> <activation> <beta>'", path, 1)
    try:
        n_layers, activation, beta = int(head[1]), head[2], float(head[3])
    except ValueError:
        raise ParseError("malformed header", path, 1) from None
    if activation not in ACTIVATIONS or n_layers < 1:
        raise ParseError("bad activation or layer count", path, 1)
    pos = 1
    weights, biases = [], []
    for _ in range(n_layers):
        if pos >= len(lines):
            raise ParseError("missing DIMS line", path, pos + 1)
        dims = lines[pos].split()
        try:
            if len(dims) != 3 or dims[0] != "DIMS":
                raise ValueError
            out, inp = int(dims[1]), int(dims[2])
            if out < 1 or inp < 1:
                raise ValueError
        except ValueError:
            raise ParseError("malformed DIMS line", path, pos + 1) from None
        if weights and inp != weights[-1].shape[0]:
            raise ParseError(f"DIMS input {inp} does not match previous output {weights[-1].shape[0]}", path, pos + 1)
        pos += 1
        W = np.stack([_row(lines, pos + r, inp, path) for r in range(out)])
        pos += out
        b = _row(lines, pos, out, path)
        pos += 1
        weights.append(W)
        biases.append(b)
    if pos != len(lines):
        raise ParseError("trailing content after last layer", path, pos + 1)
    try:
        return ToyNetwork(tuple(weights), tuple(biases), activation, beta)
    except DomainError as exc:
        raise ParseError(str(exc), path) from exc


def load_network(path) -> ToyNetwork:
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_network(text, path)
