"""Per-frame two-layer perceptron trained with Adam.

Maps one normalized difference frame (flattened ``H*W*C`` vector) to one
sample of the pulse-derivative target: ``affine -> tanh -> affine``. A
training window is a block of consecutive frames scored with mean squared
error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .synth import FrameSequence, make_rng

EPS_DIV = 1e-7
WINDOW = 20
HIDDEN = 16


class NumericalOverflowError(FloatingPointError):
    """Training produced a non-finite loss, gradient, or parameter."""


@dataclass(frozen=True)
class Layer:
    name: str
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class ModelParams:
    """Ordered layers; treated as an immutable value."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for layer in self.layers:
            yield f"{layer.name}.weight", layer.weight
            yield f"{layer.name}.bias", layer.bias

    def map(self, fn) -> "ModelParams":
        """Apply ``fn(weight_or_bias) -> array`` to every tensor."""
        return ModelParams(tuple(Layer(l.name, fn(l.weight), fn(l.bias)) for l in self.layers))

    def zip_map(self, other: "ModelParams", fn) -> "ModelParams":
        check_congruent(self, other)
        return ModelParams(tuple(
            Layer(a.name, fn(a.weight, b.weight), fn(a.bias, b.bias))
            for a, b in zip(self.layers, other.layers)
        ))

    def copy(self) -> "ModelParams":
        return self.map(np.array)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for _, t in self.tensors())

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact equality, including layer names and shapes."""
        if len(self.layers) != len(other.layers):
            return False
        for (na, a), (nb, b) in zip(self.tensors(), other.tensors()):
            if na != nb or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


# Gradients share the parameter structure.
GradientSet = ModelParams


def check_congruent(a: ModelParams, b: ModelParams) -> None:
    if len(a.layers) != len(b.layers):
        raise ValueError(f"layer count mismatch: {len(a.layers)} vs {len(b.layers)}")
    for la, lb in zip(a.layers, b.layers):
        if la.name != lb.name:
            raise ValueError(f"layer name mismatch: {la.name!r} vs {lb.name!r}")
        if la.weight.shape != lb.weight.shape or la.bias.shape != lb.bias.shape:
            raise ValueError(f"shape mismatch in layer {la.name!r}")


def init_params(input_dim: int, hidden: int = HIDDEN, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = make_rng(seed, 7)

    def glorot(fan_out, fan_in):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    return ModelParams((
        Layer("hidden", glorot(hidden, input_dim), np.zeros(hidden)),
        Layer("output", glorot(1, hidden), np.zeros(1)),
    ))


def zeros_like(params: ModelParams) -> ModelParams:
    return params.map(np.zeros_like)


def make_difference_frames(frames: FrameSequence) -> np.ndarray:
    """Normalized difference frames, ``(T-1) x (H*W*C)``.

    ``d(t) = (I(t+1) - I(t)) / (I(t+1) + I(t) + 1e-7)``, then divided by the
    standard deviation over the whole sequence.
    """
    x = frames.frames.astype(np.float64)
    d = (x[1:] - x[:-1]) / (x[1:] + x[:-1] + EPS_DIV)
    d = d.reshape(d.shape[0], -1)
    std = d.std()
    if std > 0:
        d = d / std
    return d


def _check_input(params: ModelParams, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"input shape {x.shape} incompatible with input dim {params.input_dim}")


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Predictions for each row of ``x`` (frames x features)."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    hidden, out = params.layers
    h = np.tanh(x @ hidden.weight.T + hidden.bias)
    return (h @ out.weight.T + out.bias)[:, 0]


def loss_and_grad(params: ModelParams, x: np.ndarray, target: np.ndarray) -> tuple[float, GradientSet]:
    """Mean squared error over the window and its gradient by backprop."""
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_input(params, x)
    if target.shape != (x.shape[0],):
        raise ValueError(f"target shape {target.shape} does not match {x.shape[0]} frames")
    hidden, out = params.layers
    n = x.shape[0]

    with np.errstate(over="ignore", invalid="ignore"):
        h = np.tanh(x @ hidden.weight.T + hidden.bias)
        pred = h @ out.weight[0] + out.bias[0]
        err = pred - target
        loss = float(err @ err) / n

        g_pred = (2.0 / n) * err
        g_w2 = g_pred @ h
        g_b2 = g_pred.sum()
        g_pre = np.outer(g_pred, out.weight[0]) * (1.0 - h * h)
        g_w1 = g_pre.T @ x
        g_b1 = g_pre.sum(axis=0)

    grads = ModelParams((
        Layer(hidden.name, g_w1, g_b1),
        Layer(out.name, g_w2[None, :], np.array([g_b2])),
    ))
    if not math.isfinite(loss) or not grads.is_finite():
        raise NumericalOverflowError("numerical overflow in training")
    return loss, grads


@dataclass
class AdamState:
    first: ModelParams
    second: ModelParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, lr: float = 1e-3) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), 0, lr)


def adam_step(params: ModelParams, grads: GradientSet, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    check_congruent(params, grads)
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    first = state.first.zip_map(grads, lambda m, g: b1 * m + (1.0 - b1) * g)
    second = state.second.zip_map(grads, lambda v, g: b2 * v + (1.0 - b2) * g * g)
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    lr, eps = state.lr, state.eps

    new_layers = []
    for p, m, v in zip(params.layers, first.layers, second.layers):
        w = p.weight - lr * (m.weight / c1) / (np.sqrt(v.weight / c2) + eps)
        b = p.bias - lr * (m.bias / c1) / (np.sqrt(v.bias / c2) + eps)
        new_layers.append(Layer(p.name, w, b))
    new_params = ModelParams(tuple(new_layers))
    if not new_params.is_finite():
        raise NumericalOverflowError("numerical overflow in training")
    return new_params, AdamState(first, second, step, lr, b1, b2, state.eps)


class FlatTrainer:
    """Adam training on a single contiguous parameter buffer.

    Performs the same arithmetic as :func:`loss_and_grad` followed by
    :func:`adam_step`, without per-step allocation of parameter objects.
    """

    def __init__(self, params: ModelParams, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if [l.name for l in params.layers] != ["hidden", "output"]:
            raise ValueError("FlatTrainer expects a hidden/output two-layer model")
        self.names = [l.name for l in params.layers]
        self.shapes = [(t.shape) for _, t in params.tensors()]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.theta = np.concatenate([t.ravel() for _, t in params.tensors()]).astype(np.float64)
        self.grad = np.zeros_like(self.theta)
        self.m = np.zeros_like(self.theta)
        self.v = np.zeros_like(self.theta)
        self.step = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._p = self._views(self.theta)
        self._g = self._views(self.grad)

    def _views(self, buf: np.ndarray) -> list[np.ndarray]:
        return [buf[a:b].reshape(s) for a, b, s in zip(self.offsets[:-1], self.offsets[1:], self.shapes)]

    def train_step(self, x: np.ndarray, target: np.ndarray) -> float:
        w1, b1, w2, b2 = self._p
        gw1, gb1, gw2, gb2 = self._g
        n = x.shape[0]
        with np.errstate(over="ignore", invalid="ignore"):
            h = np.tanh(x @ w1.T + b1)
            err = h @ w2[0] + b2[0] - target
            loss = float(err @ err) / n
            g_pred = (2.0 / n) * err
            gw2[0] = g_pred @ h
            gb2[0] = g_pred.sum()
            g_pre = np.outer(g_pred, w2[0]) * (1.0 - h * h)
            np.matmul(g_pre.T, x, out=gw1)
            gb1[:] = g_pre.sum(axis=0)
        if not (math.isfinite(loss) and np.isfinite(self.grad).all()):
            raise NumericalOverflowError("numerical overflow in training")
        g = self.grad
        self.step += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        self.theta -= self.lr * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)
        if not np.isfinite(self.theta).all():
            raise NumericalOverflowError("numerical overflow in training")
        return loss

    def params(self) -> ModelParams:
        t = [v.copy() for v in self._p]
        return ModelParams(tuple(Layer(name, t[2 * i], t[2 * i + 1]) for i, name in enumerate(self.names)))


@dataclass(frozen=True)
class TrainingWindow:
    inputs: np.ndarray
    target: np.ndarray


def make_windows(inputs: np.ndarray, target: np.ndarray, size: int = WINDOW) -> list[TrainingWindow]:
    """Non-overlapping windows of ``size`` frames; the remainder is dropped."""
    if inputs.shape[0] != target.shape[0]:
        raise ValueError(f"{inputs.shape[0]} input frames vs {target.shape[0]} targets")
    n = inputs.shape[0] // size
    return [TrainingWindow(inputs[i * size:(i + 1) * size], target[i * size:(i + 1) * size]) for i in range(n)]
