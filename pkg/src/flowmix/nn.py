"""Dense networks, tempered softmax, cross-entropy and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param
from .errors import ContractError, DomainError, ShapeError


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class MLP:
    """Affine layers with tanh between them and a linear output.

    ``masks`` (one 0/1 array per affine layer, shaped like its weight) turns
    this into a MADE network; ``zero_last`` zero-initializes the output layer.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, name: str = "mlp",
                 zero_last: bool = False, masks: Sequence[np.ndarray] | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ShapeError("mlp", tuple(widths), detail="need >=2 positive widths")
        if masks is not None and len(masks) != len(widths) - 1:
            raise ContractError("one mask per affine layer required")
        self.widths = widths
        self.name = name
        self.weights: list[Param] = []
        self.biases: list[Param] = []
        self.masks = None if masks is None else [np.asarray(m, dtype=np.float64) for m in masks]
        n_layers = len(widths) - 1
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            if zero_last and i == n_layers - 1:
                w, b = np.zeros((fi, fo)), np.zeros(fo)
            else:
                # nonzero biases keep hidden units from all crossing zero at the origin
                w = glorot_uniform(rng, fi, fo)
                b = rng.uniform(-1.0, 1.0, size=fo) / np.sqrt(fi)
            if self.masks is not None and self.masks[i].shape != (fi, fo):
                raise ShapeError("mlp mask", self.masks[i].shape, (fi, fo))
            self.weights.append(Param(w, f"{name}.W{i}"))
            self.biases.append(Param(b, f"{name}.b{i}"))

    @property
    def params(self) -> list[Param]:
        out: list[Param] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(w * v + v for w, v in zip(self.widths[:-1], self.widths[1:]))

    def __call__(self, x) -> Node:
        x = ad.as_node(x)
        if x.value.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"{self.name} forward", x.shape, detail=f"expected width {self.widths[0]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            weight = w if self.masks is None else w * self.masks[i]
            h = h @ weight + b
            if i < last:
                h = ad.tanh(h)
        return h


def log_softmax_with_temperature(logits, temperature: float) -> Node:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = ad.as_node(logits) * (1.0 / temperature)
    return z - ad.logsumexp(z, axis=1, keepdims=True)


def softmax_with_temperature(logits, temperature: float) -> Node:
    """Row-wise softmax of ``logits / temperature``."""
    return ad.exp(log_softmax_with_temperature(logits, temperature))


def cross_entropy(probs, labels) -> Node:
    """Mean of -log probs[i, labels[i]], with probabilities clamped at 1e-12."""
    probs = ad.as_node(probs)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError("cross_entropy", probs.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: label outside [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum(probs * onehot, axis=1)
    return -ad.mean(ad.log(ad.maximum(picked, 1e-12)))


@dataclass
class Adam:
    """Adam with bias correction and decoupled weight decay.

    Weight decay shrinks each updated parameter by ``lr * weight_decay * theta``
    before the moment-based step. Only parameters present in the gradient map
    passed to :meth:`step` are touched.
    """

    params: Iterable[Param]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.params = {p.name: p for p in self.params}
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.value))
            self.v.setdefault(name, np.zeros_like(p.value))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        missing = [k for k in grads if k not in self.params]
        if missing:
            raise ContractError(f"adam_step: unknown parameters {missing[:3]}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.value -= self.lr * self.weight_decay * p.value
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"])
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam.m.{name}"])
            self.v[name] = np.array(arrays[f"adam.v.{name}"])


def adam_step(state: Adam, grads: dict[str, np.ndarray]) -> Adam:
    state.step(grads)
    return state
