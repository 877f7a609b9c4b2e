"""Small dense numeric kernels: linear layers, softmax cross-entropy, SGD,
seeded RNG and a central-difference gradient oracle.

Matrices are plain ``numpy.float64`` arrays in C (row-major) order. Every
function here is pure over caller-owned buffers except the explicit in-place
updaters (``linear_backward`` accumulates into grad buffers, ``sgd_step``
writes into the parameter arrays).

The random generator is numpy's PCG64 (128-bit state permuted congruential
generator, XSL-RR output). Its stream is fixed by numpy's stability policy
for ``Generator`` bit streams, so a seed reproduces the same numbers on every
platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator for an unsigned 64-bit seed."""
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child generators, e.g. one per sub-module."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def as_tensor2(x, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


@dataclass
class LinearLayer:
    """Affine map ``y = x W^T + b`` with gradient buffers of matching shape."""

    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "LinearLayer":
        # uniform(-1/sqrt(in), 1/sqrt(in)) for both weight and bias
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        b = rng.uniform(-bound, bound, size=out_dim)
        return cls(w, b)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int) -> "LinearLayer":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))

    def zero_grad(self) -> None:
        self.grad_weight.fill(0.0)
        self.grad_bias.fill(0.0)

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


def linear_forward(layer: LinearLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    squeeze = x.ndim == 1
    x2 = x.reshape(1, -1) if squeeze else x
    if x2.ndim != 2 or x2.shape[1] != layer.in_dim:
        raise ShapeError(f"input has {x2.shape[-1]} columns, layer expects {layer.in_dim}")
    y = x2 @ layer.weight.T + layer.bias
    return y[0] if squeeze else y


def linear_backward(layer: LinearLayer, x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients into the layer and return dL/dx."""
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_y)
    if g2.shape != (x2.shape[0], layer.out_dim):
        raise ShapeError(f"grad_y shape {g2.shape} does not match output")
    layer.grad_weight += g2.T @ x2
    layer.grad_bias += g2.sum(axis=0)
    gx = g2 @ layer.weight
    return gx[0] if np.ndim(x) == 1 else gx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    flat = x.reshape(-1)
    # split on sign so exp never overflows
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(x.shape)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector against a class index.

    Returns ``(loss, dloss/dlogits)``; the gradient is ``softmax - onehot``.
    """
    z = np.asarray(logits, dtype=DTYPE).reshape(-1)
    if z.size == 0:
        raise DomainError("softmax_ce over an empty class set")
    if not 0 <= target < z.size:
        raise DomainError(f"target {target} outside class set of size {z.size}")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    logp = log_softmax(z)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad


def softmax_ce_batch(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows; gradient is already divided by the batch size."""
    z = np.asarray(logits, dtype=DTYPE)
    if z.ndim != 2 or z.shape[1] == 0:
        raise DomainError("softmax_ce_batch needs a non-empty (B, C) logit matrix")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (z.shape[0],):
        raise ShapeError(f"targets shape {t.shape} vs logits {z.shape}")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise DomainError("target index outside class set")
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    losses = -logp[rows, t]
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    b = max(z.shape[0], 1)
    return float(losses.sum() / b), grad / b


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float):
    """In-place ``p -= lr * g`` for matching parameter/gradient pairs."""
    if lr < 0:
        raise DomainError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"param shape {np.shape(p)} vs grad shape {np.shape(g)}")
        p -= lr * g
    return params


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise DomainError("finite-difference step must be positive")
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite around coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
