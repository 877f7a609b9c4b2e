"""Generalization branch: a linear feature-to-attribute predictor trained with
attribute-compatibility cross-entropy, then refined by one-step episodic
meta-learning (first- or second-order).

Compatibility logits are ``a^T phi(c)`` over a class set; cross-entropy
normalizes over all seen classes, inside episodes too.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataforge import AttributeTable, Episode, FeatureDataset
from .errors import ConfigError, DomainError, SamplingError, ShapeError
from .numkit import (LinearLayer, linear_forward, log_softmax, softmax, softmax_ce,
                     softmax_ce_batch)


class MetaOrder(str, enum.Enum):
    FIRST = "FirstOrder"
    SECOND = "SecondOrder"


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-3
    beta: float = 1e-3
    tasks_per_episode: int = 4
    episodes: int = 200
    order: MetaOrder = MetaOrder.FIRST

    def __post_init__(self):
        object.__setattr__(self, "order", MetaOrder(self.order))
        # alpha == 0 is allowed: the inner step becomes the identity
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"need alpha >= 0 and beta >= 0, got {self.alpha}, {self.beta}")
        if self.tasks_per_episode < 1 or self.episodes < 0:
            raise ConfigError("tasks_per_episode must be >= 1 and episodes >= 0")


@dataclass
class GNetParams:
    f_g: LinearLayer  # K -> d

    @classmethod
    def init(cls, K: int, d: int, rng: np.random.Generator) -> "GNetParams":
        return cls(LinearLayer.init(K, d, rng))

    def copy(self) -> "GNetParams":
        return GNetParams(self.f_g.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.f_g.weight.ravel(), self.f_g.bias])

    def with_flat(self, theta: np.ndarray) -> "GNetParams":
        d, k = self.f_g.weight.shape
        return GNetParams(LinearLayer(theta[: d * k].reshape(d, k), theta[d * k:]))


def gnet_forward(p: GNetParams, e_g) -> np.ndarray:
    return linear_forward(p.f_g, e_g)


def _class_positions(y, class_set) -> np.ndarray:
    class_set = np.asarray(class_set, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    pos = np.searchsorted(class_set, y)
    pos = np.clip(pos, 0, class_set.size - 1)
    if class_set.size == 0 or np.any(class_set[pos] != y):
        raise DomainError("label outside the class set")
    return pos


def loss_g(a_g, y: int, attrs: AttributeTable, class_set) -> tuple[float, np.ndarray]:
    """Cross-entropy of compatibility logits for one prediction.

    Returns the loss and its gradient with respect to ``a_g``.
    """
    class_set = np.sort(np.asarray(class_set, dtype=np.int64))
    if class_set.size == 0:
        raise DomainError("empty class set")
    a_g = np.asarray(a_g, dtype=np.float64)
    phi = attrs.phi(class_set)
    if a_g.shape != (phi.shape[1],):
        raise ShapeError(f"a_g has shape {a_g.shape}, attributes have d={phi.shape[1]}")
    target = int(_class_positions([y], class_set)[0])
    loss, g_logits = softmax_ce(phi @ a_g, target)
    return loss, g_logits @ phi


# Batched loss/grad/HVP over the flat parameter vector theta = [W.ravel(), b].
# ``phi`` is the (C, d) attribute matrix of the class set, ``t`` target positions.


def _unpack(theta: np.ndarray, d: int, k: int):
    return theta[: d * k].reshape(d, k), theta[d * k:]


def batch_loss_grad(theta, x, t, phi) -> tuple[float, np.ndarray]:
    d, k = phi.shape[1], x.shape[1]
    w, b = _unpack(theta, d, k)
    a = x @ w.T + b
    loss, g = softmax_ce_batch(a @ phi.T, t)
    da = g @ phi
    return loss, np.concatenate([(da.T @ x).ravel(), da.sum(axis=0)])


def batch_hvp(theta, x, t, phi, v) -> np.ndarray:
    """Hessian of the mean cross-entropy at ``theta`` applied to ``v``."""
    d, k = phi.shape[1], x.shape[1]
    w, b = _unpack(theta, d, k)
    vw, vb = _unpack(v, d, k)
    p = softmax((x @ w.T + b) @ phi.T)
    dz = (x @ vw.T + vb) @ phi.T
    dg = (p * dz - p * (p * dz).sum(axis=1, keepdims=True)) / x.shape[0]
    dda = dg @ phi
    return np.concatenate([(dda.T @ x).ravel(), dda.sum(axis=0)])


GradFn = Callable[[np.ndarray, object], tuple]
HvpFn = Callable[[np.ndarray, object, np.ndarray], np.ndarray]


def meta_gradient(theta: np.ndarray, tasks: Sequence[tuple[object, object]], alpha: float,
                  order: MetaOrder, grad_fn: GradFn, hvp_fn: HvpFn | None = None) -> np.ndarray:
    """Sum over tasks of the outer-objective gradient after one inner step.

    ``tasks`` holds ``(train_data, val_data)`` pairs understood by
    ``grad_fn(theta, data) -> (loss, grad)``. Second order needs
    ``hvp_fn(theta, data, v)`` for the inner-loss Hessian; the result per task
    is ``(I - alpha * H_tr(theta)) @ grad_val(theta')``.
    """
    order = MetaOrder(order)
    total = np.zeros_like(theta)
    for tr, val in tasks:  # fixed order keeps the sum deterministic
        _, g_tr = grad_fn(theta, tr)
        adapted = theta - alpha * g_tr
        _, g_val = grad_fn(adapted, val)
        if order is MetaOrder.SECOND:
            if hvp_fn is None:
                raise ConfigError("second-order meta-gradient needs an hvp_fn")
            g_val = g_val - alpha * hvp_fn(theta, tr, g_val)
        total += g_val
    return total


def _episode_tasks(tasks: Sequence[Episode], phi, class_set):
    out = []
    for ep in tasks:
        if ep.tr_y.size == 0 or ep.val_y.size == 0:
            raise SamplingError("episode with an empty train or validation set")
        out.append(((ep.tr_x, _class_positions(ep.tr_y, class_set), phi),
                    (ep.val_x, _class_positions(ep.val_y, class_set), phi)))
    return out


def _grad(theta, data):
    return batch_loss_grad(theta, *data)


def _hvp(theta, data, v):
    return batch_hvp(theta, *data, v)


def outer_objective(p: GNetParams, tasks: Sequence[Episode], alpha: float,
                    attrs: AttributeTable, class_set) -> float:
    """Summed validation loss after one inner step; what the meta step minimizes."""
    class_set = np.sort(np.asarray(class_set, dtype=np.int64))
    theta = p.flat()
    total = 0.0
    for tr, val in _episode_tasks(tasks, attrs.phi(class_set), class_set):
        _, g = _grad(theta, tr)
        total += _grad(theta - alpha * g, val)[0]
    return total


def episode_meta_gradient(p: GNetParams, tasks: Sequence[Episode], cfg: MetaConfig,
                          attrs: AttributeTable, class_set) -> np.ndarray:
    if not tasks:
        raise SamplingError("meta episode needs at least one task")
    class_set = np.sort(np.asarray(class_set, dtype=np.int64))
    packed = _episode_tasks(tasks, attrs.phi(class_set), class_set)
    return meta_gradient(p.flat(), packed, cfg.alpha, cfg.order, _grad, _hvp)


def meta_episode(p: GNetParams, tasks: Sequence[Episode], cfg: MetaConfig,
                 attrs: AttributeTable, class_set) -> GNetParams:
    """One outer update ``theta <- theta - beta * sum_j g_j``; returns new params."""
    g = episode_meta_gradient(p, tasks, cfg, attrs, class_set)
    return p.with_flat(p.flat() - cfg.beta * g)


def pretrain_gnet(p: GNetParams, ds: FeatureDataset, attrs: AttributeTable, epochs: int,
                  lr: float, rng: np.random.Generator,
                  batch_size: int = 16) -> tuple[GNetParams, list[float]]:
    """Minibatch SGD on the compatibility loss over seen training instances.

    The trace holds, per epoch, the mean of the per-instance losses seen
    during that epoch (accumulated in instance order, so it is exact for lr=0).
    """
    train_idx = ds.split.train_idx
    if train_idx.size == 0:
        raise ConfigError("empty training split")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    class_set = np.array(ds.split.seen, dtype=np.int64)
    phi = attrs.phi(class_set)
    x_all, y_all = ds.subset(train_idx)
    t_all = _class_positions(y_all, class_set)
    theta = p.flat()
    trace = []
    for _ in range(epochs):
        order = rng.permutation(train_idx.size)
        per_inst = np.empty(train_idx.size)
        for start in range(0, order.size, batch_size):
            sel = order[start:start + batch_size]
            per_inst[sel] = _per_instance_losses(theta, x_all[sel], t_all[sel], phi)
            _, g = batch_loss_grad(theta, x_all[sel], t_all[sel], phi)
            theta = theta - lr * g
        trace.append(float(per_inst.mean()))
    return p.with_flat(theta), trace


def _per_instance_losses(theta, x, t, phi) -> np.ndarray:
    d, k = phi.shape[1], x.shape[1]
    w, b = _unpack(theta, d, k)
    logp = log_softmax((x @ w.T + b) @ phi.T)
    return -logp[np.arange(t.size), t]
