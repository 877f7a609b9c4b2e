"""Balanced specialization branch.

N sub-modules each map the shared feature through a rectified tail layer,
reweight its channels with instance-level weights ``w_t`` produced from the
tail output and the generalized feature, and scale the result by a
dataset-level gate ``sigmoid(s * w_d)``. The gated embeddings are
concatenated and projected to attribute space by a two-layer fusion head.

The diversity loss pushes, per channel, every weight but the largest towards
0 and the largest towards 1, using a per-channel margin that moves from the
channel mean to just below the channel maximum as epochs advance. Margins are
constants for differentiation.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dataforge import AttributeTable
from .errors import DomainError, ShapeError
from .numkit import (LinearLayer, linear_backward, linear_forward, make_rng, relu, sgd_step,
                     sigmoid, softmax_ce_batch, spawn_rngs)

DEFAULT_EPSILON = 1e-6


class Mode(str, enum.Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass
class BSNSubModule:
    tail: LinearLayer  # K -> K, followed by relu
    balance: LinearLayer  # 2K -> K, followed by sigmoid

    @classmethod
    def init(cls, K: int, rng: np.random.Generator) -> "BSNSubModule":
        return cls(LinearLayer.init(K, K, rng), LinearLayer.init(2 * K, K, rng))

    def layers(self) -> list[LinearLayer]:
        return [self.tail, self.balance]


@dataclass
class DatasetGates:
    w_d: np.ndarray
    s_max: float = 5.0
    eph_max: int = 100
    grad_w_d: np.ndarray = field(init=False)

    def __post_init__(self):
        self.w_d = np.asarray(self.w_d, dtype=np.float64).reshape(-1)
        if not self.s_max > 1:
            raise DomainError(f"s_max must exceed 1, got {self.s_max}")
        if self.eph_max < 2:
            raise DomainError(f"eph_max must be >= 2, got {self.eph_max}")
        self.grad_w_d = np.zeros_like(self.w_d)

    def values(self, s: float) -> np.ndarray:
        return sigmoid(s * self.w_d)

    def active_count(self) -> int:
        """Sub-modules whose gate exceeds 0.5 at inference sharpness."""
        return int(np.count_nonzero(self.values(self.s_max) > 0.5))

    def pruned_count(self) -> int:
        return self.w_d.size - self.active_count()


@dataclass
class FusionHead:
    layer1: LinearLayer  # N*K -> K
    layer2: LinearLayer  # K -> d
    dropout_rate: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DomainError("dropout_rate must lie in [0, 1)")


@dataclass
class BSNet:
    subs: list[BSNSubModule]
    gates: DatasetGates
    head: FusionHead
    epsilon: float = DEFAULT_EPSILON

    @property
    def N(self) -> int:
        return len(self.subs)

    @property
    def K(self) -> int:
        return self.subs[0].tail.in_dim

    @property
    def d(self) -> int:
        return self.head.layer2.out_dim

    @classmethod
    def init(cls, N: int, K: int, d: int, seed: int, s_max: float = 5.0, eph_max: int = 100,
             dropout_rate: float = 0.4, epsilon: float = DEFAULT_EPSILON) -> "BSNet":
        # one child stream per sub-module so their balance generators start apart
        rngs = spawn_rngs(seed, N + 1)
        subs = [BSNSubModule.init(K, r) for r in rngs[:N]]
        rng = rngs[N]
        gates = DatasetGates(rng.uniform(0.0, 1.0, size=N), s_max, eph_max)
        head = FusionHead(LinearLayer.init(N * K, K, rng), LinearLayer.init(K, d, rng),
                          dropout_rate)
        return cls(subs, gates, head, epsilon)

    def layers(self) -> list[LinearLayer]:
        out = []
        for m in self.subs:
            out.extend(m.layers())
        return out + [self.head.layer1, self.head.layer2]

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()
        self.gates.grad_w_d.fill(0.0)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.extend(layer.params())
        return out + [self.gates.w_d]

    def grads(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.extend(layer.grads())
        return out + [self.gates.grad_w_d]


# ----------------------------------------------------------------- sub-module


def bsn_forward(m: BSNSubModule, e_shared, e_g, bypass: bool = False):
    """Returns ``(e_l, w_t, e_t)``; ``bypass`` forces ``w_t`` to all ones."""
    e_shared = np.asarray(e_shared, dtype=np.float64)
    e_g = np.asarray(e_g, dtype=np.float64)
    if e_shared.shape != e_g.shape or e_shared.shape[-1] != m.tail.in_dim:
        raise ShapeError(f"e_shared {e_shared.shape} / e_g {e_g.shape} vs K={m.tail.in_dim}")
    e_l = relu(linear_forward(m.tail, e_shared))
    if bypass:
        w_t = np.ones_like(e_l)
    else:
        w_t = sigmoid(linear_forward(m.balance, np.concatenate([e_l, e_g], axis=-1)))
    return e_l, w_t, w_t * e_l


# --------------------------------------------------------------------- margin


class Margin(NamedTuple):
    value: float
    degenerate: bool


def channel_margins(W: np.ndarray, eph: int, epsilon: float = DEFAULT_EPSILON):
    """Margins for every channel of ``W`` (sub-modules on axis -2).

    Returns ``(margins, valid)``; channels whose spread is at most
    ``epsilon`` are invalid and carry NaN.
    """
    W = np.asarray(W, dtype=np.float64)
    if eph < 1:
        raise DomainError(f"epoch index must be >= 1, got {eph}")
    mean = W.mean(axis=-2)
    wmax = W.max(axis=-2)
    lower = np.where(mean + epsilon < wmax, mean + epsilon, mean)
    upper = (1.0 - 1.0 / (1.0 + eph)) * wmax
    valid = (wmax - W.min(axis=-2)) > epsilon
    return np.where(valid, np.maximum(lower, upper), np.nan), valid


def compute_margin(channel_weights, eph: int, epsilon: float = DEFAULT_EPSILON) -> Margin:
    w = np.asarray(channel_weights, dtype=np.float64).reshape(-1, 1)
    if w.shape[0] < 2:
        raise DomainError("a margin needs at least two sub-modules")
    mrg, valid = channel_margins(w, eph, epsilon)
    return Margin(float(mrg[0]), not bool(valid[0]))


# ------------------------------------------------------------- diversity loss


def diversity_loss(W, eph: int, epsilon: float = DEFAULT_EPSILON, margins=None):
    """Diversity loss with closed-form gradients.

    ``W`` is ``(N, K)`` or a batch ``(B, N, K)``. The loss is summed over
    channels and sub-modules and averaged over the batch; the gradient is of
    that reduced value. ``margins`` (shape ``(K,)`` or ``(B, K)``) overrides
    the self-calculated margins. Returns ``(loss, grad, margins)`` with NaN
    margins on excluded (degenerate) channels.

    Per channel, with ``w_max`` the largest weight (lowest index on ties)
    and ``w_2`` the runner-up:

    * other weights:  ``w_max - mrg``
    * runner-up:      ``2 * (w_max - mrg)``
    * largest:        ``sum(others) + w_2 - N * mrg``
    """
    W = np.asarray(W, dtype=np.float64)
    batched = W.ndim == 3
    W3 = W if batched else W[None]
    if W3.ndim != 3 or W3.shape[1] < 2:
        raise ShapeError(f"need (N, K) or (B, N, K) with N >= 2, got {W.shape}")
    B, N, _ = W3.shape

    mrg, valid = channel_margins(W3, eph, epsilon)
    if margins is not None:
        mrg = np.where(valid, np.broadcast_to(np.asarray(margins, dtype=np.float64), mrg.shape),
                       np.nan)
    m = np.where(valid, mrg, 0.0)[:, None, :]

    order = np.argsort(-W3, axis=1, kind="stable")
    top = order[:, :1, :]
    second = order[:, 1:2, :]
    wmax = np.take_along_axis(W3, top, axis=1)
    wsec = np.take_along_axis(W3, second, axis=1)

    others_max = np.broadcast_to(wmax, W3.shape).copy()
    np.put_along_axis(others_max, top, wsec, axis=1)
    terms = W3 * others_max - m * (W3 + others_max)
    mask = valid[:, None, :]
    loss = float(np.where(mask, terms, 0.0).sum() / B)

    grad = np.broadcast_to(wmax - m, W3.shape).copy()
    np.put_along_axis(grad, second, 2.0 * (wmax - m), axis=1)
    g_top = W3.sum(axis=1, keepdims=True) - wmax + wsec - N * m
    np.put_along_axis(grad, top, g_top, axis=1)
    grad = np.where(mask, grad, 0.0) / B

    if not batched:
        return loss, grad[0], mrg[0]
    return loss, grad, mrg


def winner_take_all(N: int = 4, K: int = 8, steps: int = 500, lr: float = 0.05,
                    eph_max: int = 50, seed: int = 42, parametrization: str = "weights",
                    epsilon: float = DEFAULT_EPSILON, clip: float = 1e-6) -> np.ndarray:
    """Gradient descent on the diversity loss alone, with free weights.

    The epoch index advances evenly from 1 to ``eph_max`` across ``steps``.
    ``parametrization="weights"`` steps the weights directly and clips them
    back into ``[clip, 1 - clip]``; ``"logits"`` steps sigmoid logits with
    the chain rule. Initial weights are uniform(0.05, 0.95).
    """
    rng = make_rng(seed)
    W = rng.uniform(0.05, 0.95, size=(N, K))
    Z = np.log(W / (1.0 - W))
    for step in range(steps):
        eph = 1 + (step * eph_max) // steps
        if parametrization == "weights":
            _, g, _ = diversity_loss(W, eph, epsilon)
            W = np.clip(W - lr * g, clip, 1.0 - clip)
        elif parametrization == "logits":
            _, g, _ = diversity_loss(W, eph, epsilon)
            Z = Z - lr * g * W * (1.0 - W)
            W = sigmoid(Z)
        else:
            raise DomainError(f"unknown parametrization {parametrization!r}")
    return W


# -------------------------------------------------------------------- gating


def anneal_s(eph: int, gates: DatasetGates) -> float:
    """Linear sharpness schedule from ``1/s_max`` at epoch 1 to ``s_max`` at ``eph_max``."""
    return anneal_value(eph, gates.s_max, gates.eph_max)


def anneal_value(eph: int, s_max: float, eph_max: int) -> float:
    if eph_max < 2:
        raise DomainError("eph_max must be >= 2")
    if not 1 <= eph <= eph_max:
        raise DomainError(f"epoch {eph} outside [1, {eph_max}]")
    if eph == eph_max:
        return float(s_max)
    lo = 1.0 / s_max
    return lo + (s_max - lo) * (eph - 1) / (eph_max - 1)


def apply_gate(e_t, w_d_i: float, s: float) -> np.ndarray:
    if s <= 0:
        raise DomainError("gate sharpness must be positive")
    return float(sigmoid(np.float64(s * w_d_i))) * np.asarray(e_t, dtype=np.float64)


# ----------------------------------------------------------- full forward/back


@dataclass
class _Cache:
    x: np.ndarray
    e_g: np.ndarray
    s: float
    bypass: bool
    e_l: list
    w_t: list
    e_t: list
    pre_tail: list
    balance_in: list
    gates: np.ndarray
    e_s: np.ndarray
    h1: np.ndarray
    drop_scale: np.ndarray | None


def _forward(net: BSNet, e_shared, e_g, s: float, mode: Mode, rng, bypass: bool):
    x = np.atleast_2d(np.asarray(e_shared, dtype=np.float64))
    g = np.atleast_2d(np.asarray(e_g, dtype=np.float64))
    if x.shape != g.shape or x.shape[1] != net.K:
        raise ShapeError(f"inputs {x.shape}/{g.shape} do not match K={net.K}")
    gates = net.gates.values(s)
    e_l, w_t, e_t, pre, bal_in, blocks = [], [], [], [], [], []
    for i, m in enumerate(net.subs):
        h = linear_forward(m.tail, x)
        el = relu(h)
        if bypass:
            wt = np.ones_like(el)
            bin_ = None
        else:
            bin_ = np.concatenate([el, g], axis=1)
            wt = sigmoid(linear_forward(m.balance, bin_))
        et = wt * el
        pre.append(h)
        bal_in.append(bin_)
        e_l.append(el)
        w_t.append(wt)
        e_t.append(et)
        blocks.append(gates[i] * et)
    e_s = np.concatenate(blocks, axis=1)
    h1 = linear_forward(net.head.layer1, e_s)
    a = linear_forward(net.head.layer2, h1)
    scale = None
    if Mode(mode) is Mode.TRAIN and net.head.dropout_rate > 0:
        if rng is None:
            raise DomainError("train mode with dropout needs an rng")
        keep = rng.random(a.shape) >= net.head.dropout_rate
        scale = keep / (1.0 - net.head.dropout_rate)
        a = a * scale
    cache = _Cache(x, g, s, bypass, e_l, w_t, e_t, pre, bal_in, gates, e_s, h1, scale)
    return a, np.stack(w_t, axis=1), cache


def gate_sharpness(net: BSNet, eph: int, mode: Mode) -> float:
    return net.gates.s_max if Mode(mode) is Mode.INFER else anneal_s(eph, net.gates)


def bsnet_forward(net: BSNet, e_shared, e_g, eph: int = 1, mode: Mode = Mode.INFER,
                  rng: np.random.Generator | None = None, bypass: bool = False,
                  s: float | None = None):
    """Returns ``(a_s, W)`` with ``W`` of shape ``(B, N, K)`` (or ``(N, K)``
    for a single input). ``s`` overrides the mode-derived gate sharpness."""
    s = gate_sharpness(net, eph, mode) if s is None else s
    a, W, _ = _forward(net, e_shared, e_g, s, mode, rng, bypass)
    if np.ndim(e_shared) == 1:
        return a[0], W[0]
    return a, W


def bsnet_backward(net: BSNet, cache: _Cache, grad_a: np.ndarray, grad_W: np.ndarray | None):
    """Accumulate parameter gradients given dL/da_s and dL/dW (instance weights)."""
    ga = grad_a if cache.drop_scale is None else grad_a * cache.drop_scale
    dh1 = linear_backward(net.head.layer2, cache.h1, ga)
    de_s = linear_backward(net.head.layer1, cache.e_s, dh1)
    K = net.K
    s = cache.s
    for i, m in enumerate(net.subs):
        de_d = de_s[:, i * K:(i + 1) * K]
        gate = cache.gates[i]
        dgate = float((de_d * cache.e_t[i]).sum())
        net.gates.grad_w_d[i] += dgate * gate * (1.0 - gate) * s
        de_t = de_d * gate
        if cache.bypass:
            de_l = de_t
        else:
            wt = cache.w_t[i]
            dwt = de_t * cache.e_l[i]
            if grad_W is not None:
                dwt = dwt + grad_W[:, i, :]
            du = dwt * wt * (1.0 - wt)
            d_in = linear_backward(m.balance, cache.balance_in[i], du)
            de_l = de_t * wt + d_in[:, :K]
        dh = de_l * (cache.pre_tail[i] > 0)
        linear_backward(m.tail, cache.x, dh)


def bsnet_loss(a_s, y, attrs: AttributeTable, class_set, W, eph: int, eta: float,
               epsilon: float = DEFAULT_EPSILON):
    """``(total, L_s, L_div)`` with ``total = L_s + eta * L_div``.

    ``a_s``/``y`` may be a single prediction or a batch; ``W`` matches
    (``(N, K)`` or ``(B, N, K)``). ``class_set`` is the normalizing set of
    the cross-entropy (all seen classes in training).
    """
    class_set = np.sort(np.asarray(class_set, dtype=np.int64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    pos = np.searchsorted(class_set, y)
    if np.any(pos >= class_set.size) or np.any(class_set[np.minimum(pos, class_set.size - 1)] != y):
        raise DomainError("label outside the class set")
    total, l_s, l_div, _, _ = _loss_grad(a_s, pos, attrs.phi(class_set), W, eph, eta, epsilon)
    return total, l_s, l_div


def _loss_grad(a_s, y_pos, phi, W, eph, eta, epsilon):
    if eta < 0:
        raise DomainError("eta must be non-negative")
    a = np.atleast_2d(a_s)
    l_s, g_logits = softmax_ce_batch(a @ phi.T, np.atleast_1d(y_pos))
    grad_a = g_logits @ phi
    if W is None:
        return l_s, l_s, 0.0, grad_a, None
    W3 = W if np.ndim(W) == 3 else np.asarray(W)[None]
    l_div, g_W, _ = diversity_loss(W3, eph, epsilon)
    return l_s + eta * l_div, l_s, l_div, grad_a, eta * g_W


def train_step(net: BSNet, x, t, phi, eph: int, s: float, eta: float, lr: float,
               rng: np.random.Generator, bypass: bool = False, diversity: bool = True):
    """One SGD step on the combined objective; returns ``(L_s, L_div, W)``.

    ``eph`` drives the margin schedule, ``s`` the gate sharpness.
    """
    net.zero_grad()
    a, W, cache = _forward(net, x, x, s, Mode.TRAIN, rng, bypass)
    use_div = diversity and not bypass
    _, l_s, l_div, grad_a, grad_W = _loss_grad(a, t, phi, W if use_div else None, eph, eta,
                                               net.epsilon)
    bsnet_backward(net, cache, grad_a, grad_W)
    grads = net.grads()
    params = net.params()
    if bypass:
        # balance generators are not part of the model while bypassed
        skip = {id(m.balance.weight) for m in net.subs} | {id(m.balance.bias) for m in net.subs}
        pairs = [(p, g) for p, g in zip(params, grads) if id(p) not in skip]
        params, grads = [p for p, _ in pairs], [g for _, g in pairs]
    sgd_step(params, grads, lr)
    return l_s, l_div, W


def hard_prune(net: BSNet) -> BSNet:
    """Drop sub-modules whose inference gate is at most 0.5.

    The kept gates and fusion-head columns are copied unchanged, so outputs
    differ from the soft model only by the removed (small) contributions.
    """
    keep = np.flatnonzero(net.gates.values(net.gates.s_max) > 0.5)
    K = net.K
    cols = np.concatenate([np.arange(i * K, (i + 1) * K) for i in keep]) if keep.size else \
        np.zeros(0, dtype=np.int64)
    l1 = net.head.layer1
    head = FusionHead(LinearLayer(l1.weight[:, cols].copy(), l1.bias.copy()),
                      net.head.layer2.copy(), net.head.dropout_rate)
    subs = [BSNSubModule(net.subs[i].tail.copy(), net.subs[i].balance.copy()) for i in keep]
    gates = DatasetGates(net.gates.w_d[keep].copy(), net.gates.s_max, net.gates.eph_max)
    return BSNet(subs, gates, head, net.epsilon)
