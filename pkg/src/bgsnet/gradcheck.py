"""Finite-difference oracle suites for the closed-form gradients.

Each suite draws random problems, compares the analytic gradient with
central differences and reports the worst relative error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsnet import diversity_loss
from .dataforge import AttributeTable, Episode
from .gnet import GNetParams, MetaConfig, MetaOrder, episode_meta_gradient, outer_objective
from .numkit import finite_diff_grad, make_rng

DIVERSITY_N = (2, 3, 5, 8)
DIVERSITY_K = (1, 4, 16)
# central differences step 1e-5; weights closer than this could swap order
MIN_GAP = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    trials: int
    worst: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.worst <= self.tol

    def line(self) -> str:
        verdict = "PASS" if self.ok else "FAIL"
        return (f"{verdict} {self.name}: {self.trials} trials, "
                f"max rel err {self.worst:.3e} (tol {self.tol:g})")


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / scale


def untied_weights(rng: np.random.Generator, N: int, K: int, lo: float = 0.05,
                   hi: float = 0.95) -> np.ndarray:
    """uniform(lo, hi) matrix whose columns have no two entries within MIN_GAP."""
    while True:
        W = rng.uniform(lo, hi, size=(N, K))
        if N < 2 or np.all(np.diff(np.sort(W, axis=0), axis=0) > MIN_GAP):
            return W


def diversity_gradcheck(trials: int = 1000, seed: int = 7, tol: float = 1e-6,
                        eph_max: int = 100) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(trials):
        N = int(rng.choice(DIVERSITY_N))
        K = int(rng.choice(DIVERSITY_K))
        eph = int(rng.integers(1, eph_max + 1))
        W = untied_weights(rng, N, K)
        _, grad, mrg = diversity_loss(W, eph)

        def f(v, N=N, K=K, eph=eph, mrg=mrg):
            return diversity_loss(v.reshape(N, K), eph, margins=mrg)[0]

        worst = max(worst, rel_err(grad.ravel(), finite_diff_grad(f, W.ravel())))
    return CheckResult("diversity-loss gradient", trials, worst, tol)


def toy_meta_task(rng: np.random.Generator, K: int = 4, d: int = 3):
    """Three seen classes: two adapt in the inner step, the third validates."""
    attrs = AttributeTable(np.arange(3), rng.uniform(size=(3, d)))
    ep = Episode(rng.normal(size=(4, K)), np.array([0, 0, 1, 1]),
                 rng.normal(size=(3, K)), np.array([2, 2, 2]), (0, 1), (2,))
    return GNetParams.init(K, d, rng), [ep], attrs


def meta_gradcheck(trials: int = 20, seed: int = 7, tol: float = 1e-5,
                   alpha: float = 0.5) -> CheckResult:
    rng = make_rng(seed)
    cfg = MetaConfig(alpha=alpha, order=MetaOrder.SECOND)
    classes = [0, 1, 2]
    worst = 0.0
    for _ in range(trials):
        p, tasks, attrs = toy_meta_task(rng)
        g = episode_meta_gradient(p, tasks, cfg, attrs, classes)
        fd = finite_diff_grad(
            lambda th: outer_objective(p.with_flat(th), tasks, alpha, attrs, classes), p.flat())
        worst = max(worst, rel_err(g, fd))
    return CheckResult("second-order meta-gradient", trials, worst, tol)
