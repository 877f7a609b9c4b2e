"""Fused inference and ZSL / GZSL evaluation with calibrated stacking.

All accuracies are per-class Top-1 in percent: the mean over classes of the
fraction of that class's test instances predicted correctly. Every argmax
breaks ties towards the lowest class id.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .bsnet import Mode, bsnet_forward
from .dataforge import AttributeTable, FeatureDataset
from .errors import DomainError, ShapeError, ValidationError
from .gnet import gnet_forward

BRANCHES = ("fused", "gnet", "bsnet")


def fuse_predict(a_g, a_s) -> np.ndarray:
    a_g = np.asarray(a_g, dtype=np.float64)
    a_s = np.asarray(a_s, dtype=np.float64)
    if a_g.shape != a_s.shape:
        raise ShapeError(f"cannot fuse {a_g.shape} with {a_s.shape}")
    return a_g + a_s


def _argmax_lowest(scores: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    # columns are in ascending class-id order, and argmax returns the first hit
    order = np.argsort(class_ids, kind="stable")
    return class_ids[order][np.argmax(scores[..., order], axis=-1)]


def zsl_predict(a_bar, attrs: AttributeTable, unseen_classes):
    unseen = np.sort(np.asarray(unseen_classes, dtype=np.int64))
    if unseen.size == 0:
        raise DomainError("empty unseen class set")
    scores = np.asarray(a_bar, dtype=np.float64) @ attrs.phi(unseen).T
    pred = _argmax_lowest(scores, unseen)
    return int(pred) if np.ndim(pred) == 0 else pred


def gzsl_scores(a_bar, attrs: AttributeTable, seen, unseen, delta: float):
    """Calibrated scores over the union (ascending class ids) and those ids."""
    seen = np.asarray(seen, dtype=np.int64)
    unseen = np.asarray(unseen, dtype=np.int64)
    if np.intersect1d(seen, unseen).size:
        raise ValidationError("seen and unseen class sets overlap")
    union = np.sort(np.concatenate([seen, unseen]))
    if union.size == 0:
        raise DomainError("empty class set")
    scores = np.asarray(a_bar, dtype=np.float64) @ attrs.phi(union).T
    scores = scores - delta * np.isin(union, seen)
    return scores, union


def gzsl_predict(a_bar, attrs: AttributeTable, seen, unseen, delta: float):
    scores, union = gzsl_scores(a_bar, attrs, seen, unseen, delta)
    pred = _argmax_lowest(scores, union)
    return int(pred) if np.ndim(pred) == 0 else pred


def per_class_accuracy(y_true, y_pred) -> dict[int, float]:
    """Percent correct for every class present in ``y_true``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    out = {}
    for c in np.unique(y_true):
        mask = y_true == c
        out[int(c)] = 100.0 * float(np.mean(y_pred[mask] == c))
    return out


def mean_per_class(y_true, y_pred) -> float:
    acc = per_class_accuracy(y_true, y_pred)
    if not acc:
        raise ValidationError("no test instances")
    return float(np.mean([acc[c] for c in sorted(acc)]))


def harmonic_mean(U: float, S: float) -> float:
    return 2.0 * U * S / (U + S) if U + S > 0 else 0.0


@dataclass(frozen=True)
class EvalReport:
    T_zsl: float
    U: float
    S: float
    H: float
    delta: float
    pruned_count: int
    per_class: tuple  # rows of (class_id, split, n, zsl_acc | None, gzsl_acc)
    branch: str = "fused"

    def to_json(self) -> dict:
        out = asdict(self)
        out["per_class"] = [
            {"class_id": c, "split": sp, "n": n, "zsl_acc": z, "gzsl_acc": g}
            for c, sp, n, z, g in self.per_class
        ]
        return out

    def summary(self) -> str:
        return (f"[{self.branch}] ZSL T={self.T_zsl:.2f}  GZSL(delta={self.delta:g}) "
                f"U={self.U:.2f} S={self.S:.2f} H={self.H:.2f}  pruned={self.pruned_count}")


def make_report(T_zsl: float, U: float, S: float, delta: float = 0.0, pruned_count: int = 0,
                per_class=(), branch: str = "fused") -> EvalReport:
    return EvalReport(T_zsl, U, S, harmonic_mean(U, S), delta, pruned_count, tuple(per_class),
                      branch)


def predict_attributes(model, x: np.ndarray, branch: str = "fused") -> np.ndarray:
    """Attribute-space prediction of a trained ``ModelState`` (gates at s_max)."""
    if branch not in BRANCHES:
        raise DomainError(f"branch must be one of {BRANCHES}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.K:
        raise ShapeError(f"features have {x.shape[1]} channels, model expects {model.K}")
    a_g = gnet_forward(model.gnet, x)
    if branch == "gnet":
        return a_g
    a_s, _ = bsnet_forward(model.bsnet, x, x, mode=Mode.INFER)
    return a_s if branch == "bsnet" else fuse_predict(a_g, a_s)


class _Predictions:
    """Scores computed once per split so several deltas are cheap."""

    def __init__(self, model, ds: FeatureDataset, attrs: AttributeTable, branch: str):
        split = ds.split
        if split.test_unseen_idx.size == 0 or split.test_seen_idx.size == 0:
            raise ValidationError("evaluation needs non-empty test_seen and test_unseen splits")
        if attrs.d != model.d:
            raise ShapeError(f"attributes have d={attrs.d}, model predicts d={model.d}")
        self.seen = np.array(split.seen, dtype=np.int64)
        self.unseen = np.array(split.unseen, dtype=np.int64)
        xu, self.yu = ds.subset(split.test_unseen_idx)
        xs, self.ys = ds.subset(split.test_seen_idx)
        self.au = predict_attributes(model, xu, branch)
        self.as_ = predict_attributes(model, xs, branch)
        self.attrs = attrs
        self.zsl_pred = zsl_predict(self.au, attrs, self.unseen)

    def gzsl(self, delta: float):
        pu = gzsl_predict(self.au, self.attrs, self.seen, self.unseen, delta)
        ps = gzsl_predict(self.as_, self.attrs, self.seen, self.unseen, delta)
        return pu, ps


def evaluate(model, ds: FeatureDataset, attrs: AttributeTable, delta: float,
             branch: str = "fused") -> EvalReport:
    preds = _Predictions(model, ds, attrs, branch)
    return _report(model, preds, delta, branch)


def _report(model, preds: _Predictions, delta: float, branch: str) -> EvalReport:
    pu, ps = preds.gzsl(delta)
    zsl_acc = per_class_accuracy(preds.yu, preds.zsl_pred)
    u_acc = per_class_accuracy(preds.yu, pu)
    s_acc = per_class_accuracy(preds.ys, ps)
    rows = []
    for c in sorted(s_acc):
        rows.append((c, "seen", int(np.sum(preds.ys == c)), None, s_acc[c]))
    for c in sorted(u_acc):
        rows.append((c, "unseen", int(np.sum(preds.yu == c)), zsl_acc[c], u_acc[c]))
    T = float(np.mean([zsl_acc[c] for c in sorted(zsl_acc)]))
    U = float(np.mean([u_acc[c] for c in sorted(u_acc)]))
    S = float(np.mean([s_acc[c] for c in sorted(s_acc)]))
    return make_report(T, U, S, delta, model.bsnet.gates.pruned_count(), rows, branch)


def sweep_delta(model, ds: FeatureDataset, attrs: AttributeTable, deltas,
                branch: str = "fused") -> list[EvalReport]:
    deltas = list(deltas)
    if not deltas:
        raise DomainError("delta sweep needs at least one value")
    preds = _Predictions(model, ds, attrs, branch)
    return [_report(model, preds, float(dl), branch) for dl in deltas]


def sweep_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["delta", "U", "S", "H"])
    for r in reports:
        writer.writerow([repr(r.delta), repr(r.U), repr(r.S), repr(r.H)])
    return buf.getvalue()
