"""Staged training: GNet pretraining, episodic meta-training, then BSNet under
the Sequential or Parallel strategy; plus checkpoint and train-log I/O.

Checkpoint JSON (version 1)::

    {
      "format": "bgsnet-checkpoint",
      "version": 1,
      "model":  {"N", "K", "d", "s_max", "eph_max", "dropout_rate", "epsilon"},
      "plan":   {...TrainPlan fields...},
      "epochs": {"pretrain", "meta", "stage3", "stage3b"},
      "params": {name: {"shape": [..], "data": [flat row-major floats]}}
    }

Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact. Parameter names: ``gnet.f_g.{weight,bias}``,
``bsnet.sub{i}.{tail,balance}.{weight,bias}``, ``bsnet.gates.w_d``,
``bsnet.head.{layer1,layer2}.{weight,bias}``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bsnet import BSNet, BSNSubModule, DatasetGates, FusionHead, anneal_value, train_step
from .dataforge import AttributeTable, EpisodeConfig, FeatureDataset, sample_episode
from .errors import ConfigError, FormatError, ShapeError, StageError
from .gnet import GNetParams, MetaConfig, MetaOrder, meta_episode, outer_objective, pretrain_gnet
from .numkit import LinearLayer, make_rng

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bgsnet-checkpoint"
CHECKPOINT_VERSION = 1

SEQUENTIAL = "Sequential"
PARALLEL = "Parallel"


@dataclass(frozen=True)
class TrainPlan:
    strategy: str = SEQUENTIAL
    pretrain_epochs: int = 50
    meta_episodes: int = 200
    eph_max: int = 50
    stage3b_epochs: int = 50
    lr: float = 1e-3
    eta: float = 1e-3
    batch_size: int = 1
    meta: MetaConfig = field(default_factory=MetaConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    seed: int = 42

    def __post_init__(self):
        if self.strategy not in (SEQUENTIAL, PARALLEL):
            raise ConfigError(f"strategy must be {SEQUENTIAL!r} or {PARALLEL!r}")
        for name in ("pretrain_epochs", "meta_episodes", "eph_max", "stage3b_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eph_max == 1:
            raise ConfigError("eph_max must be 0 (skip stage 3) or >= 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.eta < 0 or self.batch_size < 1:
            raise ConfigError("need eta >= 0 and batch_size >= 1")
        if self.meta.episodes != self.meta_episodes:
            object.__setattr__(self, "meta", replace(self.meta, episodes=self.meta_episodes))

    def to_json(self) -> dict:
        out = asdict(self)
        out["meta"] = {"alpha": self.meta.alpha, "beta": self.meta.beta,
                       "tasks_per_episode": self.meta.tasks_per_episode,
                       "order": self.meta.order.value}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainPlan":
        obj = dict(obj)
        meta = obj.pop("meta", {}) or {}
        episode = obj.pop("episode", {}) or {}
        try:
            return cls(meta=MetaConfig(**meta), episode=EpisodeConfig(**episode), **obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class ModelConfig:
    N: int = 4
    s_max: float = 5.0
    dropout_rate: float = 0.4
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if not self.s_max > 1:
            raise ConfigError("s_max must exceed 1")


@dataclass
class ModelState:
    gnet: GNetParams
    bsnet: BSNet
    plan: TrainPlan
    model: ModelConfig
    epochs: dict = field(default_factory=lambda: {"pretrain": 0, "meta": 0, "stage3": 0,
                                                  "stage3b": 0})

    @property
    def K(self) -> int:
        return self.gnet.f_g.in_dim

    @property
    def d(self) -> int:
        return self.gnet.f_g.out_dim

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"gnet.f_g.weight": self.gnet.f_g.weight, "gnet.f_g.bias": self.gnet.f_g.bias}
        for i, m in enumerate(self.bsnet.subs):
            for part in ("tail", "balance"):
                layer = getattr(m, part)
                out[f"bsnet.sub{i}.{part}.weight"] = layer.weight
                out[f"bsnet.sub{i}.{part}.bias"] = layer.bias
        out["bsnet.gates.w_d"] = self.bsnet.gates.w_d
        for part in ("layer1", "layer2"):
            layer = getattr(self.bsnet.head, part)
            out[f"bsnet.head.{part}.weight"] = layer.weight
            out[f"bsnet.head.{part}.bias"] = layer.bias
        return out


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage: str
    L_s: float
    L_div: float
    s: float
    gates: tuple[float, ...]
    pruned_count: int
    w_t_min: float
    w_t_max: float


@dataclass
class TrainLog:
    pretrain_loss: list[float] = field(default_factory=list)
    meta_loss: list[float] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def stage(self, name: str) -> list[EpochRecord]:
        return [r for r in self.epochs if r.stage == name]

    def to_csv(self) -> str:
        n = len(self.epochs[0].gates) if self.epochs else 0
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "stage", "L_s", "L_div", "s"] + [f"gate_{i}" for i in range(n)])
        for r in self.epochs:
            writer.writerow([r.epoch, r.stage, repr(r.L_s), repr(r.L_div), repr(r.s)]
                            + [repr(g) for g in r.gates])
        return buf.getvalue()


def _gates_eph_max(plan: TrainPlan) -> int:
    # eph_max == 0 skips stage 3; the gates still need a valid schedule length
    return max(plan.eph_max, 2)


def init_state(plan: TrainPlan, model: ModelConfig, K: int, d: int) -> ModelState:
    seeds = np.random.SeedSequence(plan.seed).generate_state(2)
    gnet = GNetParams.init(K, d, make_rng(int(seeds[0])))
    bsnet = BSNet.init(model.N, K, d, int(seeds[1]), s_max=model.s_max,
                       eph_max=_gates_eph_max(plan), dropout_rate=model.dropout_rate,
                       epsilon=model.epsilon)
    return ModelState(gnet, bsnet, plan, model)


def _run_bsnet_epoch(state: ModelState, x, t, phi, eph_margin: int, s: float, bypass: bool,
                     rng: np.random.Generator, epoch: int, stage: str) -> EpochRecord:
    plan = state.plan
    net = state.bsnet
    order = rng.permutation(t.size)
    sum_ls = sum_div = 0.0
    w_min, w_max = np.inf, -np.inf
    for start in range(0, order.size, plan.batch_size):
        sel = order[start:start + plan.batch_size]
        l_s, l_div, W = train_step(net, x[sel], t[sel], phi, eph_margin, s, plan.eta, plan.lr,
                                   rng, bypass=bypass)
        sum_ls += l_s * sel.size
        sum_div += l_div * sel.size
        w_min = min(w_min, float(W.min()))
        w_max = max(w_max, float(W.max()))
    gates = tuple(float(g) for g in net.gates.values(s))
    return EpochRecord(epoch, stage, sum_ls / t.size, sum_div / t.size, s, gates,
                       net.gates.pruned_count(), w_min, w_max)


def run_training(plan: TrainPlan, ds: FeatureDataset, attrs: AttributeTable,
                 model: ModelConfig | None = None) -> tuple[ModelState, TrainLog]:
    """Pretrain GNet, meta-train it, then train BSNet with GNet frozen.

    A pure function of ``(plan, model, ds, attrs)``: all randomness comes from
    child streams of ``plan.seed``.
    """
    model = model or ModelConfig()
    state = init_state(plan, model, ds.K, attrs.d)
    tlog = TrainLog()
    seen = np.array(ds.split.seen, dtype=np.int64)
    streams = [np.random.Generator(np.random.PCG64(s))
               for s in np.random.SeedSequence(plan.seed).spawn(3)]
    rng_pre, rng_meta, rng_bsn = streams

    try:
        gnet, trace = pretrain_gnet(state.gnet, ds, attrs, plan.pretrain_epochs, plan.lr,
                                    rng_pre, batch_size=plan.batch_size)
    except Exception as exc:
        raise StageError("1-pretrain", exc) from exc
    state.gnet = gnet
    state.epochs["pretrain"] = plan.pretrain_epochs
    tlog.pretrain_loss = trace
    log.info("stage 1 done: %d epochs, last loss %s", plan.pretrain_epochs,
             trace[-1] if trace else None)

    try:
        for _ in range(plan.meta_episodes):
            tasks = [sample_episode(ds, plan.episode, rng_meta)
                     for _ in range(plan.meta.tasks_per_episode)]
            tlog.meta_loss.append(outer_objective(state.gnet, tasks, plan.meta.alpha, attrs, seen)
                                  / len(tasks))
            state.gnet = meta_episode(state.gnet, tasks, plan.meta, attrs, seen)
    except Exception as exc:
        raise StageError("2-meta", exc) from exc
    state.epochs["meta"] = plan.meta_episodes

    x, y = ds.subset(ds.split.train_idx)
    t = np.searchsorted(seen, y)
    phi = attrs.phi(seen)
    net = state.bsnet
    try:
        for eph in range(1, plan.eph_max + 1):
            s = anneal_value(eph, net.gates.s_max, plan.eph_max)
            if plan.strategy == PARALLEL:
                rec = _run_bsnet_epoch(state, x, t, phi, eph, s, False, rng_bsn, eph, "3")
            else:
                rec = _run_bsnet_epoch(state, x, t, phi, eph, s, True, rng_bsn, eph, "3a")
            tlog.epochs.append(rec)
        state.epochs["stage3"] = plan.eph_max
        if plan.strategy == SEQUENTIAL:
            for e in range(1, plan.stage3b_epochs + 1):
                # annealing is finished: hold s at s_max; margins restart with 3b
                rec = _run_bsnet_epoch(state, x, t, phi, e, net.gates.s_max, False, rng_bsn,
                                       plan.eph_max + e, "3b")
                tlog.epochs.append(rec)
            state.epochs["stage3b"] = plan.stage3b_epochs
    except Exception as exc:
        raise StageError("3-bsnet", exc) from exc
    return state, tlog


# ----------------------------------------------------------------- checkpoint


def checkpoint_dict(state: ModelState) -> dict:
    params = {name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
              for name, arr in state.named_arrays().items()}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": {"N": state.bsnet.N, "K": state.K, "d": state.d,
                  "s_max": state.bsnet.gates.s_max, "eph_max": state.bsnet.gates.eph_max,
                  "dropout_rate": state.bsnet.head.dropout_rate,
                  "epsilon": state.bsnet.epsilon},
        "plan": state.plan.to_json(),
        "epochs": dict(state.epochs),
        "params": params,
    }


def checkpoint_bytes(state: ModelState) -> bytes:
    return (json.dumps(checkpoint_dict(state), indent=1) + "\n").encode()


def save_checkpoint(state: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path, K: int | None = None, d: int | None = None) -> ModelState:
    """Read a checkpoint; ``K``/``d`` additionally pin the expected dimensions."""
    try:
        obj = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    return state_from_dict(obj, K=K, d=d)


def state_from_dict(obj: dict, K: int | None = None, d: int | None = None) -> ModelState:
    if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a bgsnet checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {obj.get('version')!r}")
    try:
        m = obj["model"]
        N, ck_K, ck_d = int(m["N"]), int(m["K"]), int(m["d"])
        plan = TrainPlan.from_json(obj["plan"])
        model = ModelConfig(N=N, s_max=float(m["s_max"]), dropout_rate=float(m["dropout_rate"]),
                            epsilon=float(m["epsilon"]))
        params = obj["params"]
        epochs = dict(obj["epochs"])
        eph_max = int(m["eph_max"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from None
    if K is not None and ck_K != K:
        raise ShapeError(f"checkpoint K={ck_K}, expected {K}")
    if d is not None and ck_d != d:
        raise ShapeError(f"checkpoint d={ck_d}, expected {d}")

    expected = {"gnet.f_g.weight": (ck_d, ck_K), "gnet.f_g.bias": (ck_d,)}
    for i in range(N):
        expected[f"bsnet.sub{i}.tail.weight"] = (ck_K, ck_K)
        expected[f"bsnet.sub{i}.tail.bias"] = (ck_K,)
        expected[f"bsnet.sub{i}.balance.weight"] = (ck_K, 2 * ck_K)
        expected[f"bsnet.sub{i}.balance.bias"] = (ck_K,)
    expected["bsnet.gates.w_d"] = (N,)
    expected["bsnet.head.layer1.weight"] = (ck_K, N * ck_K)
    expected["bsnet.head.layer1.bias"] = (ck_K,)
    expected["bsnet.head.layer2.weight"] = (ck_d, ck_K)
    expected["bsnet.head.layer2.bias"] = (ck_d,)
    if set(params) != set(expected):
        raise FormatError("checkpoint parameter names do not match the model config")
    arrays = {}
    for name, shape in expected.items():
        entry = params[name]
        try:
            arr = np.array(entry["data"], dtype=np.float64)
            stored = tuple(int(v) for v in entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{name}: {exc}") from None
        if stored != shape or arr.size != int(np.prod(shape)):
            raise ShapeError(f"{name}: stored shape {stored} with {arr.size} values, "
                             f"expected {shape}")
        arrays[name] = arr.reshape(shape)

    def layer(prefix):
        return LinearLayer(arrays[prefix + ".weight"], arrays[prefix + ".bias"])

    gnet = GNetParams(layer("gnet.f_g"))
    subs = [BSNSubModule(layer(f"bsnet.sub{i}.tail"), layer(f"bsnet.sub{i}.balance"))
            for i in range(N)]
    gates = DatasetGates(arrays["bsnet.gates.w_d"], model.s_max, eph_max)
    head = FusionHead(layer("bsnet.head.layer1"), layer("bsnet.head.layer2"), model.dropout_rate)
    return ModelState(gnet, BSNet(subs, gates, head, model.epsilon), plan, model, epochs)


__all__ = [
    "EpochRecord", "MetaOrder", "ModelConfig", "ModelState", "PARALLEL", "SEQUENTIAL",
    "TrainLog", "TrainPlan", "checkpoint_bytes", "init_state", "load_checkpoint",
    "run_training", "save_checkpoint",
]
