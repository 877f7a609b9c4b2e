"""``bgs`` command line: synth, train, eval, sweep-delta, gradcheck.

Config JSON (every section optional, unknown keys rejected)::

    {
      "seed": 42,
      "data":  {"features": "f.bgsf", "attributes": "a.csv", "splits": "s.json"},
      "synth": {"num_seen": 20, "num_unseen": 5, "per_class": 50, "K": 32, "d": 16,
                "noise_sigma": 0.1, "holdout": 0.2},
      "plan":  {...TrainPlan fields except seed, with nested "meta" and "episode"...},
      "model": {"N": 4, "s_max": 5.0, "dropout_rate": 0.4, "epsilon": 1e-6},
      "eval":  {"delta": 0.0, "delta_sweep": [0.0, 0.1, ...], "branch": "fused"}
    }

``data`` paths are relative to the config file. Commands that need a dataset
load ``data`` when present and otherwise generate one from ``synth``
(desk-scale defaults). ``--seed`` overrides ``seed``.

Exit codes: 0 success, 1 gradcheck tolerance violation or training failure,
2 bad arguments, config or input files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .dataforge import load_dataset, save_dataset, synth_dataset
from .errors import BGSError, ConfigError, StageError
from .gradcheck import diversity_gradcheck, meta_gradcheck
from .pipeline import ModelConfig, TrainPlan, load_checkpoint, run_training, save_checkpoint
from .zsl import BRANCHES, evaluate, sweep_csv, sweep_delta

DEFAULT_SEED = 42
SYNTH_DEFAULTS = {"num_seen": 20, "num_unseen": 5, "per_class": 50, "K": 32, "d": 16,
                  "noise_sigma": 0.1, "holdout": 0.2}
DEFAULT_SWEEP = [round(0.1 * i, 10) for i in range(11)]
SECTIONS = {"seed", "data", "synth", "plan", "model", "eval"}
DATA_KEYS = {"features", "attributes", "splits"}
EVAL_KEYS = {"delta", "delta_sweep", "branch"}

DATASET_FILES = ("features.bgsf", "attributes.csv", "splits.json")


@dataclass
class CliConfig:
    seed: int = DEFAULT_SEED
    data: dict | None = None
    synth: dict = field(default_factory=lambda: dict(SYNTH_DEFAULTS))
    plan: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    delta: float = 0.0
    delta_sweep: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    branch: str = "fused"

    def train_plan(self) -> TrainPlan:
        return TrainPlan.from_json({**self.plan, "seed": self.seed})


def _require_keys(name: str, obj, allowed: set, required: set = frozenset()) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"'{name}' must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"missing key(s) in '{name}': {', '.join(sorted(missing))}")
    return obj


def parse_config(obj: dict, base_dir: Path = Path(".")) -> CliConfig:
    _require_keys("config", obj, SECTIONS)
    cfg = CliConfig()
    if "seed" in obj:
        cfg.seed = _seed(obj["seed"])
    if "data" in obj:
        data = _require_keys("data", obj["data"], DATA_KEYS, DATA_KEYS)
        cfg.data = {k: base_dir / str(v) for k, v in data.items()}
    if "synth" in obj:
        cfg.synth.update(_require_keys("synth", obj["synth"], set(SYNTH_DEFAULTS)))
    if "plan" in obj:
        plan = _require_keys("plan", obj["plan"], set(TrainPlan.__dataclass_fields__) - {"seed"})
        TrainPlan.from_json(plan)  # validate early
        cfg.plan = dict(plan)
    if "model" in obj:
        try:
            cfg.model = ModelConfig(**_require_keys("model", obj["model"],
                                                    set(ModelConfig.__dataclass_fields__)))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    if "eval" in obj:
        ev = _require_keys("eval", obj["eval"], EVAL_KEYS)
        try:
            cfg.delta = float(ev.get("delta", cfg.delta))
            cfg.delta_sweep = [float(v) for v in ev.get("delta_sweep", cfg.delta_sweep)]
        except (TypeError, ValueError):
            raise ConfigError("eval.delta must be a number and eval.delta_sweep a list") from None
        cfg.branch = ev.get("branch", cfg.branch)
        if cfg.branch not in BRANCHES:
            raise ConfigError(f"eval.branch must be one of {BRANCHES}")
        if not cfg.delta_sweep:
            raise ConfigError("eval.delta_sweep must not be empty")
    return cfg


def _seed(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2**64:
        raise ConfigError(f"seed must be an integer in [0, 2^64), got {value!r}")
    return value


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return CliConfig()
    p = Path(path)
    try:
        obj = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from None
    return parse_config(obj, p.parent)


def _dataset(cfg: CliConfig):
    if cfg.data is not None:
        return load_dataset(cfg.data["features"], cfg.data["attributes"], cfg.data["splits"])
    try:
        return synth_dataset(**cfg.synth, seed=cfg.seed)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args, cfg: CliConfig) -> int:
    ds, attrs = synth_dataset(**cfg.synth, seed=cfg.seed)
    out = _out_dir(args)
    save_dataset(ds, attrs, *(out / name for name in DATASET_FILES))
    print(f"wrote {ds.n} instances ({len(ds.split.seen)} seen / {len(ds.split.unseen)} unseen "
          f"classes) to {out}")
    return 0


def cmd_train(args, cfg: CliConfig) -> int:
    plan = cfg.train_plan()
    ds, attrs = _dataset(cfg)
    state, tlog = run_training(plan, ds, attrs, cfg.model)
    out = _out_dir(args)
    save_checkpoint(state, out / "checkpoint.json")
    (out / "trainlog.csv").write_text(tlog.to_csv())
    last = tlog.epochs[-1] if tlog.epochs else None
    print(f"trained {plan.strategy}: pretrain {plan.pretrain_epochs} epochs, meta "
          f"{plan.meta_episodes} episodes, BSNet {len(tlog.epochs)} epochs")
    if last is not None:
        print(f"final epoch {last.epoch} ({last.stage}): L_s={last.L_s:.4f} "
              f"L_div={last.L_div:.4f} pruned={last.pruned_count}")
    print(f"wrote {out / 'checkpoint.json'} and {out / 'trainlog.csv'}")
    return 0


def _trained(args, cfg: CliConfig):
    if not args.checkpoint:
        raise ConfigError(f"'{args.command}' needs --checkpoint")
    ds, attrs = _dataset(cfg)
    return load_checkpoint(args.checkpoint, K=ds.K, d=attrs.d), ds, attrs


def cmd_eval(args, cfg: CliConfig) -> int:
    model, ds, attrs = _trained(args, cfg)
    report = evaluate(model, ds, attrs, cfg.delta, cfg.branch)
    out = _out_dir(args)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
    print(report.summary())
    return 0


def cmd_sweep(args, cfg: CliConfig) -> int:
    model, ds, attrs = _trained(args, cfg)
    reports = sweep_delta(model, ds, attrs, cfg.delta_sweep, cfg.branch)
    out = _out_dir(args)
    (out / "sweep.csv").write_text(sweep_csv(reports))
    best = max(reports, key=lambda r: r.H)
    for r in reports:
        print(f"delta={r.delta:g}  U={r.U:.2f}  S={r.S:.2f}  H={r.H:.2f}")
    print(f"best H={best.H:.2f} at delta={best.delta:g}; wrote {out / 'sweep.csv'}")
    return 0


def cmd_gradcheck(args, cfg: CliConfig) -> int:
    if args.trials < 1 or not args.tol > 0:
        raise ConfigError("--trials must be >= 1 and --tol positive")
    results = [diversity_gradcheck(args.trials, cfg.seed, args.tol),
               meta_gradcheck(max(1, args.trials // 50), cfg.seed, args.meta_tol)]
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "sweep-delta": cmd_sweep, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name in ("eval", "sweep-delta"):
            p.add_argument("--checkpoint", help="checkpoint written by 'bgs train'")
        if name == "gradcheck":
            p.add_argument("--trials", type=int, default=1000)
            p.add_argument("--tol", type=float, default=1e-6,
                           help="relative tolerance for the diversity-loss gradient")
            p.add_argument("--meta-tol", type=float, default=1e-5,
                           help="relative tolerance for the meta-gradient")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = _seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"bgs {args.command}: {exc}", file=sys.stderr)
        return 1
    except (BGSError, OSError) as exc:
        print(f"bgs {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
