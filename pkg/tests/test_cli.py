import csv
import json

import pytest

from bgsnet.cli import main, parse_config
from bgsnet.errors import ConfigError

SMALL = {
    "seed": 3,
    "synth": {"num_seen": 8, "num_unseen": 3, "per_class": 10, "K": 6, "d": 4,
              "noise_sigma": 0.1},
    "plan": {"pretrain_epochs": 3, "meta_episodes": 3, "eph_max": 4, "stage3b_epochs": 2,
             "batch_size": 4, "episode": {"way": 3, "shot": 2, "query": 2},
             "meta": {"tasks_per_episode": 2, "order": "SecondOrder"}},
    "model": {"N": 3},
    "eval": {"delta": 0.2, "delta_sweep": [0.0, 0.5, 1.0]},
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def cfg(tmp_path):
    return write(tmp_path / "cfg.json", SMALL)


def test_synth_is_byte_identical(tmp_path):
    assert main(["synth", "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--seed", "1", "--out", str(tmp_path / "b")]) == 0
    for name in ("features.bgsf", "attributes.csv", "splits.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_eval_sweep(tmp_path, cfg, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    ck = out / "checkpoint.json"
    log_lines = (out / "trainlog.csv").read_text().splitlines()
    assert log_lines[0] == "epoch,stage,L_s,L_div,s,gate_0,gate_1,gate_2"
    assert len(log_lines) == 1 + 4 + 2

    assert main(["eval", "--config", cfg, "--checkpoint", str(ck), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["delta"] == 0.2
    assert abs(report["H"] - 2 * report["U"] * report["S"] / max(report["U"] + report["S"],
                                                                   1e-300)) < 1e-9

    assert main(["sweep-delta", "--config", cfg, "--checkpoint", str(ck),
                 "--out", str(out)]) == 0
    rows = list(csv.reader((out / "sweep.csv").read_text().splitlines()))
    assert rows[0] == ["delta", "U", "S", "H"] and len(rows) == 4
    assert "best H=" in capsys.readouterr().out


def test_train_is_deterministic(tmp_path, cfg):
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    for f in ("checkpoint.json", "trainlog.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_from_files(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--config", write(tmp_path / "s.json", {"synth": SMALL["synth"]}),
                 "--seed", "3", "--out", str(data)]) == 0
    obj = {k: v for k, v in SMALL.items() if k != "synth"}
    obj["data"] = {"features": "data/features.bgsf", "attributes": "data/attributes.csv",
                   "splits": "data/splits.json"}
    assert main(["train", "--config", write(tmp_path / "c.json", obj),
                 "--out", str(tmp_path / "run")]) == 0


def test_eval_without_checkpoint(cfg, capsys):
    assert main(["eval", "--config", cfg]) == 2
    assert "--checkpoint" in capsys.readouterr().err


def test_eval_with_mismatched_checkpoint(tmp_path, cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    other = dict(SMALL, synth=dict(SMALL["synth"], K=7))
    assert main(["eval", "--config", write(tmp_path / "o.json", other),
                 "--checkpoint", str(out / "checkpoint.json")]) == 2


def test_gradcheck_passes():
    assert main(["gradcheck", "--trials", "100", "--seed", "7"]) == 0


def test_gradcheck_violation():
    assert main(["gradcheck", "--trials", "20", "--tol", "1e-15"]) == 1


@pytest.mark.parametrize("obj", [
    {"bogus": 1},
    {"plan": {"epochs": 3}},
    {"plan": {"seed": 3}},
    {"plan": {"lr": 0}},
    {"plan": {"meta": {"gamma": 1}}},
    {"model": {"K": 3}},
    {"synth": {"classes": 3}},
    {"data": {"features": "x"}},
    {"eval": {"branch": "both"}},
    {"eval": {"delta_sweep": []}},
    {"seed": -1},
    {"seed": "one"},
])
def test_bad_config_exits_2(tmp_path, obj):
    assert main(["train", "--config", write(tmp_path / "bad.json", obj)]) == 2


def test_unparseable_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["synth", "--config", str(path)]) == 2


def test_missing_input_file(tmp_path):
    obj = {"data": {"features": "nope.bgsf", "attributes": "a.csv", "splits": "s.json"}}
    assert main(["train", "--config", write(tmp_path / "c.json", obj)]) == 2


def test_unknown_subcommand():
    assert main(["fly"]) == 2


def test_parse_config_resolves_data_paths(tmp_path):
    cfg = parse_config({"data": {"features": "f", "attributes": "a", "splits": "s"}}, tmp_path)
    assert cfg.data["features"] == tmp_path / "f"


def test_parse_config_rejects_non_object():
    with pytest.raises(ConfigError):
        parse_config({"plan": [1, 2]})
