import json

import pytest

from bgsnet.bsnet import anneal_value
from bgsnet.dataforge import EpisodeConfig, synth_dataset
from bgsnet.errors import ConfigError, FormatError, ShapeError, StageError
from bgsnet.gnet import MetaConfig
from bgsnet.pipeline import (PARALLEL, SEQUENTIAL, ModelConfig, TrainPlan, checkpoint_bytes,
                             init_state, load_checkpoint, run_training, save_checkpoint)


def small_plan(**kw):
    base = dict(pretrain_epochs=5, meta_episodes=5, eph_max=6, stage3b_epochs=4, lr=1e-2,
                eta=1e-2, batch_size=4, episode=EpisodeConfig(3, 2, 2),
                meta=MetaConfig(alpha=1e-2, beta=1e-2, tasks_per_episode=2), seed=3)
    base.update(kw)
    return TrainPlan(**base)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(8, 3, 10, K=6, d=4, noise_sigma=0.1, seed=1)


@pytest.fixture(scope="module")
def trained(data):
    ds, attrs = data
    return run_training(small_plan(), ds, attrs)


@pytest.fixture(scope="module")
def desk():
    # desk-scale data with a reduced epoch budget
    ds, attrs = synth_dataset(20, 5, 50, 32, 16, 0.1, seed=42)
    plan = TrainPlan(pretrain_epochs=10, meta_episodes=20, eph_max=10, stage3b_epochs=10)
    return run_training(plan, ds, attrs)


def test_zero_counts_equal_initialization(data):
    ds, attrs = data
    plan = small_plan(pretrain_epochs=0, meta_episodes=0, eph_max=0, stage3b_epochs=0)
    state, tlog = run_training(plan, ds, attrs)
    init = init_state(plan, ModelConfig(), ds.K, attrs.d)
    assert checkpoint_bytes(state) == checkpoint_bytes(init)
    assert tlog.epochs == [] and tlog.pretrain_loss == [] and tlog.meta_loss == []


def test_deterministic(data, trained):
    ds, attrs = data
    state, tlog = run_training(small_plan(), ds, attrs)
    assert checkpoint_bytes(state) == checkpoint_bytes(trained[0])
    assert tlog.to_csv() == trained[1].to_csv()
    assert tlog == trained[1]


def test_seed_changes_result(data, trained):
    ds, attrs = data
    state, _ = run_training(small_plan(seed=4), ds, attrs)
    assert checkpoint_bytes(state) != checkpoint_bytes(trained[0])


def test_stage3_never_touches_gnet(data, trained):
    ds, attrs = data
    stage12, _ = run_training(small_plan(eph_max=0, stage3b_epochs=0), ds, attrs)
    assert trained[0].gnet.flat().tobytes() == stage12.gnet.flat().tobytes()


def test_stage_labels_and_epochs(trained):
    _, tlog = trained
    assert [r.stage for r in tlog.epochs] == ["3a"] * 6 + ["3b"] * 4
    assert [r.epoch for r in tlog.epochs] == list(range(1, 11))


def test_stage3a_bypasses_instance_balance(trained):
    for r in trained[1].stage("3a"):
        assert r.L_div == 0.0
        assert r.w_t_min == 1.0 and r.w_t_max == 1.0


def test_stage3b_enables_instance_balance(trained):
    recs = trained[1].stage("3b")
    assert all(r.L_div != 0.0 for r in recs)
    assert all(0.0 < r.w_t_min and r.w_t_max < 1.0 for r in recs)


def test_s_follows_schedule(trained):
    state, tlog = trained
    s = [r.s for r in tlog.stage("3a")]
    assert s == [anneal_value(e, 5.0, 6) for e in range(1, 7)]
    assert all(r.s == state.bsnet.gates.s_max for r in tlog.stage("3b"))


def test_parallel_strategy(data):
    ds, attrs = data
    _, tlog = run_training(small_plan(strategy=PARALLEL), ds, attrs)
    assert [r.stage for r in tlog.epochs] == ["3"] * 6
    assert all(r.L_div != 0.0 for r in tlog.epochs)
    assert [r.s for r in tlog.epochs] == [anneal_value(e, 5.0, 6) for e in range(1, 7)]


def test_desk_scale_improves_in_both_substages(desk):
    _, tlog = desk
    for stage in ("3a", "3b"):
        recs = tlog.stage(stage)
        assert recs[-1].L_s < recs[0].L_s
    assert tlog.pretrain_loss[-1] < tlog.pretrain_loss[0]


def test_pruned_count_logged(desk):
    state, tlog = desk
    assert tlog.epochs[-1].pruned_count == state.bsnet.gates.pruned_count()


def test_stage_error_is_tagged(data):
    ds, attrs = data
    with pytest.raises(StageError) as info:
        run_training(small_plan(episode=EpisodeConfig(5, 2, 2)), ds, attrs)
    assert info.value.stage == "2-meta"


def test_trainlog_csv(trained):
    lines = trained[1].to_csv().splitlines()
    assert lines[0] == "epoch,stage,L_s,L_div,s,gate_0,gate_1,gate_2,gate_3"
    assert len(lines) == 11
    assert lines[1].split(",")[1] == "3a"


class TestPlan:
    @pytest.mark.parametrize("kw", [dict(pretrain_epochs=-1), dict(lr=0.0), dict(eph_max=1),
                                    dict(strategy="Both"), dict(batch_size=0),
                                    dict(eta=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainPlan(**kw)

    def test_json_round_trip(self):
        plan = small_plan(strategy=PARALLEL)
        again = TrainPlan.from_json(json.loads(json.dumps(plan.to_json())))
        assert again == plan

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            TrainPlan.from_json({"epochs": 3})

    def test_meta_episodes_is_authoritative(self):
        assert TrainPlan(meta_episodes=7).meta.episodes == 7

    def test_defaults(self):
        plan = TrainPlan()
        assert plan.strategy == SEQUENTIAL and plan.eph_max == 50 and plan.lr == 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path, trained):
        state = trained[0]
        path = tmp_path / "ck.json"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert checkpoint_bytes(loaded) == checkpoint_bytes(state)
        for name, arr in state.named_arrays().items():
            assert loaded.named_arrays()[name].tobytes() == arr.tobytes()

    def test_corrupted_json(self, tmp_path, trained):
        path = tmp_path / "ck.json"
        save_checkpoint(trained[0], path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path, trained):
        obj = json.loads(checkpoint_bytes(trained[0]))
        obj["version"] = 99
        path = tmp_path / "ck.json"
        path.write_text(json.dumps(obj))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_wrong_K(self, tmp_path, trained):
        path = tmp_path / "ck.json"
        save_checkpoint(trained[0], path)
        with pytest.raises(ShapeError):
            load_checkpoint(path, K=7)

    def test_inconsistent_array_shape(self, tmp_path, trained):
        obj = json.loads(checkpoint_bytes(trained[0]))
        obj["model"]["K"] = 5
        path = tmp_path / "ck.json"
        path.write_text(json.dumps(obj))
        with pytest.raises(ShapeError):
            load_checkpoint(path)

    def test_missing_param(self, tmp_path, trained):
        obj = json.loads(checkpoint_bytes(trained[0]))
        del obj["params"]["bsnet.gates.w_d"]
        path = tmp_path / "ck.json"
        path.write_text(json.dumps(obj))
        with pytest.raises(FormatError):
            load_checkpoint(path)
