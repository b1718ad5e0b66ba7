import numpy as np
import pytest

from maplab.errors import ConfigError, DatasetLoadError
from maplab.experiments import PRESETS, cifar_root, get_preset, plan_cells, plan_runs, run_experiment
from maplab.teacherbank import build_bank
from maplab.trainer import ExperimentConfig

BASE = ExperimentConfig(blobs_classes=4, blobs_n=256, blobs_test_n=200, blobs_size=6, batch_size=32,
                        blobs_spread=0.15)


def test_strategy_compare_cell_arithmetic():
    preset = get_preset("strategy_compare", teachers=(0.2, 0.5, 0.8), seeds=(0, 1))
    cells = plan_cells(preset)
    assert len(cells) == 7
    assert sum(c.strategy == "A" for c in cells) == 1
    assert len(plan_runs(preset)) == 14
    assert len({c.experiment_id for c in cells}) == 7


def test_every_preset_plans():
    for name in PRESETS:
        assert plan_cells(get_preset(name))


def test_early_stage_step_grid():
    cfg = ExperimentConfig(**get_preset("early_stage").config)
    assert cfg.eval_points() == [10, 20, 50, 100, 200, 500, 1000]


def test_unknown_preset_and_axis():
    with pytest.raises(ConfigError):
        get_preset("nope")
    with pytest.raises(ConfigError):
        get_preset("ipc_scaling", widths=(1,))


@pytest.fixture(scope="module")
def bank(tmp_path_factory):
    out = tmp_path_factory.mktemp("bank")
    bank, _ = build_bank([0.6], BASE.replace(lr=1e-4, aug_kind="NoAug"), out, tolerance=0.03, max_steps=300,
                         val_every=10)
    assert bank
    return out


def test_ipc_scaling_rows_one_per_strategy_ipc_seed(bank):
    preset = get_preset("ipc_scaling", teachers=(0.6,), ipcs=(10, 20, 40, 60), seeds=(0, 1), teacher_augs=("NoAug",))
    result = run_experiment(preset, BASE, ["steps=6", "eval_every=6"], bank=bank)
    keys = [(r.strategy, r.ipc, r.seed) for r in result.rows]
    assert len(keys) == len(set(keys)) == 3 * 4 * 2
    assert not result.skipped
    assert all(r.step == 6 for r in result.rows)
    assert all(r.teacher_acc == (None if r.strategy == "A" else 0.6) for r in result.rows)
    mean, std, n = result.summary[(result.rows[0].experiment_id, 6)]
    assert n == 2 and 0 <= mean <= 1 and std >= 0


def test_missing_bank_level_is_skipped_not_fatal(bank):
    preset = get_preset("strategy_compare", teachers=(0.6, 0.9), seeds=(0,), teacher_augs=("NoAug",))
    result = run_experiment(preset, BASE, ["steps=4", "eval_every=2"], bank=bank)
    assert {s.experiment_id for s in result.skipped} == {
        "strategy_compare/B/t0.90/NoAug/StdAug/ipcall", "strategy_compare/C/t0.90/NoAug/StdAug/ipcall"}
    assert {r.strategy for r in result.rows} == {"A", "B", "C"}
    assert len(result.rows) == 3 * 2


def test_sweep_is_deterministic(bank):
    preset = get_preset("strategy_compare", teachers=(0.6,), seeds=(0,), strategies=("C",), teacher_augs=("NoAug",))
    a = run_experiment(preset, BASE, ["steps=4", "eval_every=4"], bank=bank)
    b = run_experiment(preset, BASE, ["steps=4", "eval_every=4"], bank=bank)
    assert a.rows == b.rows


def test_cifar_root_reports_missing_data(tmp_path, monkeypatch):
    monkeypatch.setenv("MAPLAB_DATA_ROOT", str(tmp_path))
    with pytest.raises(DatasetLoadError) as info:
        cifar_root()
    assert "MAPLAB_DATA_ROOT" in str(info.value)
