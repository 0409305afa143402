import pandas as pd
import pytest

from ddgan import presets
from ddgan.evaluation import RunResult
from ddgan.ingest import load_train_config
from ddgan.models import ExperimentPreset, ModeReport, TrainConfig
from ddgan.presets import (
    PRESETS,
    UnknownPresetError,
    ablate,
    ablation_jobs,
    cell_label,
    get_preset,
    grid_cells,
    median_table,
    preset_config_text,
    unmet_expectations,
)


def _report(**values):
    base = dict(modes_covered=25, total_modes=25, high_quality_fraction=0.95, mode_kl=0.01, n_samples=10_000)
    return ModeReport(**{**base, **values})


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build_valid_configs(name, tmp_path):
    preset = get_preset(name)
    path = tmp_path / f"{name}.cfg"
    path.write_text(preset_config_text(preset))
    assert load_train_config(path) == preset.train_config()


def test_unknown_preset():
    with pytest.raises(UnknownPresetError) as info:
        get_preset("cifar")
    assert "toy25" in str(info.value)


def test_grid_preset_alias():
    assert get_preset("table3-toy") is get_preset("step-ablation")
    assert get_preset("toy25").train_config().iterations == get_preset("step-ablation").train_config().iterations


def test_unmet_expectations():
    bar = get_preset("toy25").expected
    assert unmet_expectations(_report(), bar) == []
    failures = unmet_expectations(_report(modes_covered=21, mode_kl=0.4), bar)
    assert len(failures) == 2
    assert failures[0].startswith("modes_covered=21")


def test_grid_cells_and_filters():
    preset = get_preset("step-ablation")
    assert len(grid_cells(preset)) == 24
    cells = grid_cells(preset, T=[1, 4], latent=[True])
    assert len(cells) == 6
    assert {cell["T"] for cell in cells} == {1, 4}
    assert grid_cells(get_preset("toy25")) == [{}]
    assert grid_cells(get_preset("toy25"), T=[1, 2]) == [{"T": 1}, {"T": 2}]


def test_cell_label():
    assert cell_label({"T": 4, "parametrization": "x0", "use_latent": False}) == "T-4_parametrization-x0_use_latent-off"
    assert cell_label({}) == ""


def test_ablation_jobs_count_seeds(tmp_path):
    jobs = ablation_jobs(get_preset("toy25"), 3, tmp_path, [{"T": 1}, {"T": 4}], iterations=10)
    assert len(jobs) == 6
    assert [job.config["seed"] for job in jobs[:3]] == [7, 8, 9]
    assert all(job.config["iterations"] == 10 for job in jobs)
    assert jobs[0].out_dir == str(tmp_path / "T-1" / "seed_7")


def test_median_table():
    runs = pd.DataFrame({
        "label": ["b", "b", "b", "a"],
        "T": [4, 4, 4, 1],
        "parametrization": ["x0"] * 4,
        "use_latent": [True] * 4,
        "seed": [0, 1, 2, 0],
        "modes_covered": [25, 20, 24, 10],
        "high_quality_fraction": [0.9, 0.8, 0.7, 0.5],
        "mode_kl": [0.1, 0.3, 0.2, 1.0],
    })
    table = median_table(runs)
    assert list(table["label"]) == ["a", "b"]
    row = table.iloc[1]
    assert (row["seeds"], row["modes_covered"], row["mode_kl"]) == (3, 24, 0.2)


def test_ablate_writes_tables(tmp_path, monkeypatch):
    def fake_cell(job):
        config = TrainConfig(**job.config)
        return RunResult(job.label, config, _report(modes_covered=config.T + config.seed))

    monkeypatch.setattr(presets, "run_cell", fake_cell)
    preset = ExperimentPreset(name="grid", grid={"T": [2, 1]})
    runs, medians = ablate(preset, 2, tmp_path)
    assert len(runs) == 4
    assert list(medians["T"]) == [1, 2]
    assert list(medians["modes_covered"]) == [1.5, 2.5]
    assert (tmp_path / "runs.csv").is_file()
    assert (tmp_path / "comparison.csv").is_file()


def test_ablate_end_to_end(tmp_path, tiny_config):
    preset = ExperimentPreset(name="tiny", overrides=tiny_config.model_dump(), eval_samples=50)
    runs, medians = ablate(preset, 1, tmp_path, T=[1, 2])
    assert list(runs["label"]) == ["T-1", "T-2"]
    assert (tmp_path / "T-2" / "seed_0" / "mode_report.json").is_file()
    assert medians["seeds"].tolist() == [1, 1]
