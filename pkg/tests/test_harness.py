from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_config
from ris_estimation import harness
from ris_estimation.artifact import verify_manifest
from ris_estimation.classical import nmse, nmse_db
from ris_estimation.config import config_from_dict, config_hash, with_overrides
from ris_estimation.errors import ConfigurationError, InputError
from ris_estimation.harness import ResultRow
from ris_estimation.model import init_model_for, mac_count


@pytest.fixture
def datasets(config):
    return harness.build_datasets(config)


# ---------------------------------------------------------------------------
# Datasets and labels
# ---------------------------------------------------------------------------


def test_build_datasets_keeps_grouped_targets_only(config, datasets):
    train_set, test_set = datasets
    assert len(train_set) == 3 * 12
    assert len(test_set) == 9
    assert train_set.targets.shape[1] == config.channel_dim == 16
    assert train_set.cascaded is None


def test_single_region_trains_on_one_region():
    config = tiny_config(experiment="single-region")
    train_set, test_set = harness.build_datasets(config)
    assert set(train_set.region.tolist()) == {1}
    assert set(test_set.region.tolist()) == {1, 2, 3}


def test_load_datasets_rejects_other_config(config, tmp_path: Path):
    harness.prepare_datasets(config, tmp_path)
    train_set, _ = harness.load_datasets(config, tmp_path)
    assert train_set.header["config_hash"] == config_hash(config)

    with pytest.raises(ConfigurationError, match="different config"):
        harness.load_datasets(with_overrides(config, seed=8), tmp_path)


def test_load_datasets_missing(config, tmp_path: Path):
    with pytest.raises(ConfigurationError, match="generate"):
        harness.load_datasets(config, tmp_path)


def test_labels_without_noise_match_truth(config, datasets):
    train_set, _ = datasets
    labels = harness.generate_labels(train_set, config, q_label=32, snr_db=float("inf"))
    np.testing.assert_allclose(labels, train_set.targets, atol=1e-8)


def test_label_noise_shrinks_with_label_snr(config, datasets):
    train_set, _ = datasets
    quiet = nmse(harness.generate_labels(train_set, config, q_label=64, snr_db=30.0), train_set.targets)
    loud = nmse(harness.generate_labels(train_set, config, q_label=64, snr_db=0.0), train_set.targets)
    assert 0.0 < quiet < loud


def test_labels_need_full_pilot_budget(config, datasets):
    train_set, _ = datasets
    with pytest.raises(ConfigurationError, match="Q >= D"):
        harness.generate_labels(train_set, config, q_label=8)


def test_build_training_data_splits_per_user(config, datasets):
    train_set, _ = datasets
    data = harness.build_training_data(config, train_set)

    assert [c.id for c in data.clients] == [(1, 1), (2, 1), (3, 1)]
    assert all(c.size == 9 for c in data.clients)
    assert data.validation is not None
    assert len(data.validation.truth) == 9
    assert data.clients[0].tensors.shape == (9, 4, 4, 2)
    assert all(set(c.regions.tolist()) == {c.id[0]} for c in data.clients)


def test_build_training_data_relabels_single_region():
    config = tiny_config(experiment="single-region", regions={"users_per_region": 2}, training={"single_region": 2})
    train_set, _ = harness.build_datasets(config)
    data = harness.build_training_data(config, train_set)
    assert [c.id for c in data.clients] == [(2, 1), (2, 2)]
    assert all(set(c.regions.tolist()) == {1} for c in data.clients)


def test_validation_draws_from_every_user():
    config = tiny_config(
        regions={"users_per_region": 2},
        dataset={"samples_per_user": 40, "validation_fraction": 0.25},
        training={"validation_samples": 20},
    )
    train_set, _ = harness.build_datasets(config)
    data = harness.build_training_data(config, train_set)

    regions = data.validation.regions
    assert len(regions) == 20
    assert set(regions.tolist()) == {1, 2, 3}
    assert np.bincount(regions).tolist() == [0, 8, 6, 6]
    assert all(c.size == 30 for c in data.clients)


def test_truth_labels_skip_ls_labelling(config, datasets):
    train_set, _ = datasets
    truth_config = tiny_config(labels={"source": "truth"})
    data = harness.build_training_data(truth_config, train_set)
    for client in data.clients:
        np.testing.assert_array_equal(client.targets, client.truth)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def test_run_eval_baselines_only(config, datasets):
    train_set, test_set = datasets
    rows = harness.run_eval(config, None, test_set, harness.fit_covariances(config, train_set))
    assert [(r.method, r.q) for r in rows] == [("ls", 16), ("mmse", 16), ("ls", 32), ("mmse", 32)]
    assert all(r.grouped and r.n == 9 and r.snr_db == 10.0 for r in rows)


def test_run_eval_with_model_per_sample(config, datasets):
    _, test_set = datasets
    rows = harness.run_eval(config, init_model_for(config), test_set, per_sample=True)
    methods = [r.method for r in rows]
    assert methods.count("nn") == 9
    assert methods.count("ls") == 18
    assert "mmse" not in methods
    assert all(r.n == 1 for r in rows)


def test_run_eval_label_estimator_reports_label_error(config, datasets):
    _, test_set = datasets
    labels = harness.generate_labels(test_set, config)
    rows = harness.run_eval(
        config,
        None,
        test_set,
        include_baselines=False,
        estimators={"label": lambda tensors, dataset: labels},
    )
    assert [(r.method, r.q, r.n) for r in rows] == [("label", 16, 9)]
    assert rows[0].nmse_db == pytest.approx(nmse_db(nmse(labels, test_set.targets)))


def test_per_user_estimator_needs_every_user(config, datasets):
    _, test_set = datasets
    models = {(1, 1): init_model_for(config), (2, 1): init_model_for(config)}
    estimate = harness.per_user_estimator(models)
    tensors = np.zeros((len(test_set), 4, 4, 2))
    with pytest.raises(InputError, match="region 3 user 1"):
        estimate(tensors, test_set)
    assert estimate(tensors[:6], test_set.select(test_set.region < 3)).shape == (6, 16)


def test_run_eval_is_reproducible(config, datasets):
    train_set, test_set = datasets
    covariances = harness.fit_covariances(config, train_set)
    a = harness.run_eval(config, init_model_for(config), test_set, covariances)
    b = harness.run_eval(config, init_model_for(config), test_set, covariances)
    assert a == b


def test_long_pilot_ls_beats_short_pilot_ls(config, datasets):
    _, test_set = datasets
    rows = harness.run_eval(config, None, test_set, snr_grid=(20.0,))
    assert harness.summarize(rows, "ls", 32) < harness.summarize(rows, "ls", 16)


def test_run_eval_region_filter(config, datasets):
    _, test_set = datasets
    rows = harness.run_eval(config, init_model_for(config), test_set, region=2, include_baselines=False)
    assert [r.method for r in rows] == ["nn[region=2]"]
    assert rows[0].n == 3


def test_run_eval_rejects_wrong_checkpoint(config, datasets, tmp_path: Path):
    from ris_estimation.model import save_checkpoint

    _, test_set = datasets
    path = save_checkpoint(init_model_for(config), tmp_path / "m.npz", "other")
    with pytest.raises(ConfigurationError):
        harness.run_eval(config, path, test_set)


def test_per_region_covariances(datasets):
    config = tiny_config(evaluation={"mmse_covariance": "per_region"})
    train_set, test_set = datasets
    covariances = harness.fit_covariances(config, train_set)
    assert set(covariances) == {1, 2, 3}
    rows = harness.run_eval(config, None, test_set, covariances)
    assert "mmse" in {r.method for r in rows}


def test_pilot_sweep_improves_with_budget(config, datasets):
    _, test_set = datasets
    rows = harness.run_pilot_sweep(config, test_set, q_values=(8, 32), snr_grid=(30.0,))
    assert [(r.method, r.q) for r in rows] == [("ls", 8), ("ls", 32)]
    assert rows[1].nmse_db < rows[0].nmse_db


# ---------------------------------------------------------------------------
# Summaries and result files
# ---------------------------------------------------------------------------


def _row(method, snr, value, n=10, q=16):
    return ResultRow(method=method, q=q, grouped=True, snr_db=snr, nmse_db=value, n=n, seed=1)


def test_summarize_takes_median_over_snr():
    rows = [_row("nn", 0.0, -5.0), _row("nn", 10.0, -12.0), _row("nn", 20.0, -20.0), _row("ls", 0.0, 3.0)]
    assert harness.summarize(rows, "nn") == -12.0


def test_summarize_combines_per_sample_rows_linearly():
    rows = [_row("nn", 0.0, -10.0, n=1), _row("nn", 0.0, 0.0, n=1)]
    assert harness.summarize(rows, "nn") == pytest.approx(10 * np.log10(0.55))


def test_summarize_unknown_method():
    with pytest.raises(InputError):
        harness.summarize([_row("nn", 0.0, -1.0)], "mmse")


def test_results_csv_round_trip(tmp_path: Path):
    rows = [_row("nn", 10.0, -12.34567), _row("ls", -5.0, 1.5, q=256)]
    path = harness.write_results_csv(rows, tmp_path / "out" / "results.csv")

    lines = path.read_text().splitlines()
    assert lines[0] == "method,Q,grouped,snr_db,nmse_db,n,seed"
    assert lines[1] == "nn,16,true,10.0000,-12.3457,10,1"

    read = harness.read_results_csv(path)
    assert read[1] == rows[1]
    assert read[0].nmse_db == -12.3457


def test_read_results_csv_rejects_bad_header(tmp_path: Path):
    path = tmp_path / "bad.csv"
    path.write_text("method,snr\nnn,0\n")
    with pytest.raises(InputError, match="header"):
        harness.read_results_csv(path)


def test_read_results_csv_missing(tmp_path: Path):
    with pytest.raises(InputError, match="does not exist"):
        harness.read_results_csv(tmp_path / "nope.csv")


# ---------------------------------------------------------------------------
# Complexity
# ---------------------------------------------------------------------------


def test_complexity_report_matches_instrumented_count(config, tmp_path: Path):
    rows = harness.complexity_report(config, tmp_path / "complexity.csv")
    assert all(r.macs == r.instrumented for r in rows)
    assert {r.module for r in rows} == set(mac_count(config))
    assert (tmp_path / "complexity.csv").read_text().startswith("module,macs,instrumented\n")


def test_complexity_at_default_scale():
    from ris_estimation.config import load_config

    rows = {r.module: r for r in harness.complexity_report(load_config(None))}
    assert rows["expert"].instrumented == 608_256
    assert rows["total"].macs == rows["total"].instrumented == 1_248_304


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def test_stage_pretrain_rejects_baseline_only(tmp_path: Path):
    with pytest.raises(ConfigurationError):
        harness.stage_pretrain(tiny_config(experiment="baseline-only"), tmp_path)


def test_stage_train_needs_classifier(config, tmp_path: Path):
    harness.stage_generate(config, tmp_path, verbose=False)
    with pytest.raises(ConfigurationError, match="pretrain-gate"):
        harness.stage_train(config, tmp_path, verbose=False)


def test_stage_baseline_sweep_writes_sweep_csv(config, tmp_path: Path):
    harness.stage_generate(config, tmp_path, verbose=False)
    rows = harness.stage_baseline(config, tmp_path, sweep=True)
    assert {r.q for r in rows} == {8, 16}
    read = harness.read_results_csv(tmp_path / "sweep.csv")
    assert [(r.method, r.q) for r in read] == [(r.method, r.q) for r in rows]


def test_run_experiment_writes_all_artifacts(config, tmp_path: Path):
    result = harness.run_experiment(config, tmp_path, verbose=False)
    layout = result.layout

    for path in (
        layout.config,
        layout.dataset("train"),
        layout.dataset("test"),
        layout.classifier_checkpoint,
        layout.model_checkpoint,
        layout.training_log,
        layout.results,
        layout.complexity,
    ):
        assert path.is_file(), path
    assert {r.method for r in result.rows} == {"nn", "ls", "mmse"}
    assert verify_manifest(tmp_path, config_hash(config)) == []


def test_run_experiment_centralized_mode(tmp_path: Path):
    config = tiny_config(training={"mode": "centralized"})
    result = harness.run_experiment(config, tmp_path, verbose=False)
    assert {r.method for r in result.rows} == {"nn-centralized", "ls", "mmse"}
    assert result.layout.model_checkpoint.is_file()
    assert harness.read_results_csv(result.layout.results)[0].method == "nn-centralized"


def test_run_experiment_per_user_mode(tmp_path: Path):
    config = tiny_config(training={"mode": "per-user"})
    result = harness.run_experiment(config, tmp_path, verbose=False)
    layout = result.layout

    assert {r.method for r in result.rows} == {"nn-per-user", "ls", "mmse"}
    assert [r.n for r in result.rows if r.method == "nn-per-user"] == [9]
    for region in (1, 2, 3):
        assert layout.user_checkpoint(region, 1).is_file()
    assert not layout.model_checkpoint.exists()
    assert verify_manifest(tmp_path, config_hash(config)) == []


def test_stage_eval_needs_per_user_checkpoints(tmp_path: Path):
    config = tiny_config(training={"mode": "per-user"})
    harness.stage_generate(config, tmp_path, verbose=False)
    with pytest.raises(ConfigurationError, match="per-user checkpoint"):
        harness.stage_eval(config, tmp_path)


def test_run_experiment_is_reproducible(config, tmp_path: Path):
    harness.run_experiment(config, tmp_path / "a", verbose=False)
    harness.run_experiment(config, tmp_path / "b", verbose=False)
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_run_experiment_baseline_only(tmp_path: Path):
    config = tiny_config(experiment="baseline-only")
    result = harness.run_experiment(config, tmp_path, verbose=False)
    assert {r.method for r in result.rows} == {"ls", "mmse"}
    assert not result.layout.model_checkpoint.exists()


def test_run_experiment_single_region_reports_each_region(tmp_path: Path):
    config = tiny_config(experiment="single-region")
    result = harness.run_experiment(config, tmp_path, verbose=False)
    methods = {r.method for r in result.rows}
    assert {"nn[region=1]", "nn[region=2]", "nn[region=3]"} <= methods
    assert not any(m.startswith(("ls[", "mmse[")) for m in methods)


# ---------------------------------------------------------------------------
# Desk-scale regimes
# ---------------------------------------------------------------------------


def _default_scale(experiment):
    return config_from_dict({"experiment": experiment})


def _desk(experiment, **sections):
    data = {
        "experiment": experiment,
        "dataset": {"samples_per_user": 2000, "test_size": 900},
        "training": {"epochs": 20, "classifier_epochs": 5, "checkpoint_every_epochs": 0},
        "evaluation": {"snr_db": [10.0]},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return config_from_dict(data)


@pytest.mark.slow
def test_short_pilot_model_beats_short_pilot_ls(tmp_path: Path):
    config = _desk("ungrouped")
    rows = harness.run_experiment(config, tmp_path, verbose=False).rows
    assert harness.summarize(rows, "ls", 32) > -3.0
    assert harness.summarize(rows, "nn", 32) <= harness.summarize(rows, "ls", 32) - 10.0


@pytest.mark.slow
def test_single_region_model_generalizes_worse(tmp_path: Path):
    single = harness.run_experiment(_desk("single-region"), tmp_path / "single", verbose=False).rows
    home = harness.summarize(single, "nn[region=1]")
    for region in (2, 3):
        assert harness.summarize(single, f"nn[region={region}]") >= home + 2.0

    config = _desk("grouped-dml")
    result = harness.run_experiment(config, tmp_path / "dml", verbose=False)
    model = result.layout.model_checkpoint
    _, test_set = harness.load_datasets(config, tmp_path / "dml")
    per_region = [
        harness.summarize(
            harness.run_eval(config, model, test_set, region=r, include_baselines=False), f"nn[region={r}]"
        )
        for r in (1, 2, 3)
    ]
    assert max(per_region) - min(per_region) <= 1.0


@pytest.mark.slow
def test_model_error_does_not_grow_with_snr(tmp_path: Path):
    config = _desk("grouped-dml", evaluation={"snr_db": [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0]})
    rows = harness.run_experiment(config, tmp_path, verbose=False).rows
    curve = [r.nmse_db for r in sorted((r for r in rows if r.method == "nn"), key=lambda r: r.snr_db)]
    assert len(curve) == 7
    assert all(later <= earlier + 0.5 for earlier, later in zip(curve, curve[1:]))


@pytest.mark.slow
def test_grouped_model_at_default_scale(tmp_path: Path):
    rows = harness.run_experiment(_default_scale("grouped-dml"), tmp_path, verbose=False).rows
    assert harness.summarize(rows, "nn", 32) <= -15.5


@pytest.mark.slow
def test_ungrouped_model_at_default_scale(tmp_path: Path):
    rows = harness.run_experiment(_default_scale("ungrouped"), tmp_path, verbose=False).rows
    assert abs(harness.summarize(rows, "nn", 32) + 15.0) <= 3.0
