import pytest

from ris_estimation.config import config_from_dict


def tiny_config(**sections):
    """A desk-sized grouped setup: 4x4 RIS, 2x2 BS, g=4, so D = 4 * 4 = 16."""
    data = {
        "seed": 7,
        "experiment": "grouped-dml",
        "arrays": {"bs": [2, 2], "ris": [4, 4]},
        "grouping": {"group_size": 4},
        "pilots": {"q": 16, "q_shape": [4, 4]},
        "regions": {"users_per_region": 1},
        "dataset": {
            "samples_per_user": 12,
            "validation_fraction": 0.25,
            "test_size": 9,
            "train_snr_db": [10.0, 20.0],
        },
        "training": {
            "epochs": 1,
            "batch_size": 4,
            "classifier_epochs": 1,
            "checkpoint_every_epochs": 0,
        },
        "evaluation": {
            "snr_db": [10.0],
            "baseline_q_grouped": 32,
            "baseline_q_ungrouped": 128,
            "pilot_sweep_q": [8, 16],
        },
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(name, {}).update(values)
        else:
            data[name] = values
    return config_from_dict(data)


@pytest.fixture
def config():
    return tiny_config()
