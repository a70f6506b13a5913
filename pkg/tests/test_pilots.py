import numpy as np
import pytest

from ris_estimation import pilots
from ris_estimation.channel import ArrayGeometry, generate_dataset, vectorize
from ris_estimation.classical import identifiability_report
from ris_estimation.errors import ConfigurationError, InputError
from ris_estimation.pilots import PilotConfig
from ris_estimation.streams import rng_for


def _config(q=4, width=4, antennas=2, per_slot=True, seed=0, grouping=None, q_shape=None):
    rng = np.random.default_rng(seed)
    return PilotConfig(
        phases=pilots.gen_pilots(q, width, "pm1", rng),
        precoder=pilots.gen_precoders(q if per_slot else None, antennas, rng),
        q_shape=q_shape or (q, 1),
        grouping=grouping,
    )


# ---------------------------------------------------------------------------
# Grouping
# ---------------------------------------------------------------------------


def test_make_grouping_8x8_g4():
    s = pilots.make_grouping(ArrayGeometry(8, 8), 4)
    assert s.matrix.shape == (16, 64)
    assert np.all(s.matrix.sum(axis=1) == 4)
    assert np.all(s.matrix.sum(axis=0) == 1)
    assert s.block == (2, 2)


def test_make_grouping_blocks_are_contiguous():
    """Element n = c * rows + r; the first unit holds rows 0-1 of columns 0-1."""
    s = pilots.make_grouping(ArrayGeometry(4, 4), 4)
    assert np.flatnonzero(s.matrix[0]).tolist() == [0, 1, 4, 5]


def test_make_grouping_g1_is_identity():
    s = pilots.make_grouping(ArrayGeometry(3, 2), 1)
    np.testing.assert_array_equal(s.matrix, np.eye(6))


def test_make_grouping_single_group():
    s = pilots.make_grouping(ArrayGeometry(2, 2), 4)
    np.testing.assert_array_equal(s.matrix, np.ones((1, 4)))


def test_make_grouping_rejects_non_divisor():
    with pytest.raises(ConfigurationError):
        pilots.make_grouping(ArrayGeometry(8, 8), 3)


# ---------------------------------------------------------------------------
# Pilots and precoders
# ---------------------------------------------------------------------------


def test_gen_pilots_pm1_alphabet():
    theta = pilots.gen_pilots(32, 16, "pm1", np.random.default_rng(0))
    assert theta.shape == (32, 16)
    assert set(np.unique(theta.real).tolist()) <= {-1.0, 1.0}
    assert np.all(theta.imag == 0)


def test_gen_pilots_single_slot():
    theta = pilots.gen_pilots(1, 1, "pm1", np.random.default_rng(0))
    assert abs(theta[0, 0]) == 1.0


def test_gen_pilots_unit_circle():
    theta = pilots.gen_pilots(8, 8, "unit_circle", np.random.default_rng(0))
    np.testing.assert_allclose(np.abs(theta), 1.0, atol=1e-12)


def test_gen_pilots_unknown_alphabet():
    with pytest.raises(ConfigurationError):
        pilots.gen_pilots(2, 2, "qpsk", np.random.default_rng(0))


def test_gen_precoders_unit_norm():
    w = pilots.gen_precoders(10, 16, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Measurement matrix
# ---------------------------------------------------------------------------


def test_measurement_matrix_dimensions():
    cfg = PilotConfig(
        phases=pilots.gen_pilots(32, 64, "pm1", np.random.default_rng(0)),
        precoder=pilots.gen_precoders(None, 16, np.random.default_rng(1)),
        q_shape=(8, 4),
    )
    assert pilots.measurement_matrix(cfg).shape == (32, 1024)


def test_measurement_matrix_unit_precoder_is_theta():
    theta = pilots.gen_pilots(3, 5, "pm1", np.random.default_rng(0))
    cfg = PilotConfig(phases=theta, precoder=np.array([1.0 + 0j]), q_shape=(3, 1))
    np.testing.assert_array_equal(pilots.measurement_matrix(cfg), theta)


def test_measurement_matrix_hand_kronecker():
    cfg = PilotConfig(
        phases=np.array([[1.0, -1.0]], dtype=complex),
        precoder=np.array([1.0, 0.0], dtype=complex),
        q_shape=(1, 1),
    )
    np.testing.assert_array_equal(pilots.measurement_matrix(cfg), [[1, -1, 0, 0]])


def test_measurement_matrix_held_precoder_equals_kron():
    cfg = _config(q=6, width=4, antennas=3, per_slot=False)
    np.testing.assert_allclose(
        pilots.measurement_matrix(cfg), np.kron(cfg.precoder[None, :], cfg.phases)
    )


def test_pilot_config_rejects_non_unit_precoder():
    with pytest.raises(InputError):
        PilotConfig(phases=np.ones((2, 2), dtype=complex), precoder=np.array([2.0, 0.0]), q_shape=(2, 1))


@pytest.mark.parametrize("q", [16, 32, 256])
def test_per_slot_measurement_matrix_rank(q):
    """rank = min(Q, N'M) for random pilots and per-slot precoders."""
    for seed in range(100):
        psi = pilots.measurement_matrix(_config(q=q, width=16, antennas=16, seed=seed))
        assert identifiability_report(psi).rank == min(q, 256)


# ---------------------------------------------------------------------------
# Observation
# ---------------------------------------------------------------------------


def test_noiseless_observation_matches_slot_by_slot(config):
    ds = generate_dataset(config, split="test")
    realization = ds.realization(0)
    cfg = _config(q=8, width=16, antennas=4)
    h = realization.cascaded

    y = pilots.measurement_matrix(cfg) @ vectorize(h[None])[0]
    per_slot = np.array([cfg.phases[q] @ h @ cfg.precoder[q] for q in range(8)])
    np.testing.assert_allclose(y, per_slot, atol=1e-12)

    obs = pilots.observe(realization, cfg, np.inf, np.random.default_rng(0))
    np.testing.assert_allclose(obs.raw, per_slot, atol=1e-12)


def test_observe_rejects_channel_shape_mismatch(config):
    realization = generate_dataset(config, split="test").realization(0)
    with pytest.raises(InputError):
        pilots.observe(realization, _config(q=4, width=8, antennas=4), 10.0, np.random.default_rng(0))


def test_noise_only_variance():
    snr = pilots.db_to_linear(10.0)
    assert 1.0 / snr == pytest.approx(0.1)
    noise = pilots.add_noise(np.zeros(100_000, dtype=complex), snr, np.random.default_rng(0))
    assert np.mean(np.abs(noise) ** 2) == pytest.approx(0.1, rel=0.05)


def test_add_noise_per_row_snr():
    clean = np.zeros((2, 50_000), dtype=complex)
    noisy = pilots.add_noise(clean, np.array([1.0, 100.0]), np.random.default_rng(0))
    power = np.mean(np.abs(noisy) ** 2, axis=1)
    assert power[0] == pytest.approx(1.0, rel=0.05)
    assert power[1] == pytest.approx(0.01, rel=0.05)


def test_observe_batch_rejects_width_mismatch():
    with pytest.raises(InputError):
        pilots.observe_batch(np.zeros((2, 5)), np.zeros((3, 4)), 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Tensor encoding
# ---------------------------------------------------------------------------


def test_encode_tensor_hand_reshape():
    t = pilots.encode_tensor(np.array([1 + 1j, 2, 3j, -1]), (2, 2))
    assert t[..., 0].tolist() == [[1, 2], [0, -1]]
    assert t[..., 1].tolist() == [[1, 0], [3, 0]]


def test_encode_tensor_shape_and_real_input():
    raw = np.arange(32, dtype=complex)
    t = pilots.encode_tensor(raw, (8, 4))
    assert t.shape == (8, 4, 2)
    assert np.all(t[..., 1] == 0)
    np.testing.assert_array_equal(pilots.decode_tensor(t), raw)


def test_encode_tensor_rejects_bad_shape():
    with pytest.raises(InputError):
        pilots.encode_tensor(np.zeros(5, dtype=complex), (2, 2))


# ---------------------------------------------------------------------------
# Pilot banks
# ---------------------------------------------------------------------------


def test_pilot_bank_user_scope_reuses_precoder(config):
    bank = pilots.build_pilot_bank(config, grouping=pilots.grouping_for(config))
    a = bank.config_for(1, 1)
    b = bank.config_for(1, 1, sample=3)
    c = bank.config_for(2, 1)

    assert np.array_equal(a.precoder, b.precoder)
    assert not np.array_equal(a.precoder, c.precoder)
    assert a.phases.shape == (16, 4)
    assert a.q_shape == (4, 4)


def test_pilot_bank_sample_scope_needs_sample():
    from conftest import tiny_config

    config = tiny_config(pilots={"precoder_scope": "sample"})
    bank = pilots.build_pilot_bank(config)
    with pytest.raises(InputError):
        bank.config_for(1, 1)
    assert not np.array_equal(
        bank.config_for(1, 1, 0).precoder, bank.config_for(1, 1, 1).precoder
    )


def test_pilot_bank_purposes_draw_fresh_phases(config):
    nn = pilots.build_pilot_bank(config)
    long = pilots.build_pilot_bank(config, q=16, purpose="baseline-pilots")
    assert not np.array_equal(nn.phases, long.phases)
    assert long.q_shape == (4, 4)


def test_grouping_for_ungrouped_is_none():
    from conftest import tiny_config

    assert pilots.grouping_for(tiny_config(experiment="ungrouped")) is None


def test_grouped_psi_equals_ungrouped_with_expanded_phases():
    """Theta = Theta_bar S, so Psi_bar vec(S H) = Psi vec(H)."""
    s = pilots.make_grouping(ArrayGeometry(4, 4), 4)
    rng = rng_for(0, "test")
    theta_bar = pilots.gen_pilots(6, 4, "pm1", rng)
    w = pilots.gen_precoders(6, 2, rng)
    h = rng.standard_normal((16, 2)) + 1j * rng.standard_normal((16, 2))

    grouped = PilotConfig(phases=theta_bar, precoder=w, q_shape=(6, 1), grouping=s)
    full = PilotConfig(phases=theta_bar @ s.matrix, precoder=w, q_shape=(6, 1))

    y_grouped = pilots.measurement_matrix(grouped) @ vectorize((s.matrix @ h)[None])[0]
    y_full = pilots.measurement_matrix(full) @ vectorize(h[None])[0]
    np.testing.assert_allclose(y_grouped, y_full, atol=1e-10)
