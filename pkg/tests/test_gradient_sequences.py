import numpy as np
import pytest

from gradient_sequences import (
    GradientScheme, Measurement, PgseSequence, amplitude_for_b, b_value, bvalue_from_s_per_mm2,
    bvalue_to_s_per_mm2, direction_set, gradient_from_mT_per_m, load_scheme, preset_scheme,
    save_scheme,
)
from recon_constants import GAMMA
from recon_errors import SchemeError


class TestPgseSequence:
    def test_default_echo_time(self):
        seq = PgseSequence(1.0, 5.0)
        assert seq.T_echo == 6.0
        assert seq.breakpoints() == [0.0, 1.0, 5.0, 6.0, 6.0]

    def test_intervals_drop_zero_length(self):
        assert PgseSequence(1.0, 5.0).intervals() == [(0.0, 1.0, 1), (1.0, 5.0, 0), (5.0, 6.0, -1)]
        assert len(PgseSequence(2.0, 2.0, 10.0).intervals()) == 3

    def test_refocusing(self):
        for seq in (PgseSequence(1.0, 5.0), PgseSequence(2.5, 45.0, 60.0)):
            assert seq.refocusing_integral() == pytest.approx(0.0, abs=1e-12)

    def test_profile(self):
        f = PgseSequence(1.0, 5.0).profile([0.5, 3.0, 5.5, 6.5])
        assert np.array_equal(f, [1.0, 0.0, -1.0, 0.0])

    @pytest.mark.parametrize("delta,Delta,T", [(0.0, 5.0, None), (6.0, 5.0, None), (1.0, 5.0, 4.0)])
    def test_invalid(self, delta, Delta, T):
        with pytest.raises(SchemeError):
            PgseSequence(delta, Delta, T)


class TestBValues:
    def test_zero_gradient(self):
        assert b_value(PgseSequence(1.0, 5.0), 0.0) == 0.0

    def test_quadratic_in_g(self):
        seq = PgseSequence(1.0, 20.0)
        assert b_value(seq, 2e-3) == pytest.approx(4.0 * b_value(seq, 1e-3), rel=1e-14)

    def test_unit_phase_value(self):
        # gamma * g * delta = 1 with delta = 1, Delta = 20
        seq = PgseSequence(1.0, 20.0)
        assert b_value(seq, 1.0 / GAMMA) == pytest.approx(19.667, abs=1e-3)

    def test_amplitude_inverts_b(self):
        seq = PgseSequence(1.0, 45.0)
        g = amplitude_for_b(seq, 1.0)
        assert b_value(seq, g) == pytest.approx(1.0, rel=1e-12)
        with pytest.raises(SchemeError):
            amplitude_for_b(seq, -1.0)

    def test_unit_conversions(self):
        assert bvalue_from_s_per_mm2(1000.0) == pytest.approx(1.0)
        assert bvalue_to_s_per_mm2(1.0) == pytest.approx(1000.0)
        assert gradient_from_mT_per_m(80.0) == pytest.approx(8e-5)


class TestDirections:
    def test_three_axes(self):
        assert np.array_equal(direction_set(3), np.eye(3))

    def test_unit_and_reproducible(self):
        a = direction_set(30)
        assert a.shape == (30, 3)
        assert np.allclose(np.linalg.norm(a, axis=1), 1.0)
        assert np.array_equal(a, direction_set(30))
        assert np.all(a[:, 2] >= 0)

    def test_better_spread_than_random(self):
        dirs = direction_set(30)
        rng = np.random.default_rng(1)
        rand = rng.normal(size=(30, 3))
        rand /= np.linalg.norm(rand, axis=1, keepdims=True)

        def closest_pair(u):
            cos = np.abs(u @ u.T)
            np.fill_diagonal(cos, 0.0)
            return cos.max()

        assert closest_pair(dirs) < closest_pair(rand)

    @pytest.mark.parametrize("n", [0, -2, 2.5])
    def test_invalid_count(self, n):
        with pytest.raises(SchemeError):
            direction_set(n)


class TestScheme:
    def test_one_reference_per_sequence(self):
        scheme = preset_scheme(n_directions=3, diffusion_times=(5.0, 20.0))
        assert len(scheme) == 2 * (1 + 3)
        refs = [m for m in scheme.measurements if m.is_reference]
        assert [m.seq_id for m in refs] == [0, 1]
        assert scheme.reference_index(1) == 4

    def test_default_preset_size(self):
        assert len(preset_scheme()) == 3 + 90

    def test_bvalues_match_request(self):
        scheme = preset_scheme(n_directions=3, bvalues_s_mm2=(500.0, 1000.0))
        b = scheme.b_values()
        assert set(np.round(b[b > 0], 9)) == {0.5, 1.0}

    def test_zero_amplitudes_fold_into_reference(self):
        scheme = GradientScheme.from_amplitudes([PgseSequence(1.0, 5.0)], np.eye(3), [0.0, 1e-3])
        assert len(scheme) == 4

    def test_missing_reference(self):
        seq = PgseSequence(1.0, 5.0)
        with pytest.raises(SchemeError, match="reference"):
            GradientScheme((seq,), (Measurement(0, (1.0, 0.0, 0.0), 1e-3),))

    def test_invalid_measurements(self):
        seq = PgseSequence(1.0, 5.0)
        ref = Measurement(0, (1.0, 0.0, 0.0), 0.0)
        with pytest.raises(SchemeError):
            GradientScheme((seq,), (ref, Measurement(1, (1.0, 0.0, 0.0), 1e-3)))
        with pytest.raises(SchemeError):
            GradientScheme((seq,), (ref, Measurement(0, (2.0, 0.0, 0.0), 1e-3)))
        with pytest.raises(SchemeError):
            GradientScheme.from_amplitudes([seq], [[0.0, 0.0, 0.0]], [1e-3])

    def test_json_round_trip(self, tmp_path):
        scheme = preset_scheme(n_directions=6, diffusion_times=(5.0, 45.0))
        path = tmp_path / 'scheme.json'
        save_scheme(scheme, path)
        loaded = load_scheme(path)
        assert loaded.sequences == scheme.sequences
        assert [m.g for m in loaded.measurements] == [m.g for m in scheme.measurements]
        assert np.allclose([m.direction for m in loaded.measurements],
                           [m.direction for m in scheme.measurements], atol=1e-15)

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text('{"rows": []}')
        with pytest.raises(SchemeError):
            load_scheme(path)
